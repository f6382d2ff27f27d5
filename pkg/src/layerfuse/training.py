"""Training loop, Adam with inverse-sqrt warmup schedule, greedy decoding,
and bit-exact checkpointing.

All randomness is derived functionally from (seed, purpose tag, step), so a
resumed run consumes exactly the same batch order and dropout masks as an
uninterrupted one; checkpoints only need to persist the step counter and the
optimizer moments.

A batch is a list of (src_ids, tgt_in_ids, tgt_out_ids) triples. Sentences
are processed one at a time on a shared tape; the step loss is the summed
token NLL divided by the total token count (mean over tokens).
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, Seq2SeqModel
from .tensor import Tensor, backward, cross_entropy, no_grad

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "CheckpointError",
    "lr_at",
    "init_state",
    "train_step",
    "train_loop",
    "eval_loss",
    "token_accuracy",
    "greedy_decode",
    "save_checkpoint",
    "load_checkpoint",
]

# Purpose tags for functional RNG derivation.
_TAG_ORDER = 1
_TAG_DROPOUT = 2

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Numeric failure during training (non-finite loss)."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 2e-3
    warmup: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 200

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.warmup < 1:
            raise ValueError("steps >= 0, batch_size >= 1, warmup >= 1 required")
        if self.lr <= 0 or self.clip_norm <= 0 or self.adam_eps <= 0:
            raise ValueError("lr, clip_norm and adam_eps must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must be in [0, 1)")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    """Optimizer step counter plus Adam moments, keyed by parameter name."""

    step: int = 0
    seed: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    best_dev_loss: float | None = None


def init_state(model: Seq2SeqModel, cfg: TrainConfig) -> TrainState:
    state = TrainState(step=0, seed=cfg.seed)
    for name, p in model.parameters().items():
        state.adam_m[name] = np.zeros_like(p.data)
        state.adam_v[name] = np.zeros_like(p.data)
    return state


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr at step == warmup, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"schedule is defined for step >= 1, got {step}")
    return cfg.lr * min(step / cfg.warmup, math.sqrt(cfg.warmup / step))


def _global_grad_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def batch_indices(step0: int, n_examples: int, cfg: TrainConfig) -> np.ndarray:
    """Deterministic batch schedule: epoch-wise seeded permutations."""
    bs = min(cfg.batch_size, n_examples)
    per_epoch = n_examples // bs
    epoch, slot = divmod(step0, per_epoch)
    order = np.random.default_rng([cfg.seed, _TAG_ORDER, epoch]).permutation(n_examples)
    return order[slot * bs:(slot + 1) * bs]


def train_step(model: Seq2SeqModel, batch, cfg: TrainConfig, state: TrainState) -> dict:
    """One optimizer step over a batch of sentence triples."""
    state.step += 1
    lr = lr_at(state.step, cfg)
    drop_rng = (
        np.random.default_rng([cfg.seed, _TAG_DROPOUT, state.step])
        if model.config.dropout > 0.0 else None
    )
    model.zero_grad()
    total_nll = None
    total_tokens = 0
    for src_ids, tgt_in_ids, tgt_out_ids in batch:
        logits = model.forward(src_ids, tgt_in_ids, drop_rng=drop_rng)
        nll = cross_entropy(logits, tgt_out_ids, cfg.label_smoothing, reduction="sum")
        total_nll = nll if total_nll is None else total_nll + nll
        total_tokens += len(tgt_out_ids)
    loss = total_nll * (1.0 / total_tokens)
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise TrainingError(f"non-finite loss {loss_val!r} at step {state.step}")
    backward(loss)

    params = model.parameters()
    grad_norm = _global_grad_norm(params)
    scale = cfg.clip_norm / grad_norm if grad_norm > cfg.clip_norm else 1.0
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if scale != 1.0:
            g = g * scale
        m = state.adam_m[name] = b1 * state.adam_m[name] + (1.0 - b1) * g
        v = state.adam_v[name] = b2 * state.adam_v[name] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
    return {"loss": loss_val, "lr": lr, "grad_norm": grad_norm}


def eval_loss(model: Seq2SeqModel, triples, label_smoothing: float = 0.0) -> float:
    """Teacher-forced mean token loss without dropout."""
    total = 0.0
    tokens = 0
    with no_grad():
        for src_ids, tgt_in_ids, tgt_out_ids in triples:
            logits = model.forward(src_ids, tgt_in_ids)
            nll = cross_entropy(logits, tgt_out_ids, label_smoothing, reduction="sum")
            total += nll.item()
            tokens += len(tgt_out_ids)
    return total / max(tokens, 1)


def token_accuracy(model: Seq2SeqModel, triples) -> float:
    """Fraction of teacher-forced positions whose argmax hits the target."""
    hits = 0
    tokens = 0
    with no_grad():
        for src_ids, tgt_in_ids, tgt_out_ids in triples:
            logits = model.forward(src_ids, tgt_in_ids)
            hits += int(np.sum(np.argmax(logits.data, axis=1) == tgt_out_ids))
            tokens += len(tgt_out_ids)
    return hits / max(tokens, 1)


def train_loop(
    model: Seq2SeqModel,
    train_set,
    cfg: TrainConfig,
    dev_set=None,
    out_dir: str | Path | None = None,
    log_stream=None,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run cfg.steps optimizer steps (continuing from ``state`` if given).

    Writes one JSON line per step to ``log_stream`` and, when ``out_dir`` is
    set, saves checkpoint.npz every checkpoint_interval steps plus best.npz
    whenever the dev loss improves. Returns the final state and the list of
    per-step records.
    """
    cfg.validate()
    if not train_set:
        raise ValueError("empty training set")
    if state is None:
        state = init_state(model, cfg)
    out_path = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []
    while state.step < cfg.steps:
        batch = [train_set[i] for i in batch_indices(state.step, len(train_set), cfg)]
        t0 = time.perf_counter()
        rec = train_step(model, batch, cfg, state)
        rec["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        rec["step"] = state.step
        at_interval = state.step % cfg.checkpoint_interval == 0
        if (at_interval or state.step == cfg.steps) and dev_set:
            dev = eval_loss(model, dev_set, cfg.label_smoothing)
            rec["dev_loss"] = dev
            if state.best_dev_loss is None or dev < state.best_dev_loss:
                state.best_dev_loss = dev
                if out_path is not None:
                    save_checkpoint(out_path / "best.npz", model, state)
        if out_path is not None and (at_interval or state.step == cfg.steps):
            save_checkpoint(out_path / "checkpoint.npz", model, state)
        if log_stream is not None:
            log_stream.write(json.dumps(rec, sort_keys=True) + "\n")
        history.append(rec)
    if out_path is not None:
        save_checkpoint(out_path / "checkpoint.npz", model, state)
        if not (out_path / "best.npz").exists():
            save_checkpoint(out_path / "best.npz", model, state)
    return state, history


def greedy_decode(
    model: Seq2SeqModel,
    src_ids,
    bos_id: int,
    eos_id: int,
    max_new_tokens: int,
) -> tuple[list[int], bool]:
    """Argmax decoding until EOS; returns (tokens, truncated).

    The emitted list excludes BOS/EOS. ``truncated`` is True when the length
    budget (or the model's positional table) ran out before EOS appeared.
    """
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    budget = min(max_new_tokens, model.config.max_len - 1)
    out: list[int] = []
    with no_grad():
        enc_out, _ = model.encode(src_ids)
        prefix = [bos_id]
        while True:
            logits, _ = model.decode(np.asarray(prefix, dtype=np.int64), enc_out)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == eos_id:
                return out, False
            out.append(nxt)
            prefix.append(nxt)
            if len(out) >= budget:
                return out, True


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model: Seq2SeqModel,
    state: TrainState | None = None,
    extra: dict | None = None,
) -> None:
    """Single-file .npz: versioned JSON meta + raw float64 parameter buffers."""
    meta = {
        "format": "layerfuse-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "step": state.step if state is not None else 0,
        "seed": state.seed if state is not None else model.config.seed,
        "best_dev_loss": state.best_dev_loss if state is not None else None,
        "has_optimizer": state is not None,
        "extra": extra or {},
    }
    arrays: dict[str, np.ndarray] = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                              dtype=np.uint8)
    }
    for name, p in model.parameters().items():
        arrays[f"param/{name}"] = p.data
    if state is not None:
        for name, m in state.adam_m.items():
            arrays[f"adam_m/{name}"] = m
        for name, v in state.adam_v.items():
            arrays[f"adam_v/{name}"] = v
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[Seq2SeqModel, TrainState | None]:
    """Rebuild the model (and optimizer state, if saved) from a checkpoint."""
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    with archive:
        if "meta" not in archive.files:
            raise CheckpointError(f"{path} has no meta entry")
        try:
            meta = json.loads(bytes(archive["meta"].tobytes()).decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path} meta entry is corrupt: {exc}") from exc
        if meta.get("format") != "layerfuse-checkpoint":
            raise CheckpointError(f"{path} is not a checkpoint file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path} has version {meta.get('version')}, "
                f"expected {CHECKPOINT_VERSION}"
            )
        model = Seq2SeqModel(ModelConfig.from_dict(meta["model_config"]))
        for name, p in model.parameters().items():
            key = f"param/{name}"
            if key not in archive.files:
                raise CheckpointError(f"{path} is missing parameter {name}")
            arr = archive[key]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"{path} parameter {name} has shape {arr.shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = np.array(arr, dtype=np.float64)
        state = None
        if meta.get("has_optimizer"):
            state = TrainState(step=int(meta["step"]), seed=int(meta["seed"]),
                               best_dev_loss=meta.get("best_dev_loss"))
            for name, p in model.parameters().items():
                for field_name, store in (("adam_m", state.adam_m),
                                          ("adam_v", state.adam_v)):
                    key = f"{field_name}/{name}"
                    if key not in archive.files:
                        raise CheckpointError(f"{path} is missing {key}")
                    store[name] = np.array(archive[key], dtype=np.float64)
    return model, state
