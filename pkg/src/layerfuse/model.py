"""Encoder-decoder transformer with optional cross-layer fusion.

Post-layer-norm convention throughout: sublayer output is
layer_norm(x + dropout(sublayer(x))). Embeddings are learned, absolute,
scaled by sqrt(d_model); source/target tables and the output projection are
all untied. Attention projections carry no biases.

Every forward keeps a per-side LayerCache: the embedding output plus each
layer's output, and the tensor actually fed to each layer (which differs
from the previous output only in accum mode).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    _xavier,
    make_causal_mask,
    multi_head_attention,
)
from .fusion import (
    FusionError,
    MODES,
    SIDES,
    accumulate_previous,
    accumulates,
    fuse_attention,
    fused_layer_indices,
    parse_variant,
    variant_name,
)
from .tensor import ShapeError, Tensor, embedding_lookup, layer_norm

__all__ = ["ModelConfig", "LayerCache", "Seq2SeqModel", "copy_shared_parameters"]

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_len: int = 64
    dropout: float = 0.1
    fusion_mode: str = "fuse"
    fusion_sides: str = "both"
    seed: int = 0

    def validate(self, min_layers: int = 0) -> None:
        # min_layers=0 admits degenerate stacks used in tests; the CLI
        # validates with min_layers=1.
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} must be a positive multiple of "
                f"n_heads {self.n_heads}"
            )
        if self.src_vocab < 1 or self.tgt_vocab < 1:
            raise ValueError("vocab sizes must be >= 1")
        if self.n_enc_layers < min_layers or self.n_dec_layers < min_layers:
            raise ValueError(f"layer counts must be >= {min_layers}")
        if self.d_ffn < 1 or self.max_len < 1:
            raise ValueError("d_ffn and max_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.fusion_mode not in MODES:
            raise ValueError(f"fusion_mode must be one of {MODES}")
        if self.fusion_sides not in SIDES:
            raise ValueError(f"fusion_sides must be one of {SIDES}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def fused_layers(self, side: str) -> list[int]:
        n = self.n_enc_layers if side == "encoder" else self.n_dec_layers
        return fused_layer_indices(self.fusion_mode, self.fusion_sides, side, n)

    def accumulates(self, side: str) -> bool:
        return accumulates(self.fusion_mode, self.fusion_sides, side)

    @property
    def variant(self) -> str:
        return variant_name(self.fusion_mode, self.fusion_sides)

    def with_variant(self, name: str) -> "ModelConfig":
        mode, sides = parse_variant(name)
        cfg = ModelConfig(**asdict(self))
        cfg.fusion_mode = mode
        cfg.fusion_sides = sides
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerCache:
    """Per-forward history of one stack (encoder or decoder).

    outputs[0] is the embedding output; outputs[j] is layer j-1's output.
    layer_inputs[k] is the tensor actually consumed by layer k.
    """

    outputs: list = field(default_factory=list)
    layer_inputs: list = field(default_factory=list)


class _LayerNormParams:
    def __init__(self, reg, prefix: str, d: int):
        self.gamma = reg.add(f"{prefix}.gamma", np.ones(d))
        self.beta = reg.add(f"{prefix}.beta", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, LN_EPS)


class _FeedForward:
    def __init__(self, reg, prefix: str, rng, d: int, d_ffn: int):
        self.w1 = reg.add_init(f"{prefix}.w1", _xavier(rng, d, d_ffn))
        self.b1 = reg.add(f"{prefix}.b1", np.zeros(d_ffn))
        self.w2 = reg.add_init(f"{prefix}.w2", _xavier(rng, d_ffn, d))
        self.b2 = reg.add(f"{prefix}.b2", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return (x.matmul(self.w1) + self.b1).relu().matmul(self.w2) + self.b2


class _Registry:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True)
        self.params[name] = t
        return t

    def add_init(self, name: str, t: Tensor) -> Tensor:
        self.params[name] = t
        return t

    def add_attention(self, prefix: str, params: AttentionParams) -> AttentionParams:
        self.params.update(params.named(prefix))
        return params


def _dropout_fn(rng: np.random.Generator | None, rate: float):
    """Inverted dropout as a closure, or None when inactive (eval mode)."""
    if rng is None or rate == 0.0:
        return None
    scale = 1.0 / (1.0 - rate)
    def drop(x: Tensor) -> Tensor:
        mask = (rng.random(x.data.shape) >= rate) * scale
        return x * Tensor(mask)
    return drop


class _EncoderLayer:
    def __init__(self, reg, prefix: str, rng, cfg: ModelConfig, fused: bool):
        d, h = cfg.d_model, cfg.n_heads
        self.self_attn = reg.add_attention(
            f"{prefix}.self", AttentionParams.create(rng, d, h)
        )
        self.fuse_params = (
            reg.add_attention(f"{prefix}.fuse", AttentionParams.create(rng, d, h))
            if fused else None
        )
        self.norm_self = _LayerNormParams(reg, f"{prefix}.norm_self", d)
        self.ffn = _FeedForward(reg, f"{prefix}.ffn", rng, d, cfg.d_ffn)
        self.norm_ffn = _LayerNormParams(reg, f"{prefix}.norm_ffn", d)

    def self_block(self, x, mask=None, drop=None):
        out = multi_head_attention(x, x, x, self.self_attn, mask)
        if drop is not None:
            out = drop(out)
        return self.norm_self(x + out)

    def ffn_block(self, x, drop=None):
        out = self.ffn(x)
        if drop is not None:
            out = drop(out)
        return self.norm_ffn(x + out)

    def forward(self, x, history, mask=None, drop=None, recorder=None,
                layer_idx=0):
        a = self.self_block(x, mask, drop)
        if self.fuse_params is not None:
            a, probs = fuse_attention(a, history, self.fuse_params, dropout=drop)
            if recorder is not None:
                recorder.add("encoder", layer_idx, probs)
        return self.ffn_block(a, drop)


class _DecoderLayer:
    def __init__(self, reg, prefix: str, rng, cfg: ModelConfig, fused: bool):
        d, h = cfg.d_model, cfg.n_heads
        self.self_attn = reg.add_attention(
            f"{prefix}.self", AttentionParams.create(rng, d, h)
        )
        self.cross_attn = reg.add_attention(
            f"{prefix}.cross", AttentionParams.create(rng, d, h)
        )
        self.fuse_params = (
            reg.add_attention(f"{prefix}.fuse", AttentionParams.create(rng, d, h))
            if fused else None
        )
        self.norm_self = _LayerNormParams(reg, f"{prefix}.norm_self", d)
        self.norm_cross = _LayerNormParams(reg, f"{prefix}.norm_cross", d)
        self.ffn = _FeedForward(reg, f"{prefix}.ffn", rng, d, cfg.d_ffn)
        self.norm_ffn = _LayerNormParams(reg, f"{prefix}.norm_ffn", d)

    def self_block(self, x, causal_mask, drop=None):
        out = multi_head_attention(x, x, x, self.self_attn, causal_mask)
        if drop is not None:
            out = drop(out)
        return self.norm_self(x + out)

    def cross_block(self, x, enc_out, mask=None, drop=None):
        out = multi_head_attention(x, enc_out, enc_out, self.cross_attn, mask)
        if drop is not None:
            out = drop(out)
        return self.norm_cross(x + out)

    def ffn_block(self, x, drop=None):
        out = self.ffn(x)
        if drop is not None:
            out = drop(out)
        return self.norm_ffn(x + out)

    def forward(self, x, enc_out, history, causal_mask, src_mask=None,
                drop=None, recorder=None, layer_idx=0):
        a = self.self_block(x, causal_mask, drop)
        a = self.cross_block(a, enc_out, src_mask, drop)
        if self.fuse_params is not None:
            a, probs = fuse_attention(a, history, self.fuse_params, dropout=drop)
            if recorder is not None:
                recorder.add("decoder", layer_idx, probs)
        return self.ffn_block(a, drop)


class Seq2SeqModel:
    """Transformer encoder-decoder over integer token ids.

    All parameters live in a name -> Tensor registry created in a fixed
    order from config.seed, so construction is deterministic.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        reg = _Registry()
        d = config.d_model
        emb_std = 1.0 / math.sqrt(d)
        self.src_embed = reg.add(
            "src_embed", rng.normal(0.0, emb_std, size=(config.src_vocab, d))
        )
        self.src_pos = reg.add(
            "src_pos", rng.normal(0.0, emb_std, size=(config.max_len, d))
        )
        self.tgt_embed = reg.add(
            "tgt_embed", rng.normal(0.0, emb_std, size=(config.tgt_vocab, d))
        )
        self.tgt_pos = reg.add(
            "tgt_pos", rng.normal(0.0, emb_std, size=(config.max_len, d))
        )
        enc_fused = set(config.fused_layers("encoder"))
        self.enc_layers = [
            _EncoderLayer(reg, f"enc.{k}", rng, config, fused=k in enc_fused)
            for k in range(config.n_enc_layers)
        ]
        dec_fused = set(config.fused_layers("decoder"))
        self.dec_layers = [
            _DecoderLayer(reg, f"dec.{k}", rng, config, fused=k in dec_fused)
            for k in range(config.n_dec_layers)
        ]
        self.out_proj = reg.add_init("out.w", _xavier(rng, d, config.tgt_vocab))
        self._params = reg.params

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def param_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    # -- forward -------------------------------------------------------------

    def embed(self, ids: np.ndarray, side: str) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size < 1:
            raise ShapeError("cannot embed an empty sequence")
        if ids.size > self.config.max_len:
            raise ShapeError(
                f"sequence length {ids.size} exceeds max_len {self.config.max_len}"
            )
        table, pos = (
            (self.src_embed, self.src_pos) if side == "encoder"
            else (self.tgt_embed, self.tgt_pos)
        )
        scaled = embedding_lookup(table, ids) * math.sqrt(self.config.d_model)
        return scaled + embedding_lookup(pos, np.arange(ids.size))

    def encode(self, src_ids, *, drop_rng=None, recorder=None):
        """Run the encoder stack; returns (top output, LayerCache)."""
        drop = _dropout_fn(drop_rng, self.config.dropout)
        h = self.embed(src_ids, "encoder")
        if drop is not None:
            h = drop(h)
        cache = LayerCache(outputs=[h])
        accum = self.config.accumulates("encoder")
        for k, layer in enumerate(self.enc_layers):
            x = accumulate_previous(cache.outputs) if accum else cache.outputs[-1]
            cache.layer_inputs.append(x)
            y = layer.forward(x, list(cache.outputs), mask=None, drop=drop,
                              recorder=recorder, layer_idx=k)
            cache.outputs.append(y)
        return cache.outputs[-1], cache

    def decode(self, tgt_prefix_ids, enc_out, *, drop_rng=None, recorder=None):
        """Run the decoder stack on a target prefix; returns (logits, cache).

        logits has one row per prefix position; the last row scores the next
        token. Self-attention is causally masked, so row t never depends on
        positions after t.
        """
        drop = _dropout_fn(drop_rng, self.config.dropout)
        h = self.embed(tgt_prefix_ids, "decoder")
        if drop is not None:
            h = drop(h)
        causal = make_causal_mask(h.shape[0])
        cache = LayerCache(outputs=[h])
        accum = self.config.accumulates("decoder")
        for k, layer in enumerate(self.dec_layers):
            x = accumulate_previous(cache.outputs) if accum else cache.outputs[-1]
            cache.layer_inputs.append(x)
            y = layer.forward(x, enc_out, list(cache.outputs), causal,
                              drop=drop, recorder=recorder, layer_idx=k)
            cache.outputs.append(y)
        logits = cache.outputs[-1].matmul(self.out_proj)
        return logits, cache

    def forward(self, src_ids, tgt_in_ids, *, drop_rng=None, recorder=None) -> Tensor:
        enc_out, _ = self.encode(src_ids, drop_rng=drop_rng, recorder=recorder)
        logits, _ = self.decode(tgt_in_ids, enc_out, drop_rng=drop_rng,
                                recorder=recorder)
        return logits


def copy_shared_parameters(src: Seq2SeqModel, dst: Seq2SeqModel) -> list[str]:
    """Copy every parameter whose name and shape match; returns copied names."""
    copied = []
    src_params = src.parameters()
    for name, t in dst.parameters().items():
        other = src_params.get(name)
        if other is not None and other.data.shape == t.data.shape:
            t.data = other.data.copy()
            copied.append(name)
    return copied
