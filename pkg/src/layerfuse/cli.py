"""Command line interface: gen / train / eval / analyze / sweep.

Configuration is a JSON file (all sections optional, defaults applied),
overridable from the command line with repeated --set key=value flags using
dot paths, e.g. --set train.steps=200 --set model.d_model=64. Values parse
as JSON when possible, else as strings.

Exit codes: 0 success, 2 usage or config error, 3 runtime/numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .compgen import (
    BOS,
    EOS,
    Corpus,
    CorpusSpec,
    GenerationError,
    cter,
    exact_match,
    generate_corpus,
    load_corpus,
    triples,
    write_corpus,
)
from .fusion import FusionError, extract_fuse_probs, parse_variant, variant_name
from .model import ModelConfig, Seq2SeqModel
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    eval_loss,
    greedy_decode,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)

__all__ = ["main", "default_config", "load_config", "apply_override",
           "cmd_gen", "cmd_train", "cmd_eval", "cmd_analyze", "cmd_sweep",
           "UsageError"]

DEFAULT_VARIANTS = ("vanilla", "fuse", "fuse_enc", "fuse_dec", "fuse_top", "accum")


class UsageError(ValueError):
    """Bad flags, bad config keys, missing inputs."""


def default_config() -> dict:
    return {
        "corpus": CorpusSpec().to_dict(),
        "model": {
            "d_model": 64,
            "n_heads": 4,
            "d_ffn": 128,
            "n_enc_layers": 2,
            "n_dec_layers": 2,
            "max_len": 48,
            "dropout": 0.1,
            "fusion_mode": "fuse",
            "fusion_sides": "both",
            "seed": 0,
        },
        "train": TrainConfig().to_dict(),
        "data_dir": "data",
        "out_dir": "out",
        "variant": None,
        "eval_split": "cg_test",
        "eval_max_new_tokens": 30,
        "analysis_examples": 64,
    }


def load_config(path: str | None) -> dict:
    """Defaults overlaid with the JSON file at ``path`` (section by section)."""
    cfg = default_config()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        user = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    for key, value in user.items():
        if key not in cfg:
            raise UsageError(f"unknown config section or key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be an object")
            for sub, subval in value.items():
                if sub not in cfg[key]:
                    raise UsageError(f"unknown config key {key}.{sub!r}")
                cfg[key][sub] = subval
        else:
            cfg[key] = value
    return cfg


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one --set key=value override with a dot-path key, in place."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise UsageError(f"unknown config key {key!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[leaf] = value


def _resolve(args) -> dict:
    cfg = load_config(args.config)
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    if args.seed is not None:
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    return cfg


def _corpus_spec(cfg: dict) -> CorpusSpec:
    try:
        return CorpusSpec.from_dict(cfg["corpus"])
    except TypeError as exc:
        raise UsageError(f"bad corpus section: {exc}") from exc


def _model_config(cfg: dict, corpus: Corpus) -> ModelConfig:
    section = dict(cfg["model"])
    variant = cfg.get("variant")
    if variant:
        mode, sides = parse_variant(variant)
        section["fusion_mode"] = mode
        section["fusion_sides"] = sides
    section["src_vocab"] = len(corpus.src_vocab)
    section["tgt_vocab"] = len(corpus.tgt_vocab)
    try:
        mcfg = ModelConfig.from_dict(section)
        mcfg.validate(min_layers=1)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model section: {exc}") from exc
    return mcfg


def _train_config(cfg: dict) -> TrainConfig:
    try:
        tcfg = TrainConfig.from_dict(cfg["train"])
        tcfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train section: {exc}") from exc
    return tcfg


def _load_corpus(cfg: dict) -> Corpus:
    data_dir = Path(cfg["data_dir"])
    try:
        return load_corpus(data_dir)
    except FileNotFoundError as exc:
        raise UsageError(
            f"{exc}; run `layerfuse gen` first or point data_dir at a corpus"
        ) from exc


def _decode_split(model, corpus: Corpus, examples, max_new: int):
    preds, flags = [], []
    for ex in examples:
        ids, truncated = greedy_decode(
            model, corpus.src_vocab.encode(ex.src), BOS, EOS, max_new
        )
        preds.append(corpus.tgt_vocab.decode(ids))
        flags.append(truncated)
    return preds, flags


def _eval_metrics(model, corpus: Corpus, split: str, max_new: int) -> tuple[dict, list]:
    examples = corpus.split(split)
    if not examples:
        raise UsageError(f"split {split!r} is empty")
    preds, flags = _decode_split(model, corpus, examples, max_new)
    metrics = {
        "split": split,
        "n": len(examples),
        "exact_match": exact_match(preds, [ex.tgt for ex in examples]),
        "truncated": int(sum(flags)),
        "variant": model.config.variant,
    }
    if split == "cg_test":
        metrics["cter"] = cter(preds, examples, corpus.dictionary).to_dict()
    records = [
        {
            "src": list(ex.src),
            "ref": list(ex.tgt),
            "pred": list(pred),
            "truncated": bool(flag),
        }
        for ex, pred, flag in zip(examples, preds, flags)
    ]
    return metrics, records


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def _write_fuse_probs_csv(path: Path, probs: dict) -> None:
    """Rows side,layer,prev_layer,probability; layer is 1-based, prev_layer
    0-based with 0 = the embedding output."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["side", "layer", "prev_layer", "probability"])
        for side in sorted(probs):
            for layer_idx in sorted(probs[side]):
                row = probs[side][layer_idx]
                for prev, p in enumerate(row):
                    writer.writerow([side, layer_idx + 1, prev, f"{p:.10f}"])


def _write_breakdown_csv(path: Path, breakdown: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "errors", "total", "rate"])
        for group, cell in breakdown.items():
            writer.writerow([group, cell["errors"], cell["total"],
                             f"{cell['rate']:.6f}"])


# -- subcommands ---------------------------------------------------------------


def cmd_gen(cfg: dict) -> int:
    spec = _corpus_spec(cfg)
    corpus = generate_corpus(spec)
    out = Path(cfg["data_dir"])
    write_corpus(corpus, out)
    counts = {name: len(corpus.split(name))
              for name in ("train", "dev", "test", "cg_test")}
    print(f"corpus written to {out} "
          f"(src vocab {len(corpus.src_vocab)}, tgt vocab {len(corpus.tgt_vocab)}, "
          + ", ".join(f"{k}={v}" for k, v in counts.items()) + ")")
    return 0


def cmd_train(cfg: dict, resume: str | None = None) -> int:
    corpus = _load_corpus(cfg)
    tcfg = _train_config(cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    state = None
    if resume is not None:
        model, state = load_checkpoint(resume)
        if state is None:
            raise UsageError(f"{resume} has no optimizer state to resume from")
    else:
        model = Seq2SeqModel(_model_config(cfg, corpus))
    train_set = triples(corpus.train, corpus.src_vocab, corpus.tgt_vocab)
    dev_set = triples(corpus.dev, corpus.src_vocab, corpus.tgt_vocab)
    mode = "a" if resume is not None else "w"
    with open(out_dir / "train_log.jsonl", mode, encoding="utf-8") as log:
        state, history = train_loop(
            model, train_set, tcfg, dev_set=dev_set or None,
            out_dir=out_dir, log_stream=log, state=state,
        )
    summary = {
        "steps": state.step,
        "variant": model.config.variant,
        "param_count": model.param_count(),
        "final_loss": history[-1]["loss"] if history else None,
        "best_dev_loss": state.best_dev_loss,
    }
    _write_json(out_dir / "train_summary.json", summary)
    print(f"trained {state.step} steps, variant={summary['variant']}, "
          f"params={summary['param_count']}, final_loss={summary['final_loss']}")
    return 0


def cmd_eval(cfg: dict, checkpoint: str | None = None,
             split: str | None = None) -> int:
    corpus = _load_corpus(cfg)
    out_dir = Path(cfg["out_dir"])
    ckpt = checkpoint or str(out_dir / "checkpoint.npz")
    if not Path(ckpt).exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, _ = load_checkpoint(ckpt)
    split = split or cfg["eval_split"]
    metrics, records = _eval_metrics(model, corpus, split,
                                     cfg["eval_max_new_tokens"])
    _write_json(out_dir / f"metrics_{split}.json", metrics)
    with open(out_dir / f"predictions_{split}.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    line = f"{split}: n={metrics['n']} exact_match={metrics['exact_match']:.4f}"
    if "cter" in metrics:
        line += (f" cter_instance={metrics['cter']['instance_rate']:.4f}"
                 f" cter_aggregate={metrics['cter']['aggregate_rate']:.4f}")
    print(line)
    return 0


def cmd_analyze(cfg: dict, checkpoint: str | None = None) -> int:
    corpus = _load_corpus(cfg)
    out_dir = Path(cfg["out_dir"])
    ckpt = checkpoint or str(out_dir / "checkpoint.npz")
    if not Path(ckpt).exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, _ = load_checkpoint(ckpt)
    pool = corpus.cg_test or corpus.test or corpus.train
    sample = pool[: cfg["analysis_examples"]]
    batch = [
        (src, tgt_in)
        for src, tgt_in, _ in triples(sample, corpus.src_vocab, corpus.tgt_vocab)
    ]
    probs = extract_fuse_probs(model, batch)
    _write_fuse_probs_csv(out_dir / "fuse_probs.csv", probs)
    if corpus.cg_test:
        preds, _ = _decode_split(model, corpus, corpus.cg_test,
                                 cfg["eval_max_new_tokens"])
        report = cter(preds, corpus.cg_test, corpus.dictionary)
        _write_breakdown_csv(out_dir / "cter_by_compound_length.csv",
                             report.by_compound_length)
        _write_breakdown_csv(out_dir / "cter_by_context_length.csv",
                             report.by_context_bucket)
        _write_breakdown_csv(out_dir / "cter_by_mod.csv", report.by_mod)
        _write_json(out_dir / "analysis_summary.json",
                    {"cter": report.to_dict(), "variant": model.config.variant})
    print(f"analysis written to {out_dir}")
    return 0


def cmd_sweep(cfg: dict, variants=None, seeds=None) -> int:
    variants = list(variants or DEFAULT_VARIANTS)
    seeds = [int(s) for s in (seeds if seeds is not None else (0, 1, 2))]
    for v in variants:
        parse_variant(v)
    out_dir = Path(cfg["out_dir"])
    data_dir = out_dir / "data"
    spec = _corpus_spec(cfg)
    corpus = generate_corpus(spec)
    write_corpus(corpus, data_dir)
    tcfg_base = _train_config(cfg)

    baseline_counts: dict[str, int] = {}
    rows = []
    for variant in variants:
        for seed in seeds:
            run_cfg = json.loads(json.dumps(cfg))
            run_cfg["variant"] = variant
            run_cfg["model"]["seed"] = seed
            mcfg = _model_config(run_cfg, corpus)
            model = Seq2SeqModel(mcfg)
            if variant not in baseline_counts:
                vanilla_cfg = mcfg.with_variant("vanilla")
                baseline_counts[variant] = (
                    model.param_count() - Seq2SeqModel(vanilla_cfg).param_count()
                )
            tcfg = TrainConfig.from_dict(tcfg_base.to_dict())
            tcfg.seed = seed
            run_dir = out_dir / "runs" / f"{variant}-s{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            train_set = triples(corpus.train, corpus.src_vocab, corpus.tgt_vocab)
            with open(run_dir / "train_log.jsonl", "w", encoding="utf-8") as log:
                state, history = train_loop(model, train_set, tcfg,
                                            out_dir=run_dir, log_stream=log)
            metrics, _ = _eval_metrics(model, corpus, "cg_test",
                                       cfg["eval_max_new_tokens"])
            _write_json(run_dir / "metrics_cg_test.json", metrics)
            if mcfg.fused_layers("encoder") or mcfg.fused_layers("decoder"):
                sample = corpus.cg_test[: cfg["analysis_examples"]]
                batch = [(s, ti) for s, ti, _ in
                         triples(sample, corpus.src_vocab, corpus.tgt_vocab)]
                _write_fuse_probs_csv(run_dir / "fuse_probs.csv",
                                      extract_fuse_probs(model, batch))
            row = {
                "variant": variant,
                "seed": seed,
                "params": model.param_count(),
                "added_params": baseline_counts[variant],
                "cter_instance": metrics["cter"]["instance_rate"],
                "cter_aggregate": metrics["cter"]["aggregate_rate"],
                "exact_match": metrics["exact_match"],
                "final_loss": history[-1]["loss"] if history else None,
            }
            rows.append(row)
            print(f"[sweep] {variant} seed={seed} "
                  f"cter_inst={row['cter_instance']:.4f} "
                  f"cter_aggr={row['cter_aggregate']:.4f} "
                  f"em={row['exact_match']:.4f} params={row['params']}")

    fields = ["variant", "seed", "params", "added_params", "cter_instance",
              "cter_aggregate", "exact_match", "final_loss"]
    with open(out_dir / "sweep_results.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    lines = ["| variant | runs | params | added_params | cter_instance | "
             "cter_aggregate | exact_match |",
             "|---|---|---|---|---|---|---|"]
    for variant in variants:
        sub = [r for r in rows if r["variant"] == variant]
        mean = lambda key: sum(r[key] for r in sub) / len(sub)
        lines.append(
            f"| {variant} | {len(sub)} | {sub[0]['params']} | "
            f"{sub[0]['added_params']} | {mean('cter_instance'):.4f} | "
            f"{mean('cter_aggregate'):.4f} | {mean('exact_match'):.4f} |"
        )
    table = "\n".join(lines) + "\n"
    (out_dir / "sweep_results.md").write_text(table, encoding="utf-8")
    print(table)
    return 0


# -- entry point ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerfuse",
        description="Cross-layer fusion transformer on a synthetic "
                    "compositional-generalization benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dot-path config override, repeatable")
        p.add_argument("--seed", type=int, default=None,
                       help="override model.seed and train.seed")
        p.add_argument("--out", default=None, help="override out_dir")

    p = sub.add_parser("gen", help="generate the synthetic corpus")
    common(p)
    p = sub.add_parser("train", help="train a model on data_dir")
    common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p = sub.add_parser("eval", help="greedy-decode a split and report metrics")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default=None,
                   choices=("train", "dev", "test", "cg_test"))
    p = sub.add_parser("analyze", help="dump fuse probabilities and error "
                                       "breakdown CSVs")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p = sub.add_parser("sweep", help="train and evaluate a grid of variants "
                                     "and seeds")
    common(p)
    p.add_argument("--variants", default=",".join(DEFAULT_VARIANTS),
                   help="comma-separated variant names")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.command == "gen":
            if args.out is not None:
                cfg["data_dir"] = args.out
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, checkpoint=args.checkpoint, split=args.split)
        if args.command == "analyze":
            return cmd_analyze(cfg, checkpoint=args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(cfg, variants=args.variants.split(","),
                             seeds=args.seeds.split(","))
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, GenerationError, FusionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
