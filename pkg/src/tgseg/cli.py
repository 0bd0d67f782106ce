"""Command-line entry point: ``tgseg <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or input error, 2 invariant breach (frozen
weights changed, non-finite loss, parameter accounting mismatch).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff.checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig
from .data import CorruptRecordError, generate_dataset, load_dataset, write_pgm

log = logging.getLogger("tgseg")

EXIT_OK, EXIT_USAGE, EXIT_BREACH = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads() -> int:
    raw = os.environ.get("TGC_THREADS", "")
    if not raw:
        return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TGC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"TGC_THREADS must be a positive integer, got {raw!r}")
    return n


def _limit_threads(n: int):
    # the numba kernels are serial; BLAS pools are the only worker threads
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfg.override(key.strip(), value.strip())
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, out: Path) -> int:
    m = generate_dataset(args.n, args.seed, out)
    print(json.dumps({"manifest": str(out / "manifest.json"), "splits": m.split_sizes()}))
    return EXIT_OK


def cmd_pretrain(args, out: Path) -> int:
    from .encoders import matched_vs_mismatched, pretrain_align, save_encoders, stack_records
    cfg = load_config(args)
    steps = args.steps if args.steps is not None else cfg.encoders.pretrain_steps
    recs = list(load_dataset(cfg.data.path, "train"))
    images, ids = stack_records(recs)
    enc = pretrain_align(images, ids, steps, cfg.encoders.seed)
    save_encoders(enc, out / "encoders.tgcl")
    k = min(64, len(recs))
    matched, mismatched = matched_vs_mismatched(enc, images[:k], ids[:k])
    summary = {"steps": steps, "matched_cos": matched, "mismatched_cos": mismatched,
               "checkpoint": "encoders.tgcl"}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_train(args, out: Path) -> int:
    from .plotting import plot_training_curves
    from .train import train
    cfg = load_config(args)
    res = train(cfg, out)
    plot_training_curves(out / "metrics.jsonl", out / "training_curves.png")
    print(json.dumps({"best_mDice": res.best_mdice, "best_step": res.best_step, "steps_run": res.steps_run}))
    return EXIT_OK


def _checkpoint_arg(args) -> Path:
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return path


def cmd_eval(args, out: Path) -> int:
    from .train import FeatureCache, build_encoders, evaluate, load_model, predict
    cfg = load_config(args)
    enc = build_encoders(cfg)
    model = load_model(cfg, _checkpoint_arg(args), enc)
    recs = list(load_dataset(cfg.data.path, args.split))
    cache = FeatureCache(enc, recs)
    rep, loss = evaluate(model, cache)
    bad = [i for i, (d, u) in enumerate(zip(rep.dice, rep.iou)) if u > d + 1e-12]
    if bad:
        log.error("dice < iou on samples %s", bad)
        return EXIT_BREACH
    (out / "pred").mkdir(parents=True, exist_ok=True)
    for rec, mask in zip(recs, predict(model, cache)):
        write_pgm(out / "pred" / f"{rec.seed}.pgm", mask * 255)
    result = {"split": args.split, "n": len(recs), "mDice": rep.mdice, "mIoU": rep.miou, "loss": loss,
              "per_sample": [{"seed": r.seed, "dice": d, "iou": u} for r, d, u in zip(recs, rep.dice, rep.iou)]}
    (out / "eval.json").write_text(json.dumps(result, indent=1))
    print(json.dumps({k: result[k] for k in ("split", "n", "mDice", "mIoU", "loss")}))
    return EXIT_OK


def cmd_ablate(args, out: Path) -> int:
    from .ablation import ablate
    from .plotting import plot_ablation
    cfg = load_config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    payload = ablate(cfg, out, seeds=list(range(args.seeds)), full=args.full)
    for name, rows in payload["tables"].items():
        plot_ablation(rows, out / f"ablation_{name}.png", title=name)
    print((out / "ablation.txt").read_text(), end="")
    return EXIT_OK


def cmd_params(args, out: Path) -> int:
    from .model import SegModel, count_params
    from .plotting import plot_param_breakdown
    from .train import build_encoders
    cfg = load_config(args)
    counts = count_params(SegModel(cfg.model, build_encoders(cfg), seed=cfg.train.seed))
    (out / "params.json").write_text(json.dumps(counts, indent=2))
    plot_param_breakdown(counts, out / "params.png")
    width = max(len(k) for k in counts["modules"])
    lines = [f"{k.ljust(width)}  {v:>10,}" for k, v in counts["modules"].items()]
    lines += [f"{'trainable'.ljust(width)}  {counts['trainable']:>10,}",
              f"{'frozen'.ljust(width)}  {counts['frozen']:>10,}",
              f"{'total'.ljust(width)}  {counts['total']:>10,}"]
    (out / "params.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_simmap(args, out: Path) -> int:
    from .plotting import plot_similarity_panel
    from .simmap import export_similarity_maps, similarity_maps
    from .train import build_encoders, load_model
    cfg = load_config(args)
    enc = build_encoders(cfg)
    model = load_model(cfg, _checkpoint_arg(args), enc)
    recs = list(load_dataset(cfg.data.path, args.split))
    recs = [r for r in recs if r.mask.any()][:args.limit] if args.lesion_only else recs[:args.limit]
    summary = export_similarity_maps(model, recs, out)
    k = min(args.figures, len(recs))
    if k:
        maps = similarity_maps(model, recs[:k])
        for i, rec in enumerate(recs[:k]):
            plot_similarity_panel(rec.image, rec.mask, {v: maps[v][i] for v in maps}, rec.prompts.primary,
                                  out / "figures" / f"{i:04d}_{rec.seed}.png")
    print(json.dumps({v: {"fraction_positive": summary.fraction_positive(v),
                          "mean_margin": float(np.mean(m)) if m else 0.0}
                      for v, m in summary.margins.items()}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    if config:
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry by dotted key, e.g. train.steps=0 (repeatable)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tgseg", description="Text-guided segmentation experiments on synthetic thorax images.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _common(p, config=False)
    p.add_argument("--n", type=int, default=1000, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="global dataset seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastively align and freeze the image/text encoders")
    _common(p)
    p.add_argument("--steps", type=int, help="alignment steps (default: encoders.pretrain_steps)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the adapters and decoder")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.tgcl)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="multi-seed component ablation")
    _common(p)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per row")
    p.add_argument("--full", action="store_true", help="also sweep the text and alignment variants")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="trainable/frozen parameter accounting")
    _common(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("simmap", help="export pixel-text similarity heatmaps")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.tgcl)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--limit", type=int, default=32, help="maximum number of samples")
    p.add_argument("--lesion-only", action="store_true", help="skip samples with an empty mask")
    p.add_argument("--figures", type=int, default=4, help="number of side-by-side PNG panels")
    p.set_defaults(func=cmd_simmap)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    from .model import AccountingError
    from .train import FrozenMutationError, NonFiniteLossError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(message)s", force=True)
    out = Path(args.out)
    try:
        limits = _limit_threads(_threads())
        with limits:
            out.mkdir(parents=True, exist_ok=True)
            return args.func(args, out)
    except (FrozenMutationError, NonFiniteLossError, AccountingError) as e:
        log.error("invariant breach: %s", e)
        return EXIT_BREACH
    except (UsageError, ConfigError, CorruptRecordError, CheckpointError, FileNotFoundError) as e:
        print(f"tgseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
