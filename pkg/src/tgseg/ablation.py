"""Multi-seed ablation harness: core component rows and variant sweeps."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ROW_LABELS, ROWS, ExperimentConfig
from .data import load_dataset
from .encoders import FrozenEncoders
from .train import FeatureCache, build_encoders, evaluate, load_model, load_split_caches, train

log = logging.getLogger(__name__)

DATE_LABELS = {
    "main_only": "Main Text Only",
    "aux_only": "Auxiliary Text Only",
    "concat": "Concatenated Text",
    "inject": "DATE (auxiliary injection)",
}
VLCM_LABELS = {
    "none": "No Prior Alignment",
    "single": "Single Cross-Attention",
    "bidirectional": "Bi-directional Cross-Attention",
    "gated": "Gated Global Alignment",
}


@dataclass
class RowResult:
    row: str
    label: str
    toggles: dict
    mdice: list[float] = field(default_factory=list)
    miou: list[float] = field(default_factory=list)
    val_mdice: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.mdice))

    @property
    def sd(self) -> float:
        return float(np.std(self.mdice, ddof=1)) if len(self.mdice) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"row": self.row, "label": self.label, "toggles": self.toggles,
                "mDice_mean": self.mean, "mDice_sd": self.sd,
                "mIoU_mean": float(np.mean(self.miou)),
                "mIoU_sd": float(np.std(self.miou, ddof=1)) if len(self.miou) > 1 else 0.0,
                "mDice": self.mdice, "mIoU": self.miou, "val_best_mDice": self.val_mdice}


def pooled_sd(a: RowResult, b: RowResult) -> float:
    return float(np.sqrt((a.sd ** 2 + b.sd ** 2) / 2.0))


def core_rows(base: ExperimentConfig) -> list[tuple[str, str, ExperimentConfig]]:
    return [(r, ROW_LABELS[r], base.with_row(r)) for r in ROWS]


def date_rows(base: ExperimentConfig) -> list[tuple[str, str, ExperimentConfig]]:
    full = base.with_row("a")
    return [(v, lbl, replace(full, model=replace(full.model, date_variant=v))) for v, lbl in DATE_LABELS.items()]


def vlcm_rows(base: ExperimentConfig) -> list[tuple[str, str, ExperimentConfig]]:
    full = base.with_row("a")
    return [(v, lbl, replace(full, model=replace(full.model, vlcm_variant=v))) for v, lbl in VLCM_LABELS.items()]


def _toggles(cfg: ExperimentConfig) -> dict:
    m = cfg.model
    return {"sse": m.sse, "date": m.effective_date, "vlcm": m.effective_vlcm}


def run_rows(rows: Sequence[tuple[str, str, ExperimentConfig]], seeds: Sequence[int], out_dir: Path,
             encoders: FrozenEncoders, caches: tuple[FeatureCache, FeatureCache],
             test_cache: FeatureCache) -> list[RowResult]:
    """Train every row for every seed and score its best-val checkpoint on the test split."""
    results = []
    for row, label, cfg in rows:
        res = RowResult(row, label, _toggles(cfg))
        for seed in seeds:
            run_cfg = replace(cfg, train=replace(cfg.train, seed=int(seed)))
            run_dir = out_dir / row / f"seed{seed}"
            r = train(run_cfg, run_dir, encoders=encoders, caches=caches)
            model = load_model(run_cfg, run_dir / "best.tgcl", encoders)
            rep, _ = evaluate(model, test_cache)
            res.mdice.append(rep.mdice)
            res.miou.append(rep.miou)
            res.val_mdice.append(r.best_mdice)
            log.info("row %s seed %d test mDice %.4f", row, seed, rep.mdice)
        results.append(res)
    return results


def format_table(title: str, rows: Sequence[RowResult], with_toggles: bool = True) -> str:
    """Aligned text table, one line per row, mean +- sd over seeds (percent)."""
    head = ["Row", "Configuration"] + (["SSE", "DATE", "VLCM"] if with_toggles else []) + ["mDice (%)", "mIoU (%)"]
    body = []
    for r in rows:
        cells = [r.row, r.label]
        if with_toggles:
            mark = {True: "x", False: "-"}
            cells += [mark[r.toggles["sse"]], mark[r.toggles["date"] != "main_only"],
                      mark[r.toggles["vlcm"] != "none"]]
        d = r.to_dict()
        cells += [f"{100 * d['mDice_mean']:.2f} +- {100 * d['mDice_sd']:.2f}",
                  f"{100 * d['mIoU_mean']:.2f} +- {100 * d['mIoU_sd']:.2f}"]
        body.append(cells)
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    rule = "-" * len(fmt(head))
    return "\n".join([title, rule, fmt(head), rule] + [fmt(c) for c in body] + [rule])


def ablate(base: ExperimentConfig, out_dir: str | Path, seeds: Sequence[int] = (0, 1, 2), full: bool = False,
           encoders: FrozenEncoders | None = None) -> dict:
    """Run the core five-row study (plus the variant sweeps when ``full``).

    Writes ``ablation.json`` and ``ablation.txt`` under ``out_dir`` and returns
    the JSON payload.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    enc = encoders if encoders is not None else build_encoders(base)
    caches = load_split_caches(base, enc)
    test_cache = FeatureCache(enc, list(load_dataset(base.data.path, "test")))
    tables = {"core": run_rows(core_rows(base), seeds, out / "core", enc, caches, test_cache)}
    texts = [format_table("Core components (test split)", tables["core"])]
    if full:
        tables["date"] = run_rows(date_rows(base), seeds, out / "date", enc, caches, test_cache)
        tables["vlcm"] = run_rows(vlcm_rows(base), seeds, out / "vlcm", enc, caches, test_cache)
        texts.append(format_table("Text encoding variants (test split)", tables["date"], with_toggles=False))
        texts.append(format_table("Alignment variants (test split)", tables["vlcm"], with_toggles=False))
    payload = {"seeds": [int(s) for s in seeds], "steps": base.train.steps,
               "tables": {k: [r.to_dict() for r in v] for k, v in tables.items()}}
    (out / "ablation.json").write_text(json.dumps(payload, indent=1))
    (out / "ablation.txt").write_text("\n\n".join(texts) + "\n")
    return payload


def rows_from_payload(payload: dict, table: str = "core") -> list[RowResult]:
    out = []
    for d in payload["tables"][table]:
        out.append(RowResult(d["row"], d["label"], d["toggles"], list(d["mDice"]), list(d["mIoU"]),
                             list(d["val_best_mDice"])))
    return out
