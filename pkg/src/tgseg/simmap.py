"""Pixel-text similarity heatmaps from the cost volume.

Two variants per sample: ``frozen`` compares the raw frozen ViT patch tokens
with the raw frozen text tokens, ``adapters`` uses the cost volume the trained
model feeds its decoder. Both are averaged over non-PAD tokens, upsampled to
image size and min-max normalized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .data import SampleRecord, write_pgm
from .decoder import cost_volume
from .model import Batch, SegModel, encode_frozen

VARIANTS = ("frozen", "adapters")
ZERO_RANGE_LEVEL = 128


def heatmap_from_cost(cost: np.ndarray, valid: np.ndarray, grid: tuple[int, int],
                      out_size: tuple[int, int]) -> np.ndarray:
    """``[N, L]`` cost and ``[L]`` mask -> ``[H, W]`` float map (not normalized)."""
    valid = np.asarray(valid, dtype=bool)
    mean = cost[:, valid].astype(np.float64).mean(axis=1).reshape(grid)
    return ops.upsample_bilinear(Tensor(mean, dtype=np.float64), out_size).data


def normalize_heatmap(m: np.ndarray) -> np.ndarray:
    """Min-max scale to uint8; a map with zero range becomes a constant 128."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0.0:
        return np.full(m.shape, ZERO_RANGE_LEVEL, np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def contrast(heat: np.ndarray, mask: np.ndarray) -> float:
    """Mean heatmap value inside the mask minus the mean outside it."""
    m = np.asarray(mask, dtype=bool)
    if not m.any() or m.all():
        raise ValueError("contrast needs a mask with both foreground and background")
    h = np.asarray(heat, dtype=np.float64)
    return float(h[m].mean() - h[~m].mean())


def similarity_maps(model: SegModel, records: Sequence[SampleRecord]) -> dict[str, np.ndarray]:
    """``{variant: [n, H, W] uint8}`` for a list of records."""
    images = np.stack([r.image for r in records]).astype(np.float32)
    ids = [np.stack([getattr(r.prompts, f) for r in records]) for f in ("primary_ids", "auxiliary_ids")]
    concat = np.stack([r.prompts.concatenated_ids() for r in records])
    f_clip, text = encode_frozen(model.frozen, images, ids[0], ids[1], concat)
    size = images.shape[-2:]
    vit = model.frozen.vit.cfg
    grid = (vit.image_size // vit.patch_size,) * 2
    with no_grad():
        raw = cost_volume(Tensor(f_clip), Tensor(text.primary), text.primary_valid).data
        model(Batch(images, f_clip, text))
    tuned = model.train.dec.last_cost
    _, t_valid = model.text_path(text)
    out = {"frozen": [], "adapters": []}
    for i in range(len(records)):
        out["frozen"].append(normalize_heatmap(heatmap_from_cost(raw[i], text.primary_valid[i], grid, size)))
        out["adapters"].append(normalize_heatmap(heatmap_from_cost(tuned[i], t_valid[i], grid, size)))
    return {k: np.stack(v) for k, v in out.items()}


@dataclass
class SimmapSummary:
    margins: dict[str, list[float]]

    def fraction_positive(self, variant: str) -> float:
        m = self.margins[variant]
        return float(np.mean([x > 0 for x in m])) if m else 0.0

    def to_dict(self) -> dict:
        return {v: {"mean_margin": float(np.mean(m)) if m else 0.0, "fraction_positive": self.fraction_positive(v),
                    "n": len(m), "margins": [round(x, 6) for x in m]} for v, m in self.margins.items()}


def export_similarity_maps(model: SegModel, records: Sequence[SampleRecord], out_dir: str | Path,
                           chunk: int = 16) -> SimmapSummary:
    """Write ``<variant>/<seed>.pgm`` for every record plus ``simmap.json``.

    Margins (in-mask minus out-of-mask mean, on the 0..1 scale) are collected
    for records whose mask has both foreground and background.
    """
    out = Path(out_dir)
    for v in VARIANTS:
        (out / v).mkdir(parents=True, exist_ok=True)
    margins: dict[str, list[float]] = {v: [] for v in VARIANTS}
    names = []
    for s in range(0, len(records), chunk):
        recs = list(records[s:s + chunk])
        maps = similarity_maps(model, recs)
        for j, rec in enumerate(recs):
            name = f"{s + j:04d}_{rec.seed}"
            names.append(name)
            for v in VARIANTS:
                write_pgm(out / v / f"{name}.pgm", maps[v][j])
                if rec.mask.any() and not rec.mask.all():
                    margins[v].append(contrast(maps[v][j] / 255.0, rec.mask))
    summary = SimmapSummary(margins)
    (out / "simmap.json").write_text(json.dumps({"samples": names, **summary.to_dict()}, indent=1))
    return summary
