"""Prompt-swap probe: does the text decide which lesions are segmented?

For an image with lesions on both sides, the prompt is set to each side in
turn; the prediction should match that side's lesions better than the other
side's.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import SampleRecord, generate_sample, sample_seed, with_prompt
from .encoders import FrozenEncoders
from .metrics import compute_metrics
from .model import SegModel
from .train import FeatureCache, predict

SIDES = ("left", "right")


def is_bilateral(rec: SampleRecord) -> bool:
    return {z.split("-")[0] for z in rec.image_zones} == set(SIDES)


def held_out_bilateral(n: int, seed: int, start: int = 10**6) -> list[SampleRecord]:
    """``n`` freshly generated bilateral samples from indices no dataset uses."""
    out, i = [], start
    while len(out) < n:
        rec = generate_sample(sample_seed(seed, i))
        if is_bilateral(rec):
            out.append(rec)
        i += 1
    return out


@dataclass
class Trial:
    seed: int
    side: str
    dice_match: float
    dice_opposite: float

    @property
    def steered(self) -> bool:
        return self.dice_match > self.dice_opposite


def side_views(rec: SampleRecord) -> dict[str, SampleRecord]:
    return {s: with_prompt(rec, tuple(z for z in rec.image_zones if z.startswith(s))) for s in SIDES}


def referring_trials(model: SegModel, enc: FrozenEncoders, records: Iterable[SampleRecord]) -> list[Trial]:
    """One trial per (bilateral record, side)."""
    views: list[tuple[SampleRecord, SampleRecord, str, int]] = []
    for rec in records:
        if not is_bilateral(rec):
            continue
        v = side_views(rec)
        for s in SIDES:
            other = SIDES[1 - SIDES.index(s)]
            views.append((v[s], v[other], s, rec.seed))
    if not views:
        return []
    preds = predict(model, FeatureCache(enc, [v[0] for v in views]))
    return [Trial(seed, side, compute_metrics(p, match.mask)[0], compute_metrics(p, opp.mask)[0])
            for p, (match, opp, side, seed) in zip(preds, views)]


def steered_fraction(trials: Sequence[Trial]) -> float:
    return float(np.mean([t.steered for t in trials])) if trials else 0.0
