"""Closed template grammar for primary and auxiliary prompts.

A placement is a set of zones drawn from ``{left, right} x {upper, lower}``.
The primary prompt is terse and report-like; the auxiliary prompt paraphrases
the same placement in radiograph vocabulary. Both are pure functions of the
zone set.
"""

from __future__ import annotations

import itertools
from typing import Iterable

SIDES = ("left", "right")
LEVELS = ("upper", "lower")
ZONES = tuple(f"{s}-{lv}" for s in SIDES for lv in LEVELS)
COUNT_WORDS = {1: "one", 2: "two", 3: "three", 4: "four"}

HEALTHY_PRIMARY = "No pulmonary infection, left and right lung clear."
HEALTHY_AUXILIARY = "Clear chest radiograph, no opacity in left or right fields."

_AUX_LEAD = {1: "CXR with focal opacity in", 2: "CXR with opacities in", 3: "CXR with multifocal opacities in",
             4: "CXR with diffuse opacities in"}


def _normalize(zones: Iterable[str]) -> list[str]:
    zs = set(zones)
    unknown = zs - set(ZONES)
    if unknown:
        raise ValueError(f"unknown zones {sorted(unknown)}")
    return [z for z in ZONES if z in zs]


def _by_side(zones: list[str]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for z in zones:
        side, level = z.split("-")
        out.setdefault(side, []).append(level)
    return out


def primary_prompt(zones: Iterable[str]) -> str:
    zs = _normalize(zones)
    if not zs:
        return HEALTHY_PRIMARY
    sides = _by_side(zs)
    lateral = "Bilateral" if len(sides) == 2 else "Unilateral"
    n = len(zs)
    count = f"{COUNT_WORDS[n]} infected area" + ("s" if n > 1 else "")
    parts = []
    for side, levels in sides.items():
        parts.append(f"all {side} lung" if len(levels) == 2 else f"{levels[0]} {side} lung")
    return f"{lateral} pulmonary infection, {count}, {' and '.join(parts)}."


def generate_auxiliary(zones: Iterable[str]) -> str:
    """Radiograph-style paraphrase of a placement (stand-in for an LLM rewrite)."""
    zs = _normalize(zones)
    if not zs:
        return HEALTHY_AUXILIARY
    parts = []
    for side, levels in _by_side(zs).items():
        parts.append(f"{side} fields" if len(levels) == 2 else f"{side} {levels[0]} zone")
    return f"{_AUX_LEAD[len(zs)]} {' and '.join(parts)}."


def parse_primary(text: str) -> set[str]:
    """Recover the zone set from a primary prompt produced by :func:`primary_prompt`."""
    if text == HEALTHY_PRIMARY:
        return set()
    tail = text.rstrip(".").split(", ")[-1]
    zones: set[str] = set()
    for phrase in tail.split(" and "):
        words = phrase.split()
        if words[0] == "all":
            zones.update(f"{words[1]}-{lv}" for lv in LEVELS)
        else:
            zones.add(f"{words[1]}-{words[0]}")
    return zones


def all_placements() -> list[tuple[str, ...]]:
    return [combo for r in range(len(ZONES) + 1) for combo in itertools.combinations(ZONES, r)]


def all_sentences() -> list[str]:
    out = []
    for combo in all_placements():
        out.append(primary_prompt(combo))
        out.append(generate_auxiliary(combo))
    return out
