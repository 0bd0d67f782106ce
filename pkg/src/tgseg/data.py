"""Synthetic referring-segmentation benchmark: thorax-like images, masks, prompts.

Each image shows two bright elliptical lobes; 0-3 soft blob lesions sit in
distinct zones (lobe halves). When lesions appear on both sides the prompt may
refer to only one side, and the mask then holds only the referred lesions, so
the text decides which blobs are foreground.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from . import grammar
from .text import PromptPair

log = logging.getLogger(__name__)

IMAGE_SIZE = 256
RADIUS_RANGE = (8.0, 32.0)
MANIFEST_VERSION = 1
REFER_MODES = ("all", "left", "right")


class CorruptRecordError(ValueError):
    """A dataset file is missing, truncated, or fails its checksum/shape check."""


@dataclass
class SampleRecord:
    image: np.ndarray          # [1, H, W] float32 in [0, 1], multiples of 1/255
    mask: np.ndarray           # [H, W] uint8 in {0, 1}
    prompts: PromptPair
    zones: tuple[str, ...]     # referred zones (exactly the mask's components)
    seed: int
    image_zones: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def prompts_json(self) -> dict:
        return {"primary": self.prompts.primary, "auxiliary": self.prompts.auxiliary,
                "zones": list(self.zones), "seed": int(self.seed),
                "image_zones": list(self.image_zones), "meta": self.meta}


# ---------------------------------------------------------------------------
# rendering


def _lobes(rng: np.random.Generator, size: int) -> list[dict]:
    lobes = []
    for side, cx in (("left", 0.30), ("right", 0.70)):
        lobes.append({
            "side": side,
            "cx": float(size * cx + rng.uniform(-4, 4)),
            "cy": float(size * 0.52 + rng.uniform(-4, 4)),
            "ax": float(size * 0.17 * rng.uniform(0.95, 1.05)),
            "ay": float(size * 0.36 * rng.uniform(0.95, 1.05)),
        })
    return lobes


def _ellipse_level(lobe: dict, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    return ((xx - lobe["cx"]) / lobe["ax"]) ** 2 + ((yy - lobe["cy"]) / lobe["ay"]) ** 2


def zone_region(lobe: dict, level: str, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    inside = _ellipse_level(lobe, yy, xx) <= 1.0
    half = yy < lobe["cy"] if level == "upper" else yy >= lobe["cy"]
    return inside & half


def _smooth_noise(rng: np.random.Generator, size: int, grid: int = 8) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, (grid, grid))
    return ndimage.zoom(coarse, size / grid, order=1, mode="nearest")


def _place_lesion(rng: np.random.Generator, region: np.ndarray, yy, xx) -> tuple[float, float, float]:
    ys, xs = np.nonzero(region)
    # 1px erosion keeps disks in adjacent zones from touching.
    interior = ndimage.binary_erosion(region, iterations=2)
    r_hi = RADIUS_RANGE[1]
    for attempt in range(400):
        if attempt and attempt % 50 == 0:
            r_hi = max(RADIUS_RANGE[0], r_hi * 0.8)
        r = float(rng.uniform(RADIUS_RANGE[0], r_hi))
        j = int(rng.integers(len(ys)))
        cy, cx = float(ys[j]) + 0.5, float(xs[j]) + 0.5
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        if not (disk & ~interior).any():
            return cx, cy, r
    raise RuntimeError("could not place lesion")  # pragma: no cover


def generate_sample(seed: int, size: int = IMAGE_SIZE) -> SampleRecord:
    """Render one sample; everything is a pure function of ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    lobes = _lobes(rng, size)

    img = np.full((size, size), 0.08)
    for lobe in lobes:
        lvl = _ellipse_level(lobe, yy, xx)
        img += 0.45 / (1.0 + np.exp((np.sqrt(lvl) - 1.0) * 40.0))
    img += 0.04 * _smooth_noise(rng, size)

    n_lesions = int(rng.integers(0, 4))
    zones = sorted(rng.choice(len(grammar.ZONES), size=n_lesions, replace=False).tolist())
    image_zones = tuple(grammar.ZONES[z] for z in zones)
    sides = {z.split("-")[0] for z in image_zones}
    mode = REFER_MODES[int(rng.integers(3))] if len(sides) == 2 else "all"

    mask = np.zeros((size, size), dtype=bool)
    lesions = []
    by_side = {lb["side"]: lb for lb in lobes}
    for zone in image_zones:
        side, level = zone.split("-")
        region = zone_region(by_side[side], level, yy, xx)
        cx, cy, r = _place_lesion(rng, region, yy, xx)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        profile = 1.0 / (1.0 + np.exp((dist - r) / 2.0))
        img += float(rng.uniform(0.25, 0.35)) * profile
        referred = mode == "all" or side == mode
        if referred:
            mask |= profile >= 0.5
        lesions.append({"zone": zone, "cx": cx, "cy": cy, "r": r, "referred": referred})

    img += rng.normal(0.0, 0.02, img.shape)
    img_u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    referred_zones = tuple(z["zone"] for z in lesions if z["referred"])
    prompts = PromptPair.from_text(grammar.primary_prompt(referred_zones),
                                   grammar.generate_auxiliary(referred_zones))
    meta = {"mode": mode, "lobes": lobes, "lesions": lesions}
    return SampleRecord(
        image=(img_u8.astype(np.float32) / np.float32(255.0))[None],
        mask=mask.astype(np.uint8),
        prompts=prompts,
        zones=referred_zones,
        seed=int(seed),
        image_zones=image_zones,
        meta=meta,
    )


def lobe_support(record: SampleRecord) -> np.ndarray:
    size = record.mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    out = np.zeros_like(record.mask, dtype=bool)
    for lobe in record.meta["lobes"]:
        out |= _ellipse_level(lobe, yy, xx) <= 1.0
    return out


def mask_zones(mask: np.ndarray, lobes: list[dict]) -> set[str]:
    """Zones of the mask's connected components, from each component's centroid."""
    labels, n = ndimage.label(mask)
    if n == 0:
        return set()
    centroids = ndimage.center_of_mass(mask, labels, range(1, n + 1))
    size = mask.shape[1]
    by_side = {lb["side"]: lb for lb in lobes}
    out = set()
    for cy, cx in centroids:
        side = "left" if cx + 0.5 < size / 2 else "right"
        level = "upper" if cy + 0.5 < by_side[side]["cy"] else "lower"
        out.add(f"{side}-{level}")
    return out


def with_prompt(record: SampleRecord, zones: tuple[str, ...]) -> SampleRecord:
    """Same image, referred to a different zone set; the mask follows the referral."""
    size = record.mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = np.zeros((size, size), dtype=bool)
    kept = []
    for les in record.meta["lesions"]:
        if les["zone"] in zones:
            dist = np.sqrt((yy - les["cy"]) ** 2 + (xx - les["cx"]) ** 2)
            mask |= 1.0 / (1.0 + np.exp((dist - les["r"]) / 2.0)) >= 0.5
            kept.append(les["zone"])
    kept_t = tuple(z for z in grammar.ZONES if z in kept)
    prompts = PromptPair.from_text(grammar.primary_prompt(kept_t), grammar.generate_auxiliary(kept_t),
                                   len(record.prompts.primary_ids))
    return SampleRecord(record.image, mask.astype(np.uint8), prompts, kept_t, record.seed,
                        record.image_zones, record.meta)


# ---------------------------------------------------------------------------
# PGM I/O


def write_pgm(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptRecordError(f"{path}: truncated PGM header")
        parts.append(blob[start:pos])
    pos += 1
    if parts[0] != b"P5":
        raise CorruptRecordError(f"{path}: not a binary PGM")
    w, h, maxval = (int(p) for p in parts[1:])
    if maxval != 255:
        raise CorruptRecordError(f"{path}: unsupported maxval {maxval}")
    data = blob[pos:]
    if len(data) != w * h:
        raise CorruptRecordError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# datasets


def sample_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1, np.uint64)[0])


def split_sizes(n: int) -> tuple[int, int, int]:
    if n < 3:
        raise ValueError(f"need at least 3 samples for a train/val/test split, got {n}")
    n_val = max(1, round(0.15 * n))
    n_test = max(1, round(0.15 * n))
    return n - n_val - n_test, n_val, n_test


def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetManifest:
    version: int
    count: int
    seed: int
    image_size: int
    splits: dict[str, list[int]]
    records: list[dict]
    path: Path | None = None

    def to_json(self) -> dict:
        return {"version": self.version, "count": self.count, "seed": self.seed,
                "image_size": self.image_size,
                "splits": self.splits, "records": self.records}

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        m = cls(raw["version"], raw["count"], raw["seed"], raw["image_size"], raw["splits"], raw["records"], path)
        if m.version != MANIFEST_VERSION:
            raise CorruptRecordError(f"{path}: unsupported manifest version {m.version}")
        ids = [i for ids in m.splits.values() for i in ids]
        if len(ids) != len(set(ids)) or len(m.records) != m.count:
            raise CorruptRecordError(f"{path}: inconsistent split/record counts")
        return m

    def split_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}


def generate_dataset(n: int, seed: int, out_dir: str | Path, size: int = IMAGE_SIZE) -> DatasetManifest:
    out = Path(out_dir)
    n_train, n_val, n_test = split_sizes(n)
    for sub in ("images", "masks", "prompts"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        rec = generate_sample(sample_seed(seed, i), size)
        stem = f"{i:05d}"
        img_p = Path("images") / f"{stem}.pgm"
        msk_p = Path("masks") / f"{stem}.pgm"
        pr_p = Path("prompts") / f"{stem}.json"
        write_pgm(out / img_p, np.rint(rec.image[0] * 255).astype(np.uint8))
        write_pgm(out / msk_p, rec.mask * 255)
        (out / pr_p).write_text(json.dumps(rec.prompts_json(), sort_keys=True))
        records.append({"id": i, "image": str(img_p), "mask": str(msk_p), "prompts": str(pr_p),
                        "sha256": {"image": _sha(out / img_p), "mask": _sha(out / msk_p),
                                   "prompts": _sha(out / pr_p)}})
        if (i + 1) % 200 == 0:
            log.info("generated %d/%d samples", i + 1, n)
    splits = {"train": list(range(n_train)),
              "val": list(range(n_train, n_train + n_val)),
              "test": list(range(n_train + n_val, n))}
    manifest = DatasetManifest(MANIFEST_VERSION, n, int(seed), size, splits, records, out / "manifest.json")
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1))
    return manifest


def _load_record(root: Path, entry: dict, size: int, context_length: int) -> SampleRecord:
    for key in ("image", "mask", "prompts"):
        p = root / entry[key]
        if not p.exists():
            raise CorruptRecordError(f"{p}: missing file")
        if _sha(p) != entry["sha256"][key]:
            raise CorruptRecordError(f"{p}: checksum mismatch")
    img = read_pgm(root / entry["image"])
    msk = read_pgm(root / entry["mask"])
    for name, arr in (("image", img), ("mask", msk)):
        if arr.shape != (size, size):
            raise CorruptRecordError(f"{root / entry[name]}: shape {arr.shape} != {(size, size)}")
    if not np.isin(msk, (0, 255)).all():
        raise CorruptRecordError(f"{root / entry['mask']}: mask is not binary")
    pj = json.loads((root / entry["prompts"]).read_text())
    prompts = PromptPair.from_text(pj["primary"], pj["auxiliary"], context_length)
    return SampleRecord(
        image=(img.astype(np.float32) / np.float32(255.0))[None],
        mask=(msk // 255).astype(np.uint8),
        prompts=prompts,
        zones=tuple(pj["zones"]),
        seed=int(pj["seed"]),
        image_zones=tuple(pj.get("image_zones", ())),
        meta=pj.get("meta", {}),
    )


def load_dataset(manifest_path: str | Path, split: str | None = None,
                 context_length: int = 32) -> Iterator[SampleRecord]:
    """Yield records in manifest order, optionally restricted to one split."""
    m = DatasetManifest.read(manifest_path)
    root = Path(manifest_path).parent
    wanted = None if split is None else set(m.splits[split])
    for entry in m.records:
        if wanted is not None and entry["id"] not in wanted:
            continue
        yield _load_record(root, entry, m.image_size, context_length)
