"""The full segmentation network and its parameter accounting.

Parameter names are rooted at ``frozen.vit``, ``frozen.txt`` (the two frozen
encoders) and ``train.<module>`` for everything optimized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .autodiff.nn import Linear, Module
from .config import ModelConfig
from .date import DATE
from .decoder import CostDecoder, DecoderConfig
from .encoders import CnnConfig, CnnEncoder, FrozenEncoders
from .sse import SSE, SseConfig, to_tokens
from .vlcm import VLCM

FROZEN_PREFIXES = ("frozen.vit.", "frozen.txt.")
TRAIN_MODULES = ("cnn", "sse", "date", "vlcm", "text_proj", "dec")


class AccountingError(RuntimeError):
    pass


@dataclass
class TextFeatures:
    """Frozen text-encoder outputs for one batch."""

    primary: np.ndarray        # [b, L, D_t]
    auxiliary: np.ndarray
    concat: np.ndarray
    primary_valid: np.ndarray  # [b, L] bool
    auxiliary_valid: np.ndarray
    concat_valid: np.ndarray


@dataclass
class Batch:
    images: np.ndarray      # [b, 1, H, W]
    f_clip: np.ndarray      # [b, N_v, D_v]
    text: TextFeatures


def encode_frozen(enc: FrozenEncoders, images: np.ndarray, primary_ids: np.ndarray,
                  auxiliary_ids: np.ndarray, concat_ids: np.ndarray) -> tuple[np.ndarray, TextFeatures]:
    """Run both frozen encoders once; results can be cached per sample."""
    with no_grad():
        f_clip = enc.vit(images).data
        outs = [enc.txt(ids) for ids in (primary_ids, auxiliary_ids, concat_ids)]
    return f_clip, TextFeatures(*(o[0].data for o in outs), *(o[1] for o in outs))


class Trainable(Module):
    def __init__(self, cfg: ModelConfig, vit_dim: int, txt_dim: int, rng: np.random.Generator):
        d = cfg.fusion_dim
        cnn_cfg = CnnConfig(c32=d)
        sse_cfg = SseConfig(fusion_dim=d, heads=cfg.msda_heads, points=cfg.msda_points, layers=cfg.msda_layers)
        self.cnn = CnnEncoder(cnn_cfg, rng)
        self.sse = SSE(vit_dim, cnn_cfg, sse_cfg, rng, enabled=cfg.sse)
        if cfg.effective_date == "inject":
            self.date = DATE(txt_dim, cfg.date_heads, rng)
        self.vlcm = VLCM(d, cfg.vlcm_heads, rng, variant=cfg.effective_vlcm)
        self.text_proj = Linear(txt_dim, d, rng)
        skip16, skip8 = (d, d) if cfg.sse else (cnn_cfg.c16, cnn_cfg.c8)
        dec_cfg = DecoderConfig(agg_dim=cfg.agg_dim, blocks=cfg.agg_blocks, cost_prior=cfg.cost_prior)
        self.dec = CostDecoder(d, skip16, skip8, dec_cfg, rng)


class SegModel(Module):
    def __init__(self, cfg: ModelConfig, encoders: FrozenEncoders, seed: int = 0):
        self.cfg = cfg
        self.frozen = encoders.freeze()
        rng = np.random.default_rng(seed)
        self.train = Trainable(cfg, encoders.vit.cfg.embed_dim, encoders.txt.cfg.embed_dim, rng)

    def text_path(self, t: TextFeatures) -> tuple[Tensor, np.ndarray]:
        v = self.cfg.effective_date
        if v == "main_only":
            return Tensor(t.primary), t.primary_valid
        if v == "aux_only":
            return Tensor(t.auxiliary), t.auxiliary_valid
        if v == "concat":
            return Tensor(t.concat), t.concat_valid
        return self.train.date(Tensor(t.primary), Tensor(t.auxiliary), t.primary_valid,
                               t.auxiliary_valid), t.primary_valid

    def forward(self, batch: Batch) -> Tensor:
        """``[b, 1, H, W]`` mask logits."""
        tr = self.train
        images = batch.images
        pyr = tr.cnn(images)
        feats = tr.sse(Tensor(batch.f_clip), pyr)
        grid = tuple(feats.f32.shape[-2:])
        f_t, t_valid = self.text_path(batch.text)
        f_t = tr.text_proj(f_t)
        f_v, f_t = tr.vlcm(to_tokens(feats.f32), f_t, t_valid)
        return tr.dec(f_v, f_t, t_valid, feats.f16, feats.f8, grid, images.shape[-2:])

    __call__ = forward

    def frozen_state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters() if k.startswith(FROZEN_PREFIXES)}

    def trainable_parameters(self):
        return [p for k, p in self.named_parameters() if k.startswith("train.")]


def _classify(name: str) -> str:
    for prefix in FROZEN_PREFIXES:
        if name.startswith(prefix):
            return prefix.rstrip(".")
    parts = name.split(".")
    if len(parts) > 2 and parts[0] == "train" and parts[1] in TRAIN_MODULES:
        return f"train.{parts[1]}"
    raise AccountingError(f"unclassified parameter {name!r}")


def count_params(model: Module) -> dict:
    """Trainable/frozen totals and a per-module breakdown.

    Raises :class:`AccountingError` for names outside the known prefixes or when
    the set of frozen tensors differs from the two encoders.
    """
    per: dict[str, int] = {}
    trainable = frozen = 0
    for name, p in model.named_parameters():
        group = _classify(name)
        per[group] = per.get(group, 0) + p.size
        is_frozen_name = group.startswith("frozen.")
        if is_frozen_name == p.requires_grad:
            state = "trainable" if p.requires_grad else "frozen"
            raise AccountingError(f"{name} is {state} but sits under {group}")
        if p.requires_grad:
            trainable += p.size
        else:
            frozen += p.size
    return {"trainable": int(trainable), "frozen": int(frozen), "total": int(trainable + frozen),
            "modules": {k: int(v) for k, v in sorted(per.items())}}


def logits_to_numpy(logits: Tensor) -> np.ndarray:
    return ops.reshape(logits, (logits.shape[0],) + logits.shape[2:]).data
