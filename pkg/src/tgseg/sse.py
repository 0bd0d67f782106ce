"""Semantic-structural encoder: ViT/CNN fusion, hybrid pyramid, deformable refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .autodiff.nn import LayerNorm, Linear, Module, Parameter
from .encoders import CnnConfig, CnnPyramid


class AlignmentError(ShapeError):
    """ViT token count does not match the 1/32 CNN grid."""


@dataclass
class SseConfig:
    fusion_dim: int = 128
    heads: int = 4
    points: int = 4
    levels: int = 3
    layers: int = 2

    def __post_init__(self):
        if self.fusion_dim % self.heads:
            raise ValueError("fusion_dim must be divisible by heads")


@dataclass
class FeaturePyramid:
    """Visual maps ``[b, c, h, w]`` at 1/8, 1/16 and 1/32 of the input."""

    f8: Tensor
    f16: Tensor
    f32: Tensor

    def levels(self) -> list[Tensor]:
        return [self.f8, self.f16, self.f32]


def to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (b, c, h * w)), (0, 2, 1))


def to_map(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1)), (b, c, h, w))


def project_and_fuse(f_clip: Tensor, f_cnn32: Tensor, p_v: Linear, p_c: Linear, ln: LayerNorm) -> Tensor:
    """LayerNorm(P_V(F_clip) + P_C(F_cnn)) over channels, returned as ``[b, d_f, g, g]``."""
    b, n_v, _ = f_clip.shape
    _, _, gh, gw = f_cnn32.shape
    if n_v != gh * gw:
        raise AlignmentError(f"ViT has {n_v} tokens but the 1/32 CNN grid is {gh}x{gw}")
    fused = ln(ops.add(p_v(f_clip), p_c(to_tokens(f_cnn32))))
    return to_map(fused, gh, gw)


def reference_points(shapes: list[tuple[int, int]]) -> np.ndarray:
    """Own normalized ``(x, y)`` position of every pyramid node, levels concatenated."""
    pts = []
    for h, w in shapes:
        ys = np.arange(h) / max(h - 1, 1)
        xs = np.arange(w) / max(w - 1, 1)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        pts.append(np.stack([gx.ravel(), gy.ravel()], axis=1))
    return np.concatenate(pts).astype(np.float32)


class MSDeformAttnLayer(Module):
    def __init__(self, cfg: SseConfig, rng: np.random.Generator):
        d, m, lv, k = cfg.fusion_dim, cfg.heads, cfg.levels, cfg.points
        self.cfg = cfg
        self.offsets = Linear(d, m * lv * k * 2, rng, zero=True)
        # Each head fans its points out along its own direction, one cell apart.
        theta = 2 * math.pi * np.arange(m) / m
        dirs = np.stack([np.cos(theta), np.sin(theta)], -1)
        dirs = dirs / np.abs(dirs).max(-1, keepdims=True)
        grid = np.tile(dirs[:, None, None, :], (1, lv, k, 1)) * (np.arange(k) + 1)[None, None, :, None]
        self.offsets.bias = Parameter(grid.reshape(-1))
        self.weights = Linear(d, m * lv * k, rng, zero=True)
        self.out = Linear(d, d, rng)
        self.ln = LayerNorm(d)
        self.last_weights: np.ndarray | None = None
        self.last_locations: np.ndarray | None = None

    def core(self, query: Tensor, value: Tensor, shapes: list[tuple[int, int]]) -> Tensor:
        """Deformable sampling before the output projection: ``[b, Q, d]``."""
        cfg = self.cfg
        b, q, d = query.shape
        m, lv, k = cfg.heads, cfg.levels, cfg.points
        dh = d // m
        if len(shapes) != lv:
            raise ShapeError(f"layer built for {lv} levels, got {len(shapes)}")
        if value.shape != (b, q, d):
            raise ShapeError(f"value {value.shape} vs query {query.shape}")
        v = ops.reshape(ops.transpose(ops.reshape(value, (b, q, m, dh)), (0, 2, 1, 3)), (b * m, q, dh))
        off = ops.reshape(self.offsets(query), (b, q, m, lv, k, 2))
        off = ops.reshape(ops.transpose(off, (0, 2, 1, 3, 4, 5)), (b * m, q, lv, k, 2))
        inv = np.array([[1.0 / w, 1.0 / h] for h, w in shapes], dtype=query.dtype).reshape(1, 1, lv, 1, 2)
        ref = reference_points(shapes).astype(query.dtype).reshape(1, q, 1, 1, 2)
        loc = ops.add(ops.mul(off, Tensor(inv)), Tensor(ref))
        logits = ops.reshape(self.weights(query), (b, q, m, lv * k))
        attn = ops.softmax(logits, axis=-1)
        self.last_weights = attn.data.reshape(b, q, m, lv, k)
        attn = ops.reshape(ops.transpose(ops.reshape(attn, (b, q, m, lv, k)), (0, 2, 1, 3, 4)), (b * m, q, lv, k))
        self.last_locations = np.clip(loc.data, 0.0, 1.0)
        s = ops.multilevel_sample(v, shapes, loc, attn)
        return ops.reshape(ops.transpose(ops.reshape(s, (b, m, q, dh)), (0, 2, 1, 3)), (b, q, d))

    def __call__(self, x: Tensor, query: Tensor, value: Tensor, shapes) -> Tensor:
        return self.ln(ops.add(x, self.out(self.core(query, value, shapes))))


class MSDeformAttn(Module):
    """Stack of deformable layers refining all pyramid levels jointly.

    Per-level value projections are shared by every layer.
    """

    def __init__(self, cfg: SseConfig, rng: np.random.Generator):
        d = cfg.fusion_dim
        self.cfg = cfg
        self.level_embed = Parameter(rng.normal(0, 0.1, (cfg.levels, d)))
        self.values = [Linear(d, d, rng) for _ in range(cfg.levels)]
        self.layers = [MSDeformAttnLayer(cfg, rng) for _ in range(cfg.layers)]

    def __call__(self, levels: list[Tensor]) -> list[Tensor]:
        shapes = [tuple(t.shape[-2:]) for t in levels]
        sizes = [h * w for h, w in shapes]
        x = ops.concat([to_tokens(t) for t in levels], axis=1)
        lvl_ids = np.repeat(np.arange(len(levels)), sizes)
        pos = ops.index(self.level_embed, lvl_ids)
        bounds = np.cumsum([0] + sizes)
        for layer in self.layers:
            value = ops.concat([self.values[i](x[:, bounds[i]:bounds[i + 1]]) for i in range(len(levels))], axis=1)
            x = layer(x, ops.add(x, pos), value, shapes)
        return [to_map(x[:, bounds[i]:bounds[i + 1]], *shapes[i]) for i in range(len(levels))]


class SSE(Module):
    """Fuses frozen ViT tokens with the CNN pyramid.

    With ``enabled=False`` only ``p_v`` exists: the projected ViT tokens become
    the 1/32 output and the raw CNN maps pass through as skips.
    """

    def __init__(self, vit_dim: int, cnn: CnnConfig, cfg: SseConfig, rng: np.random.Generator,
                 enabled: bool = True):
        d = cfg.fusion_dim
        if cfg.levels != 3:
            raise ValueError("the hybrid pyramid has exactly 3 levels")
        self.cfg = cfg
        self.enabled = enabled
        self.p_v = Linear(vit_dim, d, rng)
        if enabled:
            self.p_c = Linear(cnn.c32, d, rng)
            self.fuse_ln = LayerNorm(d)
            self.proj8 = Linear(cnn.c8, d, rng)
            self.proj16 = Linear(cnn.c16, d, rng)
            self.msda = MSDeformAttn(cfg, rng)

    def hybrid_pyramid(self, f_clip: Tensor, pyr: CnnPyramid) -> list[Tensor]:
        fused = project_and_fuse(f_clip, pyr.f32s, self.p_v, self.p_c, self.fuse_ln)
        f8 = to_map(self.proj8(to_tokens(pyr.f8)), *pyr.f8.shape[-2:])
        f16 = to_map(self.proj16(to_tokens(pyr.f16)), *pyr.f16.shape[-2:])
        return [f8, f16, fused]

    def __call__(self, f_clip: Tensor, pyr: CnnPyramid) -> FeaturePyramid:
        if not self.enabled:
            gh, gw = pyr.f32s.shape[-2:]
            if f_clip.shape[1] != gh * gw:
                raise AlignmentError(f"ViT has {f_clip.shape[1]} tokens but the 1/32 CNN grid is {gh}x{gw}")
            return FeaturePyramid(pyr.f8, pyr.f16, to_map(self.p_v(f_clip), gh, gw))
        return FeaturePyramid(*self.msda(self.hybrid_pyramid(f_clip, pyr)))
