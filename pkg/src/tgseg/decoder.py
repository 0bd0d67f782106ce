"""Pixel-text cost volume, spatial/token aggregation and the upsampling decoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .autodiff.nn import Conv2d, LayerNorm, Linear, Module, MultiheadAttention

log = logging.getLogger(__name__)

NORM_EPS = 1e-8
DICE_EPS = 1e-6


@dataclass
class DecoderConfig:
    agg_dim: int = 64
    guidance_dim: int = 32
    blocks: int = 2
    heads: int = 4
    skip_dim: int = 32
    dec_dims: tuple[int, int] = (64, 32)
    # weight of the token-mean cost map added to the output logits; 0 disables
    cost_prior: float = 10.0


def cost_volume(f_v: Tensor, f_t: Tensor, t_valid: np.ndarray) -> Tensor:
    """Cosine similarity ``[b, N, L]`` between visual and text tokens; PAD columns are 0."""
    if f_v.ndim != 3 or f_t.ndim != 3 or f_v.shape[-1] != f_t.shape[-1] or f_v.shape[0] != f_t.shape[0]:
        raise ShapeError(f"cost volume needs [b,N,d] and [b,L,d], got {f_v.shape} and {f_t.shape}")
    for name, t in (("visual", f_v), ("text", f_t)):
        if (np.linalg.norm(t.data, axis=-1) < NORM_EPS).any():
            log.warning("zero-norm %s feature in cost volume; epsilon floor applied", name)
    vn = ops.normalize(f_v, axis=-1, eps=NORM_EPS)
    tn = ops.normalize(f_t, axis=-1, eps=NORM_EPS)
    c = ops.clip(ops.matmul(vn, ops.transpose(tn, (0, 2, 1))), -1.0, 1.0)
    mask = np.asarray(t_valid, dtype=f_v.dtype)[:, None, :]
    return ops.mul(c, Tensor(mask))


def token_mean_cost(cost: Tensor, t_valid: np.ndarray, grid: tuple[int, int]) -> Tensor:
    """Mean of the cost volume over non-PAD tokens as ``[b, 1, gh, gw]``."""
    valid = np.asarray(t_valid, dtype=bool)
    w = (valid / np.maximum(valid.sum(axis=1, keepdims=True), 1)).astype(cost.dtype)[:, None, :]
    m = ops.sum(ops.mul(cost, Tensor(w)), axis=2)
    return ops.reshape(m, (cost.shape[0], 1, *grid))


def trim_tokens(t_valid: np.ndarray) -> int:
    """Number of token slots needed to cover every non-PAD position in the batch."""
    valid = np.asarray(t_valid, dtype=bool)
    cols = np.flatnonzero(valid.any(axis=0))
    if cols.size == 0:
        raise ShapeError("cost volume has no non-PAD token")
    return int(cols[-1]) + 1


class AggBlock(Module):
    """Spatial 3x3 conv per token slot, then self-attention across token slots.

    The spatial conv sees ``[slot features ; guidance]``. Its kernel is split
    into a slot part and a guidance part; the guidance part is the same for
    every slot, so it is convolved once per image and broadcast.
    """

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.agg_dim
        self.conv = Conv2d(d, d, 3, rng, pad_mode="replicate")
        self.conv_guide = Conv2d(cfg.guidance_dim, d, 3, rng, pad_mode="replicate", bias=False)
        self.ln_s = LayerNorm(d)
        self.attn = MultiheadAttention(d, d, d, cfg.heads, rng)
        self.ln_t = LayerNorm(d)

    def __call__(self, x: Tensor, guide: Tensor, t_valid: np.ndarray, grid: tuple[int, int]) -> Tensor:
        """``x`` is ``[b, N, L, d]``; ``guide`` is ``[b, g, gh, gw]``."""
        b, n, l, d = x.shape
        gh, gw = grid
        maps = ops.reshape(ops.transpose(ops.reshape(x, (b, gh, gw, l, d)), (0, 3, 4, 1, 2)), (b * l, d, gh, gw))
        s = ops.reshape(self.conv(maps), (b, l, d, gh, gw))
        g = ops.reshape(self.conv_guide(guide), (b, 1, d, gh, gw))
        s = ops.relu(ops.add(s, ops.expand(g, (b, l, d, gh, gw))))
        s = ops.reshape(ops.transpose(s, (0, 3, 4, 1, 2)), (b, n, l, d))
        x = self.ln_s(ops.add(x, s))
        tok = ops.reshape(x, (b * n, l, d))
        valid = np.repeat(np.asarray(t_valid, dtype=bool), n, axis=0)
        tok = self.ln_t(ops.add(tok, self.attn(tok, tok, valid)))
        return ops.reshape(tok, (b, n, l, d))


class Aggregator(Module):
    def __init__(self, d_c: int, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(1, cfg.agg_dim, rng)
        self.guide = Linear(d_c, cfg.guidance_dim, rng)
        self.blocks = [AggBlock(cfg, rng) for _ in range(cfg.blocks)]

    def __call__(self, cost: Tensor, f_v: Tensor, t_valid: np.ndarray, grid: tuple[int, int]) -> Tensor:
        """``[b, N, L]`` cost and ``[b, N, d_c]`` guidance -> ``[b, d_agg, gh, gw]``.

        Trailing all-PAD token slots are dropped first; PAD slots never reach
        valid ones (per-slot convolution, masked keys, masked final mean).
        """
        b, n, _ = cost.shape
        if n != grid[0] * grid[1]:
            raise ShapeError(f"cost volume has {n} sites but grid is {grid}")
        l = trim_tokens(t_valid)
        valid = np.asarray(t_valid, dtype=bool)[:, :l]
        cost = cost[:, :, :l]
        x = self.embed(ops.reshape(cost, (b, n, l, 1)))
        g = self.cfg.guidance_dim
        guide = ops.reshape(ops.transpose(self.guide(f_v), (0, 2, 1)), (b, g, *grid))
        for blk in self.blocks:
            x = blk(x, guide, valid, grid)
        w = (valid / valid.sum(axis=1, keepdims=True)).astype(x.dtype)[:, None, :, None]
        pooled = ops.sum(ops.mul(x, Tensor(w)), axis=2)
        d = self.cfg.agg_dim
        return ops.reshape(ops.transpose(pooled, (0, 2, 1)), (b, d, *grid))


class UpDecoder(Module):
    """Two (x2 upsample, concat projected skip, conv3x3 + ReLU) stages and a 1x1 head.

    The head is applied before the final resize to full resolution; both are
    linear and the interpolation rows sum to one, so the order does not change
    the result.
    """

    def __init__(self, agg_dim: int, skip16: int, skip8: int, cfg: DecoderConfig, rng: np.random.Generator):
        d1, d2 = cfg.dec_dims
        self.proj16 = Conv2d(skip16, cfg.skip_dim, 1, rng)
        self.proj8 = Conv2d(skip8, cfg.skip_dim, 1, rng)
        self.conv1 = Conv2d(agg_dim + cfg.skip_dim, d1, 3, rng)
        self.conv2 = Conv2d(d1 + cfg.skip_dim, d2, 3, rng)
        self.head = Conv2d(d2, 1, 1, rng)

    def __call__(self, agg: Tensor, f16: Tensor, f8: Tensor, out_size: tuple[int, int]) -> Tensor:
        h, w = agg.shape[-2:]
        if f16.shape[-2:] != (2 * h, 2 * w) or f8.shape[-2:] != (4 * h, 4 * w):
            raise ShapeError(f"skip sizes {f16.shape[-2:]}, {f8.shape[-2:]} do not match aggregate {h}x{w}")
        x = ops.upsample_bilinear(agg, (2 * h, 2 * w))
        x = ops.relu(self.conv1(ops.concat([x, self.proj16(f16)], axis=1)))
        x = ops.upsample_bilinear(x, (4 * h, 4 * w))
        x = ops.relu(self.conv2(ops.concat([x, self.proj8(f8)], axis=1)))
        return ops.upsample_bilinear(self.head(x), out_size)


class CostDecoder(Module):
    """Cost volume, aggregation and upsampling to mask logits.

    With ``cfg.cost_prior > 0`` the token-mean cost map, resized to full
    resolution and scaled by that fixed factor, is added to the decoded
    logits. The decoder then refines a similarity-as-logit prior, which fixes
    the sign convention: high similarity means foreground.
    """

    def __init__(self, d_c: int, skip16: int, skip8: int, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.agg = Aggregator(d_c, cfg, rng)
        self.up = UpDecoder(cfg.agg_dim, skip16, skip8, cfg, rng)
        self.last_cost: np.ndarray | None = None

    def __call__(self, f_v: Tensor, f_t: Tensor, t_valid: np.ndarray, f16: Tensor, f8: Tensor,
                 grid: tuple[int, int], out_size: tuple[int, int]) -> Tensor:
        """Returns ``[b, 1, H, W]`` mask logits."""
        cost = cost_volume(f_v, f_t, t_valid)
        self.last_cost = cost.data
        logits = self.up(self.agg(cost, f_v, t_valid, grid), f16, f8, out_size)
        if self.cfg.cost_prior:
            prior = ops.upsample_bilinear(token_mean_cost(cost, t_valid, grid), out_size)
            logits = ops.add(logits, ops.scale(prior, self.cfg.cost_prior))
        return logits


def predict_mask(logits) -> np.ndarray:
    """Binary mask from logits; sigmoid(0) = 0.5 counts as foreground."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (x >= 0).astype(np.uint8)


def soft_dice_loss(logits: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """``1 - soft Dice`` averaged over the batch axis."""
    b = logits.shape[0]
    p = ops.reshape(ops.sigmoid(logits), (b, -1))
    g = np.asarray(target, dtype=logits.dtype).reshape(b, -1)
    inter = ops.sum(ops.mul(p, Tensor(g)), axis=1)
    denom = ops.add(ops.sum(p, axis=1), Tensor(g.sum(axis=1) + eps))
    num = ops.add(ops.scale(inter, 2.0), Tensor(np.full(b, eps, dtype=logits.dtype)))
    dice = ops.mul(num, ops.reciprocal(denom))
    return ops.sub(Tensor(np.ones((), dtype=logits.dtype)), ops.mean(dice))


def seg_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """``0.5 * soft-Dice loss + 0.5 * BCE``."""
    target = np.asarray(target).reshape(logits.shape)
    return ops.scale(ops.add(soft_dice_loss(logits, target), ops.bce_with_logits(logits, target)), 0.5)
