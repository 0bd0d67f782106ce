"""Vision-language calibration against a shared gated context.

Visual and text tokens are each gated by a sigmoid conditioned on the other
modality's mean summary, concatenated into one context, and both modalities
then cross-attend to that context (residual + LayerNorm).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .autodiff.nn import LayerNorm, Linear, Module, MultiheadAttention

VARIANTS = ("none", "single", "bidirectional", "gated")


class DegenerateContextError(ValueError):
    """The text side has no non-PAD token to summarize."""


@dataclass
class SharedContext:
    tokens: Tensor          # [b, N_v + L, d_c]
    valid: np.ndarray       # [b, N_v + L] key mask
    gates_v: Tensor         # [b, N_v, 1]
    gates_t: Tensor         # [b, L, 1]


def masked_mean(x: Tensor, valid: np.ndarray) -> Tensor:
    """Mean over axis 1 of ``[b, n, d]`` restricted to ``valid`` rows -> ``[b, 1, d]``."""
    valid = np.asarray(valid, dtype=bool)
    counts = valid.sum(axis=1)
    if (counts == 0).any():
        raise DegenerateContextError("text has no non-PAD tokens")
    w = (valid / counts[:, None]).astype(x.dtype)[..., None]
    return ops.sum(ops.mul(x, Tensor(w)), axis=1, keepdims=True)


class Gate(Module):
    """Per-token scalar gate ``sigmoid(w . [token ; summary] + b)``."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(2 * dim, 1, rng)

    def __call__(self, tokens: Tensor, summary: Tensor) -> Tensor:
        b, n, d = tokens.shape
        joint = ops.concat([tokens, ops.expand(summary, (b, n, d))], axis=-1)
        return ops.sigmoid(self.proj(joint))


class GatedContext(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.gate_v = Gate(dim, rng)
        self.gate_t = Gate(dim, rng)

    def __call__(self, f_v: Tensor, f_t: Tensor, t_valid: np.ndarray) -> SharedContext:
        b, n_v, d = f_v.shape
        if f_t.shape[0] != b or f_t.shape[2] != d:
            raise ShapeError(f"visual {f_v.shape} and text {f_t.shape} disagree")
        s_v = ops.mean(f_v, axis=1, keepdims=True)
        s_t = masked_mean(f_t, t_valid)
        g_v = self.gate_v(f_v, s_t)
        g_t = self.gate_t(f_t, s_v)
        tokens = ops.concat([ops.mul(f_v, g_v), ops.mul(f_t, g_t)], axis=1)
        valid = np.concatenate([np.ones((b, n_v), dtype=bool), np.asarray(t_valid, dtype=bool)], axis=1)
        return SharedContext(tokens, valid, g_v, g_t)


class CalibBlock(Module):
    """``LayerNorm(q + CrossAttn(q, kv))``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = MultiheadAttention(dim, dim, dim, heads, rng)
        self.ln = LayerNorm(dim)

    def __call__(self, q: Tensor, kv: Tensor, kv_valid: np.ndarray | None) -> Tensor:
        return self.ln(ops.add(q, self.attn(q, kv, kv_valid)))


class VLCM(Module):
    """Calibrates ``[b, N_v, d]`` visual and ``[b, L, d]`` text tokens.

    ``variant`` selects the wiring:

    * ``none``: identity pass-through
    * ``single``: vision queries text; text unchanged
    * ``bidirectional``: each modality queries the other directly
    * ``gated``: both query the shared gated context
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, variant: str = "gated"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown VLCM variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        if variant == "gated":
            self.context = GatedContext(dim, rng)
        if variant != "none":
            self.calib_v = CalibBlock(dim, heads, rng)
        if variant in ("bidirectional", "gated"):
            self.calib_t = CalibBlock(dim, heads, rng)
        self.last_context: SharedContext | None = None

    def __call__(self, f_v: Tensor, f_t: Tensor, t_valid: np.ndarray) -> tuple[Tensor, Tensor]:
        v = self.variant
        if v == "none":
            return f_v, f_t
        if v == "single":
            return self.calib_v(f_v, f_t, t_valid), f_t
        if v == "bidirectional":
            return self.calib_v(f_v, f_t, t_valid), self.calib_t(f_t, f_v, None)
        ctx = self.context(f_v, f_t, t_valid)
        self.last_context = ctx
        return self.calib_v(f_v, ctx.tokens, ctx.valid), self.calib_t(f_t, ctx.tokens, ctx.valid)
