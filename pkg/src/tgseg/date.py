"""Auxiliary-prompt infusion into the primary prompt features.

The auxiliary sentence queries the primary one through a single cross-attention
block; the result is added back onto the primary tokens and layer-normalized.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .autodiff.nn import LayerNorm, Module, MultiheadAttention
from .grammar import generate_auxiliary  # noqa: F401  (re-exported)

VARIANTS = ("inject", "main_only", "aux_only", "concat")


class DATE(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = MultiheadAttention(dim, dim, dim, heads, rng)
        self.ln = LayerNorm(dim)

    def __call__(self, f_p: Tensor, f_a: Tensor, p_valid: np.ndarray, a_valid: np.ndarray) -> Tensor:
        """``[b, L, D]`` primary and auxiliary features -> ``[b, L, D]``.

        PAD keys of the primary prompt are masked; rows of PAD auxiliary queries
        are zeroed before the residual.
        """
        if f_p.shape != f_a.shape:
            raise ShapeError(f"primary {f_p.shape} and auxiliary {f_a.shape} lengths differ")
        infused = self.attn(f_a, f_p, p_valid)
        q_mask = np.asarray(a_valid, dtype=f_p.dtype)[..., None]
        infused = ops.mul(infused, Tensor(q_mask))
        return self.ln(ops.add(f_p, infused))


def date_forward(module: DATE, f_p: Tensor, f_a: Tensor, p_valid: np.ndarray, a_valid: np.ndarray) -> Tensor:
    """Unbatched convenience wrapper: ``[L, D]`` inputs -> ``[L, D]``."""
    out = module(ops.reshape(f_p, (1,) + f_p.shape), ops.reshape(f_a, (1,) + f_a.shape),
                 np.asarray(p_valid)[None], np.asarray(a_valid)[None])
    return ops.reshape(out, f_p.shape)
