"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class DegenerateAttentionError(ValueError):
    """Every key of some attention row is masked out."""


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, trainable: bool = True):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=trainable)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.astype(np.float32) for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, arr in state.items():
            if k not in own:
                continue
            p = own[k]
            if p.shape != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {k}: {p.shape} vs {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for f64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        bound = math.sqrt(6.0 / (d_in + d_out))
        w = np.zeros((d_in, d_out), np.float32) if zero else _uniform(rng, (d_in, d_out), bound)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim, np.float32))
        self.beta = Parameter(np.zeros(dim, np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad_mode: str = "zeros", bias: bool = True):
        fan_in = c_in * k * k
        self.kernel = Parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, k, k)).astype(np.float32))
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None
        self.stride = stride
        self.pad = k // 2
        self.pad_mode = pad_mode

    def __call__(self, x: Tensor) -> Tensor:
        if self.pad and self.pad_mode == "replicate":
            x = ops.pad2d(x, (self.pad,) * 4, mode="replicate")
            return ops.conv2d(x, self.kernel, self.bias, stride=self.stride)
        return ops.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.pad)


def key_mask_bias(valid: np.ndarray, dtype) -> np.ndarray:
    """Additive attention bias ``[b, 1, 1, n_k]``: 0 for valid keys, -1e9 otherwise."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=-1).all():
        raise DegenerateAttentionError("an attention row has no unmasked key")
    return np.where(valid, 0.0, -1e9).astype(dtype)[:, None, None, :]


class MultiheadAttention(Module):
    """Scaled dot-product attention with separate query and key/value inputs.

    The attention weights of the most recent call are kept in ``last_weights``
    as a ``[b, heads, n_q, n_k]`` array.
    """

    def __init__(self, d_q: int, d_kv: int, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(d_q, d_model, rng)
        self.k = Linear(d_kv, d_model, rng)
        self.v = Linear(d_kv, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return ops.transpose(ops.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, kv: Tensor, key_valid: np.ndarray | None = None) -> Tensor:
        b, n_q, _ = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(kv))
        v = self._split(self.v(kv))
        dh = q.shape[-1]
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if key_valid is not None:
            scores = ops.add(scores, Tensor(key_mask_bias(key_valid, scores.dtype)))
        attn = ops.softmax(scores, axis=-1)
        self.last_weights = attn.data
        ctx = ops.matmul(attn, v)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, n_q, -1))
        return self.out(ctx)


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
