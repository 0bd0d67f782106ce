import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tgseg.autodiff import Tensor, ops
from tgseg.autodiff.gradcheck import check_gradients
from tgseg.autodiff.nn import DegenerateAttentionError
from tgseg.date import DATE, date_forward

from conftest import SEEDS, t64


def _ln64(x, gamma, beta, eps=1e-5):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + eps) * gamma + beta


def test_zero_out_projection_gives_layernorm_of_primary(rng):
    m = DATE(16, 4, rng)
    m.attn.out.weight.data[:] = 0
    m.attn.out.bias.data[:] = 0
    f_p, f_a = rng.normal(size=(2, 6, 16)), rng.normal(size=(2, 6, 16))
    valid = np.ones((2, 6), bool)
    out = m(Tensor(f_p), Tensor(f_a), valid, valid).data
    assert np.array_equal(out, m.ln(Tensor(f_p)).data)


def test_pad_keys_get_zero_mass_and_rows_sum_to_one(rng):
    m = DATE(8, 2, rng)
    p_valid = np.array([[1, 1, 1, 0, 0], [1, 0, 0, 0, 0]], bool)
    a_valid = np.array([[1, 1, 1, 1, 0], [1, 1, 0, 0, 0]], bool)
    m(Tensor(rng.normal(size=(2, 5, 8))), Tensor(rng.normal(size=(2, 5, 8))), p_valid, a_valid)
    w = m.attn.last_weights
    assert np.all(w[0, :, :, 3:] == 0) and np.all(w[1, :, :, 1:] == 0)
    assert np.abs(w.sum(-1) - 1).max() < 1e-6


def test_single_head_hand_oracle(rng):
    m = DATE(4, 1, rng).astype(np.float64)
    m.ln.gamma.data = rng.normal(size=4)
    m.ln.beta.data = rng.normal(size=4)
    f_p, f_a = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    p_valid = np.array([True, True, False])
    a_valid = np.array([True, True, True])
    out = date_forward(m, Tensor(f_p, dtype=np.float64), Tensor(f_a, dtype=np.float64), p_valid, a_valid).data
    a = m.attn
    q = f_a @ a.q.weight.data + a.q.bias.data
    k = f_p @ a.k.weight.data + a.k.bias.data
    v = f_p @ a.v.weight.data + a.v.bias.data
    ref_inf = np.zeros((3, 4))
    for i in range(3):
        s = [q[i] @ k[j] / 2.0 for j in range(2)]
        e = [math.exp(x - max(s)) for x in s]
        ctx = sum(e[j] / sum(e) * v[j] for j in range(2))
        ref_inf[i] = ctx @ a.out.weight.data + a.out.bias.data
    ref = _ln64(f_p + ref_inf, m.ln.gamma.data, m.ln.beta.data)
    assert out.shape == (3, 4)
    assert np.max(np.abs(out - ref)) < 1e-5


def test_pad_queries_add_nothing(rng):
    m = DATE(8, 2, rng).astype(np.float64)
    f_p, f_a = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    a_valid = np.array([True, True, False, False])
    out = date_forward(m, Tensor(f_p, dtype=np.float64), Tensor(f_a, dtype=np.float64), np.ones(4, bool), a_valid)
    ref = m.ln(Tensor(f_p, dtype=np.float64)).data
    assert np.array_equal(out.data[2:], ref[2:])


def test_all_pad_keys_raise(rng):
    m = DATE(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 4, 8)))
    with pytest.raises(DegenerateAttentionError):
        m(x, x, np.zeros((1, 4), bool), np.ones((1, 4), bool))


def test_length_mismatch_raises(rng):
    from tgseg.autodiff import ShapeError
    m = DATE(8, 2, rng)
    with pytest.raises(ShapeError):
        m(Tensor(np.ones((1, 4, 8))), Tensor(np.ones((1, 5, 8))), np.ones((1, 4), bool), np.ones((1, 5), bool))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_output_shape_any_prompt(n_valid, seed):
    r = np.random.default_rng(seed)
    m = DATE(8, 2, r)
    valid = np.zeros((1, 12), bool)
    valid[0, :n_valid] = True
    out = m(Tensor(r.normal(size=(1, 12, 8))), Tensor(r.normal(size=(1, 12, 8))), valid, valid)
    assert out.shape == (1, 12, 8) and np.isfinite(out.data).all()


def test_date_gradients_20_seeds():
    worst = 0.0
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        m = DATE(4, 2, r).astype(np.float64)
        f_p, f_a = t64(r, 1, 3, 4), t64(r, 1, 3, 4)
        valid = np.array([[True, True, False]])
        w = r.normal(size=(1, 3, 4))
        worst = max(worst, check_gradients(
            lambda: ops.sum(ops.mul(m(f_p, f_a, valid, valid), Tensor(w))),
            [f_p, f_a, m.attn.q.weight, m.attn.k.weight, m.attn.v.weight, m.attn.out.weight]))
    assert worst < 1e-4
