import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tgseg.autodiff import ShapeError, Tensor, backward, ops
from tgseg.autodiff.gradcheck import check_gradients
from tgseg.decoder import (AggBlock, Aggregator, CostDecoder, DecoderConfig, UpDecoder, cost_volume, predict_mask,
                           seg_loss, soft_dice_loss, trim_tokens)

from conftest import t64

TINY = DecoderConfig(agg_dim=4, guidance_dim=2, blocks=1, heads=1, skip_dim=2, dec_dims=(4, 3))


def _ln64(x, gamma, beta, eps=1e-5):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + eps) * gamma + beta


def test_cost_identical_and_orthogonal():
    v = np.array([[[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]]])
    t = np.array([[[3.0, 4.0, 0.0], [0.0, 1.0, 0.0]]])
    c = cost_volume(Tensor(v), Tensor(t), np.ones((1, 2), bool)).data
    assert abs(c[0, 0, 0] - 1.0) < 1e-6
    assert abs(c[0, 1, 0]) < 1e-6 and abs(c[0, 1, 1]) < 1e-6


def test_cost_dot_oracle(rng):
    v, t = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
    c = cost_volume(Tensor(v[None], dtype=np.float64), Tensor(t[None], dtype=np.float64), np.ones((1, 3), bool)).data
    ref = np.array([[v[i] @ t[n] / (np.linalg.norm(v[i]) * np.linalg.norm(t[n])) for n in range(3)] for i in range(5)])
    assert np.max(np.abs(c[0] - ref)) < 1e-6


def test_cost_pad_columns_zero(rng):
    valid = np.array([[True, True, False, False]])
    c = cost_volume(Tensor(rng.normal(size=(1, 6, 4))), Tensor(rng.normal(size=(1, 4, 4))), valid).data
    assert np.all(c[0, :, 2:] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_cost_bounded(seed, scale):
    r = np.random.default_rng(seed)
    c = cost_volume(Tensor(r.normal(size=(2, 7, 5)) * scale), Tensor(r.normal(size=(2, 3, 5))),
                    np.ones((2, 3), bool)).data
    assert np.isfinite(c).all() and c.min() >= -1 and c.max() <= 1


def test_cost_zero_norm_flagged(rng, caplog):
    v = np.zeros((1, 2, 4), np.float32)
    with caplog.at_level(logging.WARNING, logger="tgseg.decoder"):
        c = cost_volume(Tensor(v), Tensor(rng.normal(size=(1, 2, 4))), np.ones((1, 2), bool)).data
    assert np.isfinite(c).all() and np.all(c == 0)
    assert "zero-norm" in caplog.text


def test_cost_shape_error(rng):
    with pytest.raises(ShapeError):
        cost_volume(Tensor(np.ones((1, 4, 3))), Tensor(np.ones((1, 2, 5))), np.ones((1, 2), bool))


def test_trim_tokens():
    assert trim_tokens(np.array([[1, 1, 0, 0], [1, 0, 1, 0]], bool)) == 3
    with pytest.raises(ShapeError):
        trim_tokens(np.zeros((2, 3), bool))


def test_trim_is_exact(rng):
    agg = Aggregator(8, DecoderConfig(agg_dim=8, guidance_dim=4, heads=2), rng).astype(np.float64)
    f_v = Tensor(rng.normal(size=(1, 9, 8)), dtype=np.float64)
    valid4 = np.array([[True, True, False, False]])
    cost4 = Tensor(np.concatenate([rng.uniform(-1, 1, (1, 9, 2)), np.zeros((1, 9, 2))], axis=2), dtype=np.float64)
    full = agg(cost4, f_v, valid4, (3, 3)).data
    short = agg(cost4[:, :, :2], f_v, valid4[:, :2], (3, 3)).data
    assert np.max(np.abs(full - short)) < 1e-12


def test_constant_cost_gives_constant_map(rng):
    agg = Aggregator(8, DecoderConfig(agg_dim=8, guidance_dim=4, heads=2), rng)
    f_v = Tensor(np.tile(rng.normal(size=(1, 1, 8)), (1, 16, 1)))
    cost = Tensor(np.full((1, 16, 3), 0.3))
    out = agg(cost, f_v, np.ones((1, 3), bool), (4, 4)).data
    assert np.abs(out - out[..., :1, :1]).max() < 1e-5


def test_token_attention_rows(rng):
    agg = Aggregator(8, DecoderConfig(agg_dim=8, guidance_dim=4, heads=2), rng)
    valid = np.array([[True, True, True], [True, False, False]])
    agg(Tensor(rng.uniform(-1, 1, (2, 4, 3))), Tensor(rng.normal(size=(2, 4, 8))), valid, (2, 2))
    for blk in agg.blocks:
        w = blk.attn.last_weights
        assert np.abs(w.sum(-1) - 1).max() < 1e-6
        assert np.all(w[4:, :, :, 1:] == 0)


def test_single_token_slot_is_valid(rng):
    agg = Aggregator(8, DecoderConfig(agg_dim=8, guidance_dim=4, heads=2), rng)
    out = agg(Tensor(rng.uniform(-1, 1, (1, 4, 1))), Tensor(rng.normal(size=(1, 4, 8))), np.ones((1, 1), bool), (2, 2))
    assert np.isfinite(out.data).all()


def _conv_replicate(x, k, bias):
    """Direct 3x3 cross-correlation with edge-replicated borders; ``x`` is [c, h, w]."""
    c, h, w = x.shape
    o = k.shape[0]
    out = np.zeros((o, h, w))
    for oc in range(o):
        for i in range(h):
            for j in range(w):
                acc = 0.0 if bias is None else bias[oc]
                for ic in range(c):
                    for di in range(3):
                        for dj in range(3):
                            ii = min(max(i + di - 1, 0), h - 1)
                            jj = min(max(j + dj - 1, 0), w - 1)
                            acc += k[oc, ic, di, dj] * x[ic, ii, jj]
                out[oc, i, j] = acc
    return out


def test_one_block_composition_oracle(rng):
    agg = Aggregator(3, TINY, rng).astype(np.float64)
    blk = agg.blocks[0]
    for ln in (blk.ln_s, blk.ln_t):
        ln.gamma.data = rng.normal(size=4)
        ln.beta.data = rng.normal(size=4)
    cost = rng.uniform(-1, 1, (4, 2))
    f_v = rng.normal(size=(4, 3))
    out = agg(Tensor(cost[None], dtype=np.float64), Tensor(f_v[None], dtype=np.float64),
              np.ones((1, 2), bool), (2, 2)).data[0]

    x = cost[..., None] * agg.embed.weight.data[0] + agg.embed.bias.data          # [N, L, 4]
    guide = (f_v @ agg.guide.weight.data + agg.guide.bias.data).T.reshape(2, 2, 2)
    g = _conv_replicate(guide, blk.conv_guide.kernel.data, None)
    s = np.zeros_like(x)
    for slot in range(2):
        m = x[:, slot].T.reshape(4, 2, 2)
        y = np.maximum(_conv_replicate(m, blk.conv.kernel.data, blk.conv.bias.data) + g, 0)
        s[:, slot] = y.reshape(4, 4).T
    x = _ln64(x + s, blk.ln_s.gamma.data, blk.ln_s.beta.data)
    a = blk.attn
    y = np.zeros_like(x)
    for site in range(4):
        q = x[site] @ a.q.weight.data + a.q.bias.data
        k = x[site] @ a.k.weight.data + a.k.bias.data
        v = x[site] @ a.v.weight.data + a.v.bias.data
        sc = q @ k.T / math.sqrt(4)
        p = np.exp(sc - sc.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        y[site] = (p @ v) @ a.out.weight.data + a.out.bias.data
    x = _ln64(x + y, blk.ln_t.gamma.data, blk.ln_t.beta.data)
    ref = x.mean(1).T.reshape(4, 2, 2)
    assert np.max(np.abs(out - ref)) < 1e-5


def test_decoder_output_dims_and_skip_gradients(rng):
    dec = UpDecoder(64, 128, 128, DecoderConfig(), rng)
    f16 = Tensor(rng.normal(size=(1, 128, 16, 16)), requires_grad=True)
    f8 = Tensor(rng.normal(size=(1, 128, 32, 32)), requires_grad=True)
    out = dec(Tensor(rng.normal(size=(1, 64, 8, 8))), f16, f8, (256, 256))
    assert out.shape == (1, 1, 256, 256)
    backward(ops.mean(out))
    assert f16.grad is not None and np.any(f16.grad != 0)
    assert f8.grad is not None and np.any(f8.grad != 0)


def test_decoder_zero_input_is_bias_pattern(rng):
    dec = UpDecoder(4, 6, 6, TINY, rng)
    for conv in (dec.proj16, dec.proj8, dec.conv1, dec.conv2, dec.head):
        conv.bias.data = rng.normal(size=conv.bias.shape).astype(np.float32)
    out = dec(Tensor(np.zeros((1, 4, 2, 2), np.float32)), Tensor(np.zeros((1, 6, 4, 4), np.float32)),
              Tensor(np.zeros((1, 6, 8, 8), np.float32)), (16, 16)).data
    assert np.isfinite(out).all()
    # the skip projections emit their bias; the result is determined by biases alone
    out2 = dec(Tensor(np.zeros((1, 4, 2, 2), np.float32)), Tensor(np.zeros((1, 6, 4, 4), np.float32)),
               Tensor(np.zeros((1, 6, 8, 8), np.float32)), (16, 16)).data
    assert np.array_equal(out, out2)
    for conv in (dec.proj16, dec.proj8, dec.conv1, dec.conv2):
        conv.bias.data[:] = 0
    out3 = dec(Tensor(np.zeros((1, 4, 2, 2), np.float32)), Tensor(np.zeros((1, 6, 4, 4), np.float32)),
               Tensor(np.zeros((1, 6, 8, 8), np.float32)), (16, 16)).data
    assert np.all(out3 == dec.head.bias.data[0])


def test_skip_mismatch_raises(rng):
    dec = UpDecoder(4, 6, 6, TINY, rng)
    with pytest.raises(ShapeError):
        dec(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 6, 3, 3))), Tensor(np.zeros((1, 6, 8, 8))), (16, 16))


def test_head_before_resize_equals_after(rng):
    x = Tensor(rng.normal(size=(1, 3, 8, 8)), dtype=np.float64)
    k = Tensor(rng.normal(size=(1, 3, 1, 1)), dtype=np.float64)
    bias = Tensor(rng.normal(size=1), dtype=np.float64)
    a = ops.upsample_bilinear(ops.conv2d(x, k, bias), (16, 16)).data
    b = ops.conv2d(ops.upsample_bilinear(x, (16, 16)), k, bias).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_predict_mask_rules():
    assert predict_mask(np.full((4, 4), -10.0)).sum() == 0
    assert predict_mask(np.full((4, 4), 10.0)).all()
    assert predict_mask(np.zeros((1,)))[0] == 1


def test_loss_values(rng):
    target = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.uint8)
    perfect = Tensor(np.where(target, 40.0, -40.0))
    assert seg_loss(perfect, target).item() < 1e-6
    logits = rng.normal(size=(2, 1, 8, 8))
    p = 1 / (1 + np.exp(-logits))
    dice = (2 * (p * target).sum((1, 2, 3)) + 1e-6) / (p.sum((1, 2, 3)) + target.sum((1, 2, 3)) + 1e-6)
    bce = -(target * np.log(p) + (1 - target) * np.log(1 - p)).mean()
    assert abs(soft_dice_loss(Tensor(logits), target).item() - (1 - dice.mean())) < 1e-9
    assert abs(seg_loss(Tensor(logits), target).item() - 0.5 * (1 - dice.mean()) - 0.5 * bce) < 1e-9


def test_miniature_end_to_end_gradcheck():
    r = np.random.default_rng(3)
    dec = CostDecoder(4, 3, 3, TINY, r).astype(np.float64)
    f_v, f_t = t64(r, 1, 4, 4), t64(r, 1, 3, 4)
    f16, f8 = t64(r, 1, 3, 4, 4), t64(r, 1, 3, 8, 8)
    valid = np.array([[True, True, False]])
    target = (r.random((1, 1, 16, 16)) > 0.6).astype(np.uint8)

    def f():
        return seg_loss(dec(f_v, f_t, valid, f16, f8, (2, 2), (16, 16)), target)

    params = [f_v, f_t, f16, f8] + dec.parameters()
    assert check_gradients(f, params, h=1e-5) < 1e-3


def test_text_reaches_cost_volume(rng):
    dec = CostDecoder(8, 3, 3, TINY, rng)
    f_v = Tensor(rng.normal(size=(1, 4, 8)))
    valid = np.ones((1, 3), bool)
    args = (valid, Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(rng.normal(size=(1, 3, 8, 8))), (2, 2), (16, 16))
    dec(f_v, Tensor(rng.normal(size=(1, 3, 8))), *args)
    c1 = dec.last_cost
    dec(f_v, Tensor(rng.normal(size=(1, 3, 8))), *args)
    assert np.abs(dec.last_cost - c1).max() > 0


def test_token_mean_cost_ignores_pad():
    from tgseg.decoder import token_mean_cost
    cost = np.zeros((1, 4, 3))
    cost[0, :, 0] = [0.1, 0.2, 0.3, 0.4]
    cost[0, :, 1] = [0.3, 0.2, 0.1, 0.0]
    cost[0, :, 2] = 9.0
    m = token_mean_cost(Tensor(cost), np.array([[True, True, False]]), (2, 2)).data
    assert np.allclose(m[0, 0], [[0.2, 0.2], [0.2, 0.2]])


def test_cost_prior_is_additive(rng):
    from dataclasses import replace
    from tgseg.decoder import token_mean_cost
    cfg = replace(TINY, cost_prior=7.0)
    dec = CostDecoder(8, 3, 3, cfg, rng)
    args = (Tensor(rng.normal(size=(1, 4, 8))), Tensor(rng.normal(size=(1, 3, 8))), np.ones((1, 3), bool),
            Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(rng.normal(size=(1, 3, 8, 8))), (2, 2), (16, 16))
    with_prior = dec(*args).data
    dec.cfg = replace(cfg, cost_prior=0.0)
    plain = dec(*args).data
    prior = ops.upsample_bilinear(token_mean_cost(Tensor(dec.last_cost), np.ones((1, 3), bool), (2, 2)), (16, 16))
    assert np.max(np.abs(with_prior - plain - 7.0 * prior.data)) < 1e-5
