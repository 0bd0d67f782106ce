import numpy as np
import pytest

from tgseg.autodiff import ShapeError, Tensor, backward, checkpoint, ops
from tgseg.encoders import (CnnConfig, CnnEncoder, ContrastiveDegenerateError, FrozenEncoders, TextConfig,
                            VitConfig, VocabularyError, encode_cnn, encode_image_vit, encode_text,
                            load_encoders, matched_vs_mismatched, pretrain_align, save_encoders)
from tgseg.text import tokenize


@pytest.fixture(scope="module")
def enc():
    return FrozenEncoders(VitConfig(), TextConfig(), seed=0).freeze()


def test_vit_shape_determinism_sensitivity(enc, rng):
    a = rng.random((1, 256, 256)).astype(np.float32)
    b = a.copy()
    b[0, 100, 100] += 0.5
    fa = encode_image_vit(enc, a).data
    assert fa.shape == (64, 64)
    assert fa.tobytes() == encode_image_vit(enc, a).data.tobytes()
    assert not np.array_equal(fa, encode_image_vit(enc, b).data)
    assert np.isfinite(fa).all()


def test_vit_wrong_size(enc):
    with pytest.raises(ShapeError):
        encode_image_vit(enc, np.zeros((1, 128, 128), np.float32))


def test_vit_config_invariants():
    with pytest.raises(ValueError):
        VitConfig(image_size=250)
    with pytest.raises(ValueError):
        VitConfig(embed_dim=66)


def test_text_encoder(enc):
    ids = tokenize("bilateral pulmonary infection, two infected areas, upper left lung and lower right lung")
    out = encode_text(enc, ids).data
    assert out.shape == (32, 64)
    assert out.tobytes() == encode_text(enc, ids).data.tobytes()
    swapped = ids.copy()
    swapped[[2, 3]] = swapped[[3, 2]]
    assert not np.array_equal(out, encode_text(enc, swapped).data)
    bad = ids.copy()
    bad[1] = 64
    with pytest.raises(VocabularyError):
        encode_text(enc, bad)


def test_tokenize_examples():
    assert tokenize("")[:3].tolist() == [2, 3, 0]
    assert np.array_equal(tokenize("Left lung."), tokenize("left lung"))


def test_cnn_pyramid(rng):
    cnn = CnnEncoder(CnnConfig(), rng)
    pyr = encode_cnn(cnn, rng.random((1, 256, 256)))
    assert [t.shape for t in pyr.levels()] == [(32, 32, 32), (64, 16, 16), (128, 8, 8)]
    zero = encode_cnn(cnn, np.zeros((1, 256, 256)))
    assert all(np.isfinite(t.data).all() for t in zero.levels())
    with pytest.raises(ShapeError):
        encode_cnn(cnn, np.zeros((1, 100, 96)))
    assert all(p.requires_grad for p in cnn.parameters())


def test_frozen_encoders_get_no_gradient(enc, rng):
    x = Tensor(rng.normal(size=(1, 64)), requires_grad=True)
    feats = enc.vit(rng.random((1, 1, 256, 256)).astype(np.float32))
    backward(ops.sum(ops.mul(ops.mean(feats, axis=1), x)))
    assert all(p.grad is None and not p.requires_grad for p in enc.parameters())


@pytest.fixture(scope="module")
def tiny_pairs():
    rng = np.random.default_rng(4)
    n = 12
    images = np.zeros((n, 1, 64, 64), np.float32)
    texts = []
    for i in range(n):
        side = i % 2
        images[i, 0, 10:50, (8 if side == 0 else 40):(24 if side == 0 else 56)] = 1.0
        images[i] += rng.normal(0, 0.05, (1, 64, 64)).astype(np.float32)
        texts.append("left lung" if side == 0 else "right lung")
    ids = np.stack([tokenize(t, 8) for t in texts])
    return images, ids


SMALL_VIT = VitConfig(image_size=64, patch_size=16, embed_dim=16, layers=1, heads=2)
SMALL_TXT = TextConfig(context_length=8, embed_dim=16, layers=1, heads=2)


def test_pretrain_aligns_and_is_deterministic(tiny_pairs, tmp_path):
    images, ids = tiny_pairs
    a = pretrain_align(images, ids, 60, 3, SMALL_VIT, SMALL_TXT, batch=8, lr=3e-3)
    b = pretrain_align(images, ids, 60, 3, SMALL_VIT, SMALL_TXT, batch=8, lr=3e-3)
    assert checkpoint.dumps(a.state_dict()) == checkpoint.dumps(b.state_dict())
    matched, mismatched = matched_vs_mismatched(a, images, ids)
    assert matched > mismatched
    assert not any(p.requires_grad for p in a.parameters())
    save_encoders(a, tmp_path / "enc.tgcl")
    c = load_encoders(tmp_path / "enc.tgcl")
    assert checkpoint.dumps(c.state_dict()) == checkpoint.dumps(a.state_dict())


def test_pretrain_zero_steps_and_degenerate_batch(tiny_pairs):
    images, ids = tiny_pairs
    enc0 = pretrain_align(images, ids, 0, 3, SMALL_VIT, SMALL_TXT)
    ref = FrozenEncoders(SMALL_VIT, SMALL_TXT, seed=3)
    assert checkpoint.dumps(enc0.state_dict()) == checkpoint.dumps(ref.state_dict())
    with pytest.raises(ContrastiveDegenerateError):
        pretrain_align(images, ids, 1, 3, SMALL_VIT, SMALL_TXT, batch=1)
