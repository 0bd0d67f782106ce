import numpy as np
import pytest

from tgseg.autodiff import Tensor
from tgseg.autodiff.nn import Linear
from tgseg.config import ROWS, ConfigError, ExperimentConfig, ModelConfig
from tgseg.date import DATE
from tgseg.encoders import FrozenEncoders, TextConfig, VitConfig
from tgseg.model import AccountingError, Batch, SegModel, TextFeatures, count_params, encode_frozen
from tgseg.sse import to_tokens


@pytest.fixture(scope="module")
def enc():
    return FrozenEncoders(VitConfig(), TextConfig(), seed=0).freeze()


def _batch(enc, rng, b=1):
    images = rng.random((b, 1, 256, 256)).astype(np.float32)
    ids = rng.integers(4, 40, (b, 32))
    ids[:, 10:] = 0
    ids[:, 0] = 1
    f_clip, text = encode_frozen(enc, images, ids, ids, ids)
    return Batch(images, f_clip, text)


def test_param_accounting_totals(enc):
    model = SegModel(ModelConfig(), enc)
    c = count_params(model)
    assert c["trainable"] + c["frozen"] == c["total"]
    assert sum(c["modules"].values()) == c["total"]
    assert c["frozen"] == enc.num_params()
    assert c["modules"]["frozen.vit"] + c["modules"]["frozen.txt"] == c["frozen"]


def test_date_off_reduces_by_block_size(enc):
    on = count_params(SegModel(ModelConfig(), enc))["trainable"]
    off = count_params(SegModel(ModelConfig(date=False), enc))["trainable"]
    assert on - off == DATE(64, 4, np.random.default_rng(0)).num_params()


def test_unclassified_name(enc):
    model = SegModel(ModelConfig(), enc)
    model.extra = Linear(2, 2, np.random.default_rng(0))
    with pytest.raises(AccountingError):
        count_params(model)


def test_trainable_under_frozen_prefix(enc):
    model = SegModel(ModelConfig(), FrozenEncoders(VitConfig(), TextConfig(), seed=1))
    model.frozen.vit.parameters()[0].requires_grad = True
    with pytest.raises(AccountingError):
        count_params(model)


def test_forward_shape_and_determinism(enc):
    rng = np.random.default_rng(0)
    batch = _batch(enc, rng, 2)
    a = SegModel(ModelConfig(), enc, seed=5)(batch).data
    b = SegModel(ModelConfig(), enc, seed=5)(batch).data
    assert a.shape == (2, 1, 256, 256) and np.isfinite(a).all()
    assert np.array_equal(a, b)


def test_row_e_is_identity_wiring(enc):
    cfg = ExperimentConfig().with_row("e").model
    model = SegModel(cfg, enc, seed=2)
    tr = model.train
    assert not hasattr(tr, "date") and tr.vlcm.variant == "none" and not tr.sse.enabled
    batch = _batch(enc, np.random.default_rng(1))
    pyr = tr.cnn(batch.images)
    f32 = tr.sse.p_v(Tensor(batch.f_clip))
    f_t = tr.text_proj(Tensor(batch.text.primary))
    ref = tr.dec(f32, f_t, batch.text.primary_valid, pyr.f16, pyr.f8, (8, 8), (256, 256)).data
    assert np.array_equal(model(batch).data, ref)


@pytest.mark.parametrize("variant", ["main_only", "aux_only", "concat"])
def test_date_variants_route_text(enc, variant):
    model = SegModel(ModelConfig(date_variant=variant), enc)
    t = _batch(enc, np.random.default_rng(0)).text
    out, valid = model.text_path(t)
    src = {"main_only": t.primary, "aux_only": t.auxiliary, "concat": t.concat}[variant]
    assert np.array_equal(out.data, src)


def test_rows_table():
    assert sorted(ROWS) == list("abcde")
    cfg = ExperimentConfig()
    assert cfg.with_row("d").model.effective_date == "main_only"
    assert cfg.with_row("c").model.effective_vlcm == "none"
    with pytest.raises(ConfigError):
        cfg.with_row("z")


def test_config_overrides(tmp_path):
    cfg = ExperimentConfig().override("train.steps", "7").override("model.sse", "false")
    assert cfg.train.steps == 7 and cfg.model.sse is False
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert ExperimentConfig.load(p) == cfg
    for key in ("train.nope", "model", "bogus.x"):
        with pytest.raises(ConfigError):
            cfg.override(key, "1")
    with pytest.raises(ConfigError):
        cfg.override("train.lr", "fast")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"train": {"stepz": 3}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": {"vlcm_variant": "triple"}})
