import json

import numpy as np
import pytest

from tgseg.ablation import RowResult, core_rows, format_table, pooled_sd, rows_from_payload
from tgseg.config import ExperimentConfig
from tgseg.data import generate_sample, load_dataset, sample_seed
from tgseg.model import SegModel
from tgseg.plotting import plot_ablation, plot_param_breakdown, plot_similarity_panel, plot_training_curves
from tgseg.referring import Trial, held_out_bilateral, is_bilateral, side_views, steered_fraction
from tgseg.simmap import ZERO_RANGE_LEVEL, contrast, heatmap_from_cost, normalize_heatmap, similarity_maps
from tgseg.train import build_encoders


# similarity maps


def test_zero_range_map_is_constant_128():
    out = normalize_heatmap(np.full((5, 7), -0.3))
    assert out.dtype == np.uint8 and (out == ZERO_RANGE_LEVEL).all()
    assert (normalize_heatmap(heatmap_from_cost(np.zeros((4, 3)), np.ones(3, bool), (2, 2), (8, 8))) == 128).all()


def test_min_max_scaling():
    out = normalize_heatmap(np.array([[-1.0, 0.0], [1.0, 0.5]]))
    assert out.tolist() == [[0, 128], [255, 191]]


def test_heatmap_ignores_pad_tokens(rng):
    cost = rng.uniform(-1, 1, (4, 5))
    valid = np.array([True, True, False, True, False])
    a = heatmap_from_cost(cost, valid, (2, 2), (6, 6))
    cost[:, ~valid] = 99.0
    assert np.array_equal(a, heatmap_from_cost(cost, valid, (2, 2), (6, 6)))
    assert a.shape == (6, 6)
    corner = cost[:, valid].mean(axis=1).reshape(2, 2)
    assert a[0, 0] == pytest.approx(corner[0, 0]) and a[-1, -1] == pytest.approx(corner[1, 1])


def test_contrast_values_and_errors():
    heat = np.array([[1.0, 1.0], [0.0, 0.5]])
    mask = np.array([[1, 1], [0, 0]])
    assert contrast(heat, mask) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        contrast(heat, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        contrast(heat, np.ones((2, 2)))


def test_similarity_maps_match_image_size(tiny_cfg):
    recs = list(load_dataset(tiny_cfg.data.path, "test"))
    model = SegModel(tiny_cfg.model, build_encoders(tiny_cfg))
    maps = similarity_maps(model, recs)
    for v in ("frozen", "adapters"):
        assert maps[v].shape == (len(recs), *recs[0].mask.shape) and maps[v].dtype == np.uint8


# referring probe


def test_held_out_bilateral_is_deterministic():
    a, b = held_out_bilateral(3, 1), held_out_bilateral(3, 1)
    assert [r.seed for r in a] == [r.seed for r in b]
    assert all(is_bilateral(r) for r in a)
    single = next(r for r in map(generate_sample, (sample_seed(0, i) for i in range(50)))
                  if r.image_zones and len({z.split("-")[0] for z in r.image_zones}) == 1)
    assert not is_bilateral(single)


def test_side_views_split_the_lesions():
    rec = held_out_bilateral(1, 2)[0]
    v = side_views(rec)
    left, right = v["left"].mask.astype(bool), v["right"].mask.astype(bool)
    assert left.any() and right.any() and not (left & right).any()
    assert all(z.startswith("left") for z in v["left"].zones)
    assert all(z.startswith("right") for z in v["right"].zones)
    assert "left" in v["left"].prompts.primary and "right" in v["right"].prompts.primary
    assert np.array_equal(v["left"].image, rec.image)


def test_steered_fraction():
    trials = [Trial(1, "left", 0.9, 0.1), Trial(1, "right", 0.4, 0.4), Trial(2, "left", 0.2, 0.6)]
    assert [t.steered for t in trials] == [True, False, False]
    assert steered_fraction(trials) == pytest.approx(1 / 3)
    assert steered_fraction([]) == 0.0


# ablation report


def test_core_rows_wiring():
    rows = core_rows(ExperimentConfig())
    assert [r for r, _, _ in rows] == ["a", "b", "c", "d", "e"]
    m = {r: c.model for r, _, c in rows}
    assert (m["a"].sse, m["a"].effective_date, m["a"].effective_vlcm) == (True, "inject", "gated")
    assert (m["e"].sse, m["e"].effective_date, m["e"].effective_vlcm) == (False, "main_only", "none")
    assert not m["b"].sse and m["c"].effective_vlcm == "none" and m["d"].effective_date == "main_only"


def _row(name, vals):
    return RowResult(name, f"row {name}", {"sse": True, "date": "inject", "vlcm": "none"}, list(vals),
                     [v - 0.1 for v in vals], list(vals))


def test_row_stats_and_pooled_sd():
    a, b = _row("a", [0.8, 0.9, 1.0]), _row("b", [0.5, 0.5, 0.5])
    assert a.mean == pytest.approx(0.9) and a.sd == pytest.approx(0.1)
    assert pooled_sd(a, b) == pytest.approx(np.sqrt(0.01 / 2))
    assert _row("c", [0.7]).sd == 0.0


def test_format_table_and_payload_roundtrip():
    rows = [_row("a", [0.8, 0.9, 1.0]), _row("e", [0.5, 0.6, 0.7])]
    text = format_table("Core", rows)
    lines = text.splitlines()
    assert lines[0] == "Core" and "90.00 +- 10.00" in text and "60.00 +- 10.00" in text
    assert len({len(x) for x in lines[1::2] if set(x) == {"-"}}) == 1
    payload = json.loads(json.dumps({"tables": {"core": [r.to_dict() for r in rows]}}))
    back = rows_from_payload(payload)
    assert [r.mdice for r in back] == [r.mdice for r in rows]


# figures


def test_figures_are_written_and_reproducible(tmp_path, rng):
    log = tmp_path / "metrics.jsonl"
    log.write_text("\n".join(json.dumps({"step": s, "split": sp, "mDice": 0.5, "mIoU": 0.4, "loss": 0.3})
                             for s in (0, 10) for sp in ("train", "val")) + "\n")
    rows = [_row("a", [0.8, 0.9, 1.0]).to_dict(), _row("e", [0.5, 0.6, 0.7]).to_dict()]
    counts = {"modules": {"train.dec": 10, "frozen.vit": 20}, "trainable": 10, "frozen": 20, "total": 30}
    img = rng.random((1, 16, 16))
    mask = np.zeros((16, 16), np.uint8)
    mask[4:9, 4:9] = 1
    maps = {"frozen": (rng.random((16, 16)) * 255).astype(np.uint8), "adapters": mask * 255}
    for d in ("x", "y"):
        plot_training_curves(log, tmp_path / d / "curves.png")
        plot_ablation(rows, tmp_path / d / "ablation.png", title="core")
        plot_param_breakdown(counts, tmp_path / d / "params.png")
        plot_similarity_panel(img, mask, maps, "prompt", tmp_path / d / "panel.png")
    for name in ("curves", "ablation", "params", "panel"):
        a = (tmp_path / "x" / f"{name}.png").read_bytes()
        assert a[:4] == b"\x89PNG" and a == (tmp_path / "y" / f"{name}.png").read_bytes()
