import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from rankpyr.data import synth_corpus, load_sample
from rankpyr.density import DensityMap, HeadPointSet, fixed_kernel_density
from rankpyr.errors import InvalidInput
from rankpyr.evaluation import (
    DensityCounter,
    ModelCounter,
    build_report,
    evaluate_oracle,
    export_density,
    export_overlay,
    heat_layer,
    import_density,
    mae_rmse,
    rank_audit,
)
from rankpyr.model import DreamNet, ModelConfig


def test_mae_rmse_worked_example():
    mae, rmse = mae_rmse([10, 20], [12, 16])
    assert mae == pytest.approx(3.0)
    assert rmse == pytest.approx(math.sqrt(10))


def test_perfect_prediction():
    assert mae_rmse([4.0, 7.0], [4.0, 7.0]) == (0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=1, max_size=40))
def test_mae_never_exceeds_rmse(pairs):
    p, t = zip(*pairs)
    mae, rmse = mae_rmse(p, t)
    assert mae <= rmse * (1 + 1e-12) + 1e-12


def test_mae_rmse_bad_input():
    with pytest.raises(InvalidInput):
        mae_rmse([], [])
    with pytest.raises(InvalidInput):
        mae_rmse([1, 2], [1])


def test_report_save(tmp_path):
    rep = build_report(["a", "b"], [1.0, 5.0], [2.0, 5.0])
    rep.save(tmp_path / "r.json", tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,predicted,true,abs_error"
    assert len(lines) == 3
    assert rep.mae == 0.5


def gt_samples(tmp_path, n=4):
    es = synth_corpus(tmp_path / "c", n, (5, 40), seed=7, image_size=(64, 64))
    return [load_sample(e, True, {"kernel": "fixed", "sigma": 3.0}) for e in es]


def test_oracle_mae_tiny(tmp_path):
    rep = evaluate_oracle(gt_samples(tmp_path))
    assert rep.mae <= 1e-3


def test_gt_oracle_audit_has_no_violations(tmp_path):
    dens = [torch.from_numpy(s.density.grid) for s in gt_samples(tmp_path)]
    res = rank_audit(DensityCounter((2, 4, 8)), dens, M=4, r=0.75, n_centers=8, seed=1)
    assert res.violation_rate == 0.0
    assert res.n_pairs == 4 * 8 * 3 * 10


def test_audit_on_model_counts_pairs():
    torch.manual_seed(0)
    m = DreamNet(ModelConfig(decoder_width=4, decoder_channels=(4,) * 6)).eval()
    res = rank_audit(ModelCounter(m), [torch.rand(3, 64, 64)], M=2, n_centers=2, seed=0)
    assert res.n_pairs == 2 * 3 * 3
    assert 0.0 <= res.violation_rate <= 1.0
    assert set(res.per_level) == {0, 1, 2}


def test_density_export_roundtrip(tmp_path):
    d = fixed_kernel_density(HeadPointSet(np.array([[3.0, 4.0], [20.0, 11.0]]), (24, 32)), 2.0)
    export_density(d, tmp_path / "d.dmap")
    back = import_density(tmp_path / "d.dmap")
    assert back.grid.tobytes() == d.grid.tobytes()
    assert abs(back.mass - d.mass) <= 1e-6 * d.mass


def test_zero_density_layer_transparent():
    assert not heat_layer(np.zeros((5, 6)))[..., 3].any()


def test_overlay_zero_density_leaves_image(tmp_path):
    img = np.random.default_rng(0).random((40, 50, 3)).astype(np.float32)
    label = export_overlay(img, np.zeros((40, 50), np.float32), tmp_path / "o.png")
    assert label == "count = 0.00"
    assert (tmp_path / "o.png").stat().st_size > 0


def test_overlay_label_matches_integral(tmp_path):
    g = np.full((10, 10), 0.1234, np.float32)
    label = export_overlay(np.zeros((10, 10, 3), np.float32), DensityMap(g), tmp_path / "o.png")
    assert abs(float(label.split("=")[1]) - float(g.sum(dtype=np.float64))) <= 0.01
    with Image.open(tmp_path / "o.png") as im:
        assert im.size[0] > 0
