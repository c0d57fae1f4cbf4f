import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_rotation
from nnpforge.evaluation import (
    Histogram,
    MetricsReport,
    comparison_histograms,
    e_h2o_error,
    energy_histogram,
    evaluate_model,
    f_ang_error,
    f_mag_error,
    markdown_table,
    metrics_from_arrays,
)
from nnpforge.model import predict
from nnpforge.surrogate import SurrogateProvider

vec3 = arrays(np.float64, (5, 3), elements=st.floats(-50, 50))


class TestElementary:
    def test_e_h2o(self):
        assert e_h2o_error(-10.5, -11.0, 5) == pytest.approx(0.1)
        assert e_h2o_error(-11.5, -11.0, 5) == pytest.approx(0.1)
        assert e_h2o_error(3.0, 3.0, 2) == 0.0

    def test_e_h2o_needs_waters(self):
        with pytest.raises(ValueError):
            e_h2o_error(1.0, 0.0, 0)

    def test_f_mag(self, rng):
        f = rng.normal(size=(6, 3))
        assert np.all(f_mag_error(f, f) == 0)
        unit = f / np.linalg.norm(f, axis=1, keepdims=True)
        np.testing.assert_allclose(f_mag_error(2 * unit, unit), 1.0)
        np.testing.assert_allclose(f_mag_error(f @ random_rotation(rng).T, f), 0.0, atol=1e-12)

    def test_f_ang(self, rng):
        f = rng.normal(size=(4, 3))
        np.testing.assert_allclose(f_ang_error(f, f), 0.0, atol=1e-7)
        np.testing.assert_allclose(f_ang_error(-f, f), 1.0)
        perp = np.cross(f, rng.normal(size=(4, 3)))
        np.testing.assert_allclose(f_ang_error(perp, f), 0.5, atol=1e-12)

    def test_parallel_no_nan(self):
        a = np.array([[1e-3, 1e-3, 1e-3]])
        assert not np.isnan(f_ang_error(a * 3.0000001, a)).any()

    def test_zero_norm_undefined(self):
        out = f_ang_error([[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [1, 0, 0]])
        assert np.isnan(out[0]) and out[1] == 0.0

    @given(vec3, vec3)
    def test_angle_properties(self, a, b):
        x, y = f_ang_error(a, b), f_ang_error(b, a)
        ok = ~np.isnan(x)
        assert np.all((x[ok] >= 0) & (x[ok] <= 1))
        np.testing.assert_allclose(x[ok], y[ok], atol=1e-12)

    @given(vec3, vec3)
    def test_magnitude_triangle(self, a, b):
        assert np.all(np.abs(f_mag_error(a, b)) <= np.linalg.norm(a - b, axis=1) + 1e-9)


class TestMetrics:
    def test_hand_built(self):
        # errors per water: 0.2, 0.1, 0.3 (signed: +0.2, -0.1, +0.3)
        rep = metrics_from_arrays([-9.0, -20.5, -14.1], [-9.6, -20.2, -15.0], [3, 3, 3])
        assert rep.e_h2o_mae == pytest.approx(0.2, rel=1e-12)
        assert rep.e_h2o_rmse == pytest.approx(np.sqrt((0.04 + 0.01 + 0.09) / 3), rel=1e-12)
        assert rep.f_mag_mae is None and rep.n_samples == 3

    def test_force_aggregates(self):
        fp = np.array([[2.0, 0, 0], [0, 1.0, 0], [0, 0, 0]])
        ft = np.array([[1.0, 0, 0], [0, 0, 3.0], [1.0, 0, 0]])
        rep = metrics_from_arrays([0.0], [0.0], [1], fp, ft)
        assert rep.f_mag_mae == pytest.approx((1 + 2 + 1) / 3)
        assert rep.f_mag_bias == pytest.approx((1 - 2 - 1) / 3)
        assert rep.undefined_angle == 1
        assert rep.f_ang_mean == pytest.approx(0.25)

    def test_perfect_oracle(self, spec, nonminima):
        rep = evaluate_model(SurrogateProvider(spec), nonminima)
        assert rep.e_h2o_mae == 0 and rep.f_mag_mae == 0 and rep.f_ang_mean < 1e-7
        assert rep.model == "surrogate-A"

    def test_shuffle_invariant(self, tiny_params, nonminima):
        a = evaluate_model(tiny_params, nonminima)
        perm = np.random.default_rng(0).permutation(len(nonminima))
        b = evaluate_model(tiny_params, nonminima.subset(perm))
        for key in ("e_h2o_mae", "e_h2o_rmse", "f_mag_mae", "f_ang_mean"):
            assert getattr(a, key) == pytest.approx(getattr(b, key), rel=1e-12)

    def test_matches_single_sample_loop(self, tiny_params, nonminima):
        rep = evaluate_model(tiny_params, nonminima)
        errs, mags = [], []
        for c in nonminima:
            e, f = predict(tiny_params, [c])
            errs.append(abs(e[0] - c.energy) / c.n_waters)
            mags.extend(np.abs(np.linalg.norm(f, axis=1) - np.linalg.norm(c.forces, axis=1)))
        assert rep.e_h2o_mae == pytest.approx(np.mean(errs), rel=1e-12)
        assert rep.f_mag_mae == pytest.approx(np.mean(mags), rel=1e-12)
        assert rep.model.startswith("nnp:")

    def test_minima_skip_forces(self, tiny_params, minima):
        rep = evaluate_model(tiny_params, minima.subset(range(4)).clusters)
        assert rep.f_mag_mae is None
        rep = evaluate_model(tiny_params, [c.replace(forces=None) for c in minima.clusters[:3]], with_forces=True)
        assert rep.notes and rep.f_ang_mean is None

    def test_empty(self, tiny_params):
        with pytest.raises(ValueError):
            evaluate_model(tiny_params, [])

    def test_json(self, tiny_params, nonminima):
        rep = evaluate_model(tiny_params, nonminima, tag="nm")
        d = json.loads(rep.to_json())
        assert d["test_tag"] == "nm" and "e_h2o_pred" not in d
        assert len(rep.to_dict(include_values=True)["e_h2o_pred"]) == len(nonminima)


class TestHistogram:
    def test_constant_values(self):
        h = energy_histogram(np.full(7, -3.2), bins=10)
        assert (h.counts > 0).sum() == 1 and h.counts.sum() == 7

    @given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-100, 100)))
    def test_conservation(self, v):
        assert energy_histogram(v, bins=13).counts.sum() == len(v)

    def test_shift(self, rng):
        v = rng.uniform(0, 10, 200)
        edges = np.linspace(-2, 14, 65)
        width = edges[1] - edges[0]
        a = energy_histogram(v, edges)
        b = energy_histogram(v + 3 * width, edges)
        np.testing.assert_array_equal(a.counts[:-3], b.counts[3:])

    def test_comparison_shares_edges(self, rng):
        hs = comparison_histograms({"a": rng.normal(0, 1, 50), "b": rng.normal(4, 1, 80)})
        np.testing.assert_array_equal(hs["a"].edges, hs["b"].edges)
        assert len(hs["a"].counts) == 60 and hs["b"].counts.sum() == 80

    def test_mean_tracks_shift(self, rng):
        hs = comparison_histograms({"a": rng.normal(0, 0.5, 400), "b": rng.normal(2, 0.5, 400)})
        assert hs["b"].mean() - hs["a"].mean() == pytest.approx(2.0, abs=0.15)

    def test_csv(self, tmp_path):
        h = Histogram(np.array([0.0, 1.0, 2.0]), np.array([3, 4]))
        h.write_csv(tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines() == ["bin_left,bin_right,count", "0.0,1.0,3", "1.0,2.0,4"]

    def test_empty(self):
        with pytest.raises(ValueError):
            energy_histogram([])


def test_markdown_tables():
    rep = MetricsReport("nonminima", "m", 3, 0.1316, 0.2, f_mag_mae=8.94, f_ang_mean=0.098)
    md = markdown_table([{"host": "cpu", "initialization": "pretrain", "n_train": 1000, "report": rep}])
    lines = md.splitlines()
    assert lines[0].startswith("| Host | Dataset") and "| cpu | nonminima | pretrain | 1000 | 0.1316 | 8.94 | 0.098 |" in md
    md = markdown_table([{"initialization": "scratch", "train_set": "B", "report": rep.to_dict()}], kind="energy")
    assert "| Train Set |" in md and "0.2000" in md
    rep.f_ang_mean = None
    assert "n/a" in markdown_table([{"report": rep}])
