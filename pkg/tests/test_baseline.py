"""Linear baseline: closed-form fit against an independent SVD oracle."""

import numpy as np
import pytest

from l96lab.baseline import LinearModel, fit_linear, load_linear, predict_linear, save_linear
from l96lab.errors import ShapeMismatch


def svd_ridge_oracle(features, targets, ridge):
    """Same ridge problem solved by an independent factorization (SVD)."""
    xm = features.mean(axis=0)
    ym = targets.mean(axis=0)
    xc = features - xm
    yc = targets - ym
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    w = vt.T @ ((s / (s**2 + ridge))[:, None] * (u.T @ yc))
    return w, ym - xm @ w


class TestFitLinear:
    def test_recovers_exact_linear_map(self):
        rng = np.random.default_rng(1)
        w_true = rng.normal(size=(10, 3))
        b_true = rng.normal(size=3)
        x = rng.normal(size=(200, 10))
        y = x @ w_true + b_true
        model = fit_linear(x, y)
        np.testing.assert_allclose(model.weight, w_true, atol=1e-8)
        np.testing.assert_allclose(model.bias, b_true, atol=1e-8)
        resid = predict_linear(model, x) - y
        assert np.abs(resid).max() < 1e-8

    def test_constant_targets(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 6))
        y = np.tile([3.0, -1.0, 0.5], (50, 1))
        model = fit_linear(x, y)
        assert np.abs(model.weight).max() < 1e-6
        np.testing.assert_allclose(model.bias, [3.0, -1.0, 0.5], atol=1e-8)

    def test_matches_svd_oracle_50x10(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(50, 10))
        y = rng.normal(size=(50, 3))
        model = fit_linear(x, y, ridge=1e-8)
        w, b = svd_ridge_oracle(x, y, 1e-8)
        np.testing.assert_allclose(model.weight, w, atol=1e-8)
        np.testing.assert_allclose(model.bias, b, atol=1e-8)

    def test_matches_svd_oracle_many_systems(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = int(rng.integers(30, 120))
            d = int(rng.integers(5, 25))
            x = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0)
            y = rng.normal(size=(n, 3))
            model = fit_linear(x, y, ridge=1e-8)
            w, _ = svd_ridge_oracle(x, y, 1e-8)
            assert np.abs(model.weight - w).max() < 1e-8

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(80, 12))
        y = rng.normal(size=(80, 3))
        model = fit_linear(x, y, ridge=1e-8)
        xc = x - x.mean(axis=0)
        resid = predict_linear(model, x) - y
        # X_c^T r = -ridge * w up to roundoff
        lhs = xc.T @ resid
        assert np.abs(lhs + model.ridge * model.weight).max() < 1e-9

    def test_train_residual_mean_zero(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(60, 8))
        y = rng.normal(size=(60, 3))
        model = fit_linear(x, y)
        resid = predict_linear(model, x) - y
        assert np.abs(resid.mean(axis=0)).max() < 1e-10

    def test_ridge_must_be_positive(self):
        with pytest.raises(ValueError):
            fit_linear(np.ones((5, 2)), np.ones((5, 3)), ridge=0.0)


class TestPredictLinear:
    def test_zero_weights_replicate_bias(self):
        model = LinearModel(weight=np.zeros((4, 3)), bias=np.array([1.0, 2.0, 3.0]), ridge=1e-8)
        out = predict_linear(model, np.random.default_rng(0).normal(size=(7, 4)))
        assert np.array_equal(out, np.tile([1.0, 2.0, 3.0], (7, 1)))

    def test_affinity(self):
        rng = np.random.default_rng(7)
        model = LinearModel(weight=rng.normal(size=(5, 3)), bias=rng.normal(size=3), ridge=1e-8)
        a = rng.normal(size=(6, 5))
        b = rng.normal(size=(6, 5))
        lhs = predict_linear(model, a + b)
        rhs = predict_linear(model, a) + predict_linear(model, b) - model.bias
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_shape_mismatch(self):
        model = LinearModel(weight=np.zeros((4, 3)), bias=np.zeros(3), ridge=1e-8)
        with pytest.raises(ShapeMismatch):
            predict_linear(model, np.zeros((2, 5)))


class TestLinearCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        model = LinearModel(weight=rng.normal(size=(400, 3)), bias=rng.normal(size=3), ridge=1e-8)
        save_linear(model, tmp_path / "lin.l96w", meta={"task": "xy"})
        back, meta = load_linear(tmp_path / "lin.l96w")
        assert meta["task"] == "xy"
        assert np.array_equal(back.weight, model.weight)
        assert np.array_equal(back.bias, model.bias)
        assert back.ridge == model.ridge
