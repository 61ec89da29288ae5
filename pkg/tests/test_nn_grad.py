"""Finite-difference gradient checks for every layer kind.

Each layer is probed in isolation through a fixed random linear functional
L(y) = sum(y * R): the analytic input/parameter gradients from backward()
must match 64-bit central differences (step 1e-5) to better than 1e-4
relative error over >= 100 random coordinates per layer kind.
"""

import numpy as np
import pytest

from l96lab import nn

STEP = 1e-5
REL_TOL = 1e-4


def central_diff(f, arr, i, step=STEP):
    flat = arr.reshape(-1)
    old = flat[i]
    flat[i] = old + step
    lp = f()
    flat[i] = old - step
    lm = f()
    flat[i] = old
    return (lp - lm) / (2.0 * step)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def check_layer_gradients(layer, x, seed, n_coords=120):
    """Worst relative error over input and parameter coordinates."""
    rng = np.random.default_rng(seed)
    y0, cache = layer.forward(x)
    r = np.random.default_rng(seed + 1).normal(size=y0.shape)

    def loss():
        y, _ = layer.forward(x)
        return float(np.sum(y * r))

    gx, pgrads = layer.backward(cache, r)
    worst = 0.0
    checked = 0
    for arr, ana in [(x, gx)] + list(zip(layer.params(), pgrads)):
        flat_ana = ana.reshape(-1)
        size = arr.size
        for i in rng.choice(size, size=min(n_coords, size), replace=False):
            num = central_diff(loss, arr, int(i))
            worst = max(worst, rel_err(num, flat_ana[int(i)]))
            checked += 1
    return worst, checked


class TestLayerGradients:
    def test_dense(self):
        layer = nn.Dense(50, 30)
        layer.w[...] = np.random.default_rng(1).normal(0, 0.2, layer.w.shape)
        layer.b[...] = np.random.default_rng(2).normal(0, 0.1, layer.b.shape)
        x = np.random.default_rng(3).normal(size=(4, 50))
        worst, checked = check_layer_gradients(layer, x, seed=100)
        assert checked >= 100
        assert worst < REL_TOL, f"dense worst rel err {worst}"

    def test_conv1d(self):
        layer = nn.Conv1D(16, 32, 3)
        layer.w[...] = np.random.default_rng(4).normal(0, 0.2, layer.w.shape)
        layer.b[...] = np.random.default_rng(5).normal(0, 0.1, layer.b.shape)
        x = np.random.default_rng(6).normal(size=(3, 20, 16))
        worst, checked = check_layer_gradients(layer, x, seed=101)
        assert checked >= 100
        assert worst < REL_TOL, f"conv1d worst rel err {worst}"

    def test_conv2d(self):
        layer = nn.Conv2D(4, 8, 3, 3)
        layer.w[...] = np.random.default_rng(7).normal(0, 0.2, layer.w.shape)
        layer.b[...] = np.random.default_rng(8).normal(0, 0.1, layer.b.shape)
        x = np.random.default_rng(9).normal(size=(3, 12, 12, 4))
        worst, checked = check_layer_gradients(layer, x, seed=102)
        assert checked >= 100
        assert worst < REL_TOL, f"conv2d worst rel err {worst}"

    def test_maxpool1d(self):
        x = np.random.default_rng(10).normal(size=(3, 20, 8))
        worst, checked = check_layer_gradients(nn.MaxPool1D(2), x, seed=103)
        assert checked >= 100
        assert worst < REL_TOL, f"maxpool1d worst rel err {worst}"

    def test_maxpool2d(self):
        x = np.random.default_rng(11).normal(size=(3, 12, 12, 8))
        worst, checked = check_layer_gradients(nn.MaxPool2D(2, 2), x, seed=104)
        assert checked >= 100
        assert worst < REL_TOL, f"maxpool2d worst rel err {worst}"

    def test_leaky_relu(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(4, 60))
        # keep coordinates away from the kink so central differences are valid
        x[np.abs(x) < 10 * STEP] = 0.1
        worst, checked = check_layer_gradients(nn.LeakyReLU(0.001), x, seed=105)
        assert checked >= 100
        assert worst < REL_TOL, f"leaky-relu worst rel err {worst}"


class TestWholeModelGradients:
    """End-to-end sanity: weighted-MSE gradients through each architecture.

    Deep stacks accumulate finite-difference noise at ReLU kinks and pool
    ties, so the tolerance here is looser than the per-layer contract.
    """

    @pytest.mark.parametrize(
        "build,shape", [(nn.build_fc, (20, 20)), (nn.build_conv1d, (20, 16)), (nn.build_conv2d, (20, 20))]
    )
    def test_model(self, build, shape):
        rng = np.random.default_rng(hash(shape) % 2**32)
        model = nn.init_weights(build(shape), seed=31)
        x = rng.uniform(0, 1, (2, *shape))
        t = rng.normal(size=(2, 3))
        sig = np.array([1.5, 0.8, 1.1])

        preds, caches = nn.forward(model, x)
        _, lgrad = nn.weighted_mse(preds, t, sig)
        grads = nn.backward(model, caches, lgrad)

        def loss():
            p, _ = nn.forward(model, x)
            return nn.weighted_mse(p, t, sig)[0]

        params = model.parameters()
        worst = 0.0
        for p, g in zip(params, grads):
            gflat = g.reshape(-1)
            for i in rng.choice(p.size, size=min(12, p.size), replace=False):
                num = central_diff(loss, p, int(i))
                worst = max(worst, rel_err(num, gflat[int(i)]))
        assert worst < 5e-3, f"{model.name} worst rel err {worst}"
