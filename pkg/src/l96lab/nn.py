"""Minimal dense/convolutional network engine with hand-derived backprop.

Everything runs in float64 numpy. A model is a flat list of layers ending
in a 3-unit linear head (predictions for b, c, h). Layers expose

    forward(x)            -> (y, cache)
    backward(cache, gy)   -> (gx, [param grads])

and convolutions use valid padding with stride 1. Batches enter as
(B, height, width) chunk stacks; a trailing singleton channel axis is
accepted and squeezed, and pixels are centered (shifted by -0.5) before
the first layer since chunks arrive min-max scaled to [0, 1].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NonPositiveSigma, ShapeMismatch, StaleCache

CHECKPOINT_MAGIC = b"L96W"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIQ")  # magic, version, json header length


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Dense:
    """Affine map (B, n_in) -> (B, n_out)."""

    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.w = np.zeros((n_in, n_out))
        self.b = np.zeros(n_out)

    def params(self):
        return [self.w, self.b]

    def fan_in(self) -> int:
        return self.n_in

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"dense expects (B, {self.n_in}); got {x.shape}")
        return x @ self.w + self.b, x

    def backward(self, cache, gy):
        x = cache
        if gy.shape != (x.shape[0], self.n_out) or x.shape[1] != self.n_in:
            raise StaleCache(f"dense cache/grad shapes disagree: {x.shape} vs {gy.shape}")
        return gy @ self.w.T, [x.T @ gy, gy.sum(axis=0)]

    def spec(self):
        return {"kind": "dense", "n_in": self.n_in, "n_out": self.n_out}


class LeakyReLU:
    """max(x, alpha*x); slope alpha on the negative side."""

    def __init__(self, alpha: float = 0.001):
        if not alpha > 0:
            raise ValueError(f"alpha must be > 0; got {alpha}")
        self.alpha = alpha

    def params(self):
        return []

    def forward(self, x):
        return np.where(x > 0, x, self.alpha * x), x

    def backward(self, cache, gy):
        x = cache
        if gy.shape != x.shape:
            raise StaleCache(f"leaky-relu cache/grad shapes disagree: {x.shape} vs {gy.shape}")
        return gy * np.where(x > 0, 1.0, self.alpha), []

    def spec(self):
        return {"kind": "leaky_relu", "alpha": self.alpha}


class Flatten:
    def params(self):
        return []

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, gy):
        shape = cache
        if gy.shape[0] != shape[0]:
            raise StaleCache("flatten cache/grad batch sizes disagree")
        return gy.reshape(shape), []

    def spec(self):
        return {"kind": "flatten"}


class Conv1D:
    """Valid 1-D convolution along time: (B, T, C) -> (B, T-k+1, F)."""

    def __init__(self, in_channels: int, filters: int, kernel: int):
        if kernel < 1:
            raise ValueError(f"kernel must be >= 1; got {kernel}")
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = kernel
        self.w = np.zeros((kernel, in_channels, filters))
        self.b = np.zeros(filters)

    def params(self):
        return [self.w, self.b]

    def fan_in(self) -> int:
        return self.kernel * self.in_channels

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeMismatch(f"conv1d expects (B, T, {self.in_channels}); got {x.shape}")
        if x.shape[1] < self.kernel:
            raise ShapeMismatch(f"conv1d kernel {self.kernel} exceeds time extent {x.shape[1]}")
        t_out = x.shape[1] - self.kernel + 1
        # sum of shifted matmuls; avoids materializing an im2col gather
        y = np.zeros((x.shape[0], t_out, self.filters))
        for k in range(self.kernel):
            y += x[:, k : k + t_out, :] @ self.w[k]
        y += self.b
        return y, x

    def backward(self, cache, gy):
        x = cache
        t_out = x.shape[1] - self.kernel + 1
        if gy.shape != (x.shape[0], t_out, self.filters):
            raise StaleCache(f"conv1d cache/grad shapes disagree: {x.shape} vs {gy.shape}")
        gw = np.empty_like(self.w)
        gx = np.zeros_like(x)
        for k in range(self.kernel):
            gw[k] = np.tensordot(x[:, k : k + t_out, :], gy, axes=([0, 1], [0, 1]))
            gx[:, k : k + t_out, :] += gy @ self.w[k].T
        gb = gy.sum(axis=(0, 1))
        return gx, [gw, gb]

    def spec(self):
        return {
            "kind": "conv1d",
            "in_channels": self.in_channels,
            "filters": self.filters,
            "kernel": self.kernel,
        }


class Conv2D:
    """Valid 2-D convolution: (B, H, W, C) -> (B, H-kh+1, W-kw+1, F).

    A 3-D input (B, H, W) is treated as single-channel.
    """

    def __init__(self, in_channels: int, filters: int, kernel_h: int, kernel_w: int):
        if kernel_h < 1 or kernel_w < 1:
            raise ValueError(f"kernel sizes must be >= 1; got ({kernel_h}, {kernel_w})")
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_h = kernel_h
        self.kernel_w = kernel_w
        self.w = np.zeros((kernel_h, kernel_w, in_channels, filters))
        self.b = np.zeros(filters)

    def params(self):
        return [self.w, self.b]

    def fan_in(self) -> int:
        return self.kernel_h * self.kernel_w * self.in_channels

    def forward(self, x):
        squeezed = False
        if x.ndim == 3 and self.in_channels == 1:
            x = x[..., None]
            squeezed = True
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeMismatch(f"conv2d expects (B, H, W, {self.in_channels}); got {x.shape}")
        if x.shape[1] < self.kernel_h or x.shape[2] < self.kernel_w:
            raise ShapeMismatch(
                f"conv2d kernel ({self.kernel_h}, {self.kernel_w}) exceeds input {x.shape[1:3]}"
            )
        h_out = x.shape[1] - self.kernel_h + 1
        w_out = x.shape[2] - self.kernel_w + 1
        # sum of shifted matmuls; avoids materializing an im2col gather
        y = np.zeros((x.shape[0], h_out, w_out, self.filters))
        for i in range(self.kernel_h):
            for j in range(self.kernel_w):
                y += x[:, i : i + h_out, j : j + w_out, :] @ self.w[i, j]
        y += self.b
        return y, (x, squeezed)

    def backward(self, cache, gy):
        x, squeezed = cache
        h_out = x.shape[1] - self.kernel_h + 1
        w_out = x.shape[2] - self.kernel_w + 1
        if gy.shape != (x.shape[0], h_out, w_out, self.filters):
            raise StaleCache(f"conv2d cache/grad shapes disagree: {x.shape} vs {gy.shape}")
        gmat = np.ascontiguousarray(gy).reshape(-1, self.filters)
        gw = np.empty_like(self.w)
        gx = np.zeros_like(x)
        for i in range(self.kernel_h):
            for j in range(self.kernel_w):
                sl = np.ascontiguousarray(x[:, i : i + h_out, j : j + w_out, :])
                gw[i, j] = sl.reshape(-1, self.in_channels).T @ gmat
                gx[:, i : i + h_out, j : j + w_out, :] += (gmat @ self.w[i, j].T).reshape(
                    x.shape[0], h_out, w_out, self.in_channels
                )
        gb = gy.sum(axis=(0, 1, 2))
        if squeezed:
            gx = gx[..., 0]
        return gx, [gw, gb]

    def spec(self):
        return {
            "kind": "conv2d",
            "in_channels": self.in_channels,
            "filters": self.filters,
            "kernel_h": self.kernel_h,
            "kernel_w": self.kernel_w,
        }


class MaxPool1D:
    """Non-overlapping max pooling along time; remainder steps are dropped.

    Gradient routes to the first maximal element of each window.
    """

    def __init__(self, size: int):
        if size < 1:
            raise ValueError(f"pool size must be >= 1; got {size}")
        self.size = size

    def params(self):
        return []

    def forward(self, x):
        if x.ndim != 3:
            raise ShapeMismatch(f"maxpool1d expects (B, T, C); got {x.shape}")
        b, t, c = x.shape
        t_out = t // self.size
        xv = x[:, : t_out * self.size].reshape(b, t_out, self.size, c)
        idx = xv.argmax(axis=2)
        y = np.take_along_axis(xv, idx[:, :, None, :], axis=2)[:, :, 0, :]
        return y, (x.shape, idx)

    def backward(self, cache, gy):
        shape, idx = cache
        b, t, c = shape
        t_out = t // self.size
        if gy.shape != (b, t_out, c):
            raise StaleCache(f"maxpool1d cache/grad shapes disagree: {shape} vs {gy.shape}")
        gwin = np.zeros((b, t_out, self.size, c))
        np.put_along_axis(gwin, idx[:, :, None, :], gy[:, :, None, :], axis=2)
        gx = np.zeros(shape)
        gx[:, : t_out * self.size] = gwin.reshape(b, t_out * self.size, c)
        return gx, []

    def spec(self):
        return {"kind": "maxpool1d", "size": self.size}


class MaxPool2D:
    """Non-overlapping 2-D max pooling with floor semantics on both axes.

    Ties go to the first maximal element in row-major window order.
    """

    def __init__(self, size_h: int, size_w: int):
        if size_h < 1 or size_w < 1:
            raise ValueError(f"pool sizes must be >= 1; got ({size_h}, {size_w})")
        self.size_h = size_h
        self.size_w = size_w

    def params(self):
        return []

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeMismatch(f"maxpool2d expects (B, H, W, C); got {x.shape}")
        b, h, w, c = x.shape
        ho, wo = h // self.size_h, w // self.size_w
        xc = x[:, : ho * self.size_h, : wo * self.size_w]
        xv = (
            xc.reshape(b, ho, self.size_h, wo, self.size_w, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, ho, wo, self.size_h * self.size_w, c)
        )
        idx = xv.argmax(axis=3)
        y = np.take_along_axis(xv, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        return y, (x.shape, idx)

    def backward(self, cache, gy):
        shape, idx = cache
        b, h, w, c = shape
        ho, wo = h // self.size_h, w // self.size_w
        if gy.shape != (b, ho, wo, c):
            raise StaleCache(f"maxpool2d cache/grad shapes disagree: {shape} vs {gy.shape}")
        gwin = np.zeros((b, ho, wo, self.size_h * self.size_w, c))
        np.put_along_axis(gwin, idx[:, :, :, None, :], gy[:, :, :, None, :], axis=3)
        gx = np.zeros(shape)
        gx[:, : ho * self.size_h, : wo * self.size_w] = (
            gwin.reshape(b, ho, wo, self.size_h, self.size_w, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, ho * self.size_h, wo * self.size_w, c)
        )
        return gx, []

    def spec(self):
        return {"kind": "maxpool2d", "size_h": self.size_h, "size_w": self.size_w}


_LAYER_KINDS = {
    "dense": lambda d: Dense(d["n_in"], d["n_out"]),
    "leaky_relu": lambda d: LeakyReLU(d["alpha"]),
    "flatten": lambda d: Flatten(),
    "conv1d": lambda d: Conv1D(d["in_channels"], d["filters"], d["kernel"]),
    "conv2d": lambda d: Conv2D(d["in_channels"], d["filters"], d["kernel_h"], d["kernel_w"]),
    "maxpool1d": lambda d: MaxPool1D(d["size"]),
    "maxpool2d": lambda d: MaxPool2D(d["size_h"], d["size_w"]),
}


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

LEAKY_ALPHA = 0.001


@dataclass
class ModelSpec:
    """Ordered layer list ending in a linear Dense(3) head."""

    name: str
    input_shape: tuple[int, int]  # (height, width) of one chunk
    layers: list = field(default_factory=list)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.spec() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = [_LAYER_KINDS[ls["kind"]](ls) for ls in d["layers"]]
        return cls(name=d["name"], input_shape=tuple(d["input_shape"]), layers=layers)


def build_fc(input_shape: tuple[int, int]) -> ModelSpec:
    """Flatten -> 400 -> 200 -> 60 dense stack with leaky-ReLU, linear 3-head."""
    h, w = input_shape
    layers = [
        Flatten(),
        Dense(h * w, 400), LeakyReLU(LEAKY_ALPHA),
        Dense(400, 200), LeakyReLU(LEAKY_ALPHA),
        Dense(200, 60), LeakyReLU(LEAKY_ALPHA),
        Dense(60, 3),
    ]
    return ModelSpec(name="fc", input_shape=(h, w), layers=layers)


def build_conv1d(input_shape: tuple[int, int]) -> ModelSpec:
    """Two 32-filter size-3 convolutions over time (variables as channels),
    one pool, then 128/60 dense layers and the linear 3-head."""
    h, w = input_shape
    t_out = (h - 2 - 2) // 2  # two valid convs then pool-2, floor
    layers = [
        Conv1D(w, 32, 3), LeakyReLU(LEAKY_ALPHA),
        Conv1D(32, 32, 3), LeakyReLU(LEAKY_ALPHA),
        MaxPool1D(2),
        Flatten(),
        Dense(t_out * 32, 128), LeakyReLU(LEAKY_ALPHA),
        Dense(128, 60), LeakyReLU(LEAKY_ALPHA),
        Dense(60, 3),
    ]
    return ModelSpec(name="conv1d", input_shape=(h, w), layers=layers)


def build_conv2d(input_shape: tuple[int, int]) -> ModelSpec:
    """Conv1D head mirrored in 2-D: two 32-filter 3x3 convolutions, one
    2x2 pool, then 128/60 dense layers and the linear 3-head."""
    h, w = input_shape
    ho = (h - 2 - 2) // 2
    wo = (w - 2 - 2) // 2
    layers = [
        Conv2D(1, 32, 3, 3), LeakyReLU(LEAKY_ALPHA),
        Conv2D(32, 32, 3, 3), LeakyReLU(LEAKY_ALPHA),
        MaxPool2D(2, 2),
        Flatten(),
        Dense(ho * wo * 32, 128), LeakyReLU(LEAKY_ALPHA),
        Dense(128, 60), LeakyReLU(LEAKY_ALPHA),
        Dense(60, 3),
    ]
    return ModelSpec(name="conv2d", input_shape=(h, w), layers=layers)


MODEL_BUILDERS = {"fc": build_fc, "conv1d": build_conv1d, "conv2d": build_conv2d}


def init_weights(model: ModelSpec, seed: int) -> ModelSpec:
    """Seeded uniform fan-in initialization: W ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
    biases zero. Layers are visited in declaration order."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for layer in model.layers:
        if isinstance(layer, (Dense, Conv1D, Conv2D)):
            lim = np.sqrt(6.0 / layer.fan_in())
            layer.w[...] = rng.uniform(-lim, lim, size=layer.w.shape)
            layer.b[...] = 0.0
    return model


INPUT_SHIFT = 0.5  # grayscale pixels arrive in [0, 1]; center them for the optimizer


def _canonical_batch(model: ModelSpec, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 4 and batch.shape[3] == 1:
        batch = batch[..., 0]
    h, w = model.input_shape
    if batch.ndim != 3 or batch.shape[1:] != (h, w):
        raise ShapeMismatch(f"model {model.name} expects (B, {h}, {w}); got {batch.shape}")
    return batch - INPUT_SHIFT


def forward(model: ModelSpec, batch: np.ndarray):
    """Run the model on a (B, h, w) or (B, h, w, 1) batch.

    Returns (predictions (B, 3), caches) where caches feed backward().
    """
    a = _canonical_batch(model, batch)
    caches = []
    for layer in model.layers:
        a, cache = layer.forward(a)
        caches.append(cache)
    return a, caches


def backward(model: ModelSpec, caches: list, loss_grad: np.ndarray) -> list[np.ndarray]:
    """Reverse-mode gradients for every weight/bias, flattened in
    model.parameters() order."""
    if len(caches) != len(model.layers):
        raise StaleCache(f"expected {len(model.layers)} caches; got {len(caches)}")
    grads_per_layer: list[list[np.ndarray]] = [[] for _ in model.layers]
    g = np.asarray(loss_grad, dtype=np.float64)
    for i in range(len(model.layers) - 1, -1, -1):
        g, pgrads = model.layers[i].backward(caches[i], g)
        grads_per_layer[i] = pgrads
    flat: list[np.ndarray] = []
    for pgrads in grads_per_layer:
        flat.extend(pgrads)
    return flat


def weighted_mse(pred: np.ndarray, target: np.ndarray, sigmas: np.ndarray):
    """Mean squared error with residuals scaled by per-parameter sigmas.

    L = (1 / (3 B)) sum_i sum_p ((pred_ip - target_ip) / sigma_p)^2.
    Returns (loss, dL/dpred).
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas <= 0) or not np.all(np.isfinite(sigmas)):
        raise NonPositiveSigma(f"sigmas must be finite and > 0; got {sigmas}")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    resid = (pred - target) / sigmas
    loss = float(np.mean(resid * resid))
    grad = 2.0 * (pred - target) / (sigmas * sigmas * pred.size)
    return loss, grad


@dataclass
class AdamState:
    """Adam moments bound to a parameter list; updates happen in place."""

    params: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
        if not self.v:
            self.v = [np.zeros_like(p) for p in self.params]


def adam_update(state: AdamState, grads: list[np.ndarray]) -> None:
    """One bias-corrected Adam step over the bound parameters."""
    if len(grads) != len(state.params):
        raise ShapeMismatch(f"expected {len(state.params)} gradients; got {len(grads)}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoint container: JSON header + little-endian float64 payload per
# array in declaration order. The linear baseline reuses it with kind tag
# "LINEAR".
# ---------------------------------------------------------------------------

def write_container(path: str | Path, header: dict, arrays: list[np.ndarray]) -> Path:
    path = Path(path)
    header = dict(header)
    header["arrays"] = [list(a.shape) for a in arrays]
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def read_container(path: str | Path) -> tuple[dict, list[np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _CHECKPOINT_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, hlen = _CHECKPOINT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) < _CHECKPOINT_HEADER.size + hlen:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(raw[_CHECKPOINT_HEADER.size : _CHECKPOINT_HEADER.size + hlen])
    at = _CHECKPOINT_HEADER.size + hlen
    arrays = []
    for shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        end = at + n * 8
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(raw[at:end], dtype="<f8").astype(np.float64).reshape(shape))
        at = end
    if at != len(raw):
        raise FormatError(f"{path}: {len(raw) - at} trailing bytes")
    return header, arrays


def save_model(model: ModelSpec, path: str | Path, meta: dict | None = None) -> Path:
    header = {"kind": model.name, "spec": model.to_dict(), "meta": meta or {}}
    return write_container(path, header, model.parameters())


def load_model(path: str | Path) -> tuple[ModelSpec, dict]:
    header, arrays = read_container(path)
    model = ModelSpec.from_dict(header["spec"])
    params = model.parameters()
    if len(params) != len(arrays):
        raise FormatError(f"{path}: expected {len(params)} arrays, found {len(arrays)}")
    for p, a in zip(params, arrays):
        if p.shape != a.shape:
            raise FormatError(f"{path}: array shape {a.shape} does not match spec {p.shape}")
        p[...] = a
    return model, header.get("meta", {})
