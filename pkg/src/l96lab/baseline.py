"""Closed-form ridge-regularized linear regression baseline."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ShapeMismatch, SingularSystem
from . import nn


@dataclass
class LinearModel:
    """Affine map from flattened chunks to (b, c, h)."""

    weight: np.ndarray  # (input_dim, 3)
    bias: np.ndarray  # (3,)
    ridge: float

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]


def fit_linear(features: np.ndarray, targets: np.ndarray, ridge: float = 1e-8) -> LinearModel:
    """Minimize ||Xw + b - y||^2 + ridge ||w||^2 via normal equations.

    Data is mean-centered, the symmetric positive-definite system is solved
    with a Cholesky factorization, and the bias absorbs the means.
    """
    if not ridge > 0:
        raise ValueError(f"ridge must be > 0; got {ridge}")
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if features.ndim != 2 or targets.ndim != 2 or features.shape[0] != targets.shape[0]:
        raise ShapeMismatch(f"features {features.shape} vs targets {targets.shape}")
    x_mean = features.mean(axis=0)
    y_mean = targets.mean(axis=0)
    xc = features - x_mean
    yc = targets - y_mean
    gram = xc.T @ xc
    gram[np.diag_indices_from(gram)] += ridge
    try:
        cho = scipy.linalg.cho_factor(gram, lower=True)
        weight = scipy.linalg.cho_solve(cho, xc.T @ yc)
    except scipy.linalg.LinAlgError as exc:
        raise SingularSystem(f"normal matrix failed to factor: {exc}") from exc
    if not np.isfinite(weight).all():
        raise SingularSystem("normal-equation solve produced non-finite coefficients")
    bias = y_mean - x_mean @ weight
    return LinearModel(weight=weight, bias=bias, ridge=ridge)


def predict_linear(model: LinearModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.input_dim:
        raise ShapeMismatch(f"expected (B, {model.input_dim}); got {features.shape}")
    return features @ model.weight + model.bias


def save_linear(model: LinearModel, path: str | Path, meta: dict | None = None) -> Path:
    header = {"kind": "LINEAR", "ridge": model.ridge, "meta": meta or {}}
    return nn.write_container(path, header, [model.weight, model.bias])


def load_linear(path: str | Path) -> tuple[LinearModel, dict]:
    header, arrays = nn.read_container(path)
    if header.get("kind") != "LINEAR":
        raise ShapeMismatch(f"{path}: kind {header.get('kind')!r} is not LINEAR")
    weight, bias = arrays
    return LinearModel(weight=weight, bias=bias, ridge=header["ridge"]), header.get("meta", {})
