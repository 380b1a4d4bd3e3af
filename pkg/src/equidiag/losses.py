"""Rotation-invariant convex losses with gradients and prediction-space Hessians.

All functions accept a trailing feature axis of length D and broadcast over
any leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .group import ShapeError

MSE = "mse"
SOFTPLUS = "convex-softplus-regression"
KINDS = (MSE, SOFTPLUS)
_LOG2 = np.log(2.0)
HESSIAN_STEP = 1e-4


@dataclass(frozen=True)
class LossModel:
    kind: str
    dimension: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; choose from {KINDS}")

    @property
    def is_quadratic(self) -> bool:
        return self.kind == MSE


def _check(model: LossModel, z, y):
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.shape[-1] != model.dimension or y.shape[-1] != model.dimension:
        raise ShapeError(f"loss expects trailing dimension {model.dimension}, got {z.shape} and {y.shape}")
    return z, y


def _softplus(q):
    return np.logaddexp(0.0, q)


def loss(model: LossModel, z, y) -> np.ndarray:
    z, y = _check(model, z, y)
    q = np.sum((z - y) ** 2, axis=-1) / model.dimension
    if model.kind == MSE:
        return q
    # shifted so that loss(y, y) == 0
    return _softplus(q) - _LOG2


def loss_gradient(model: LossModel, z, y) -> np.ndarray:
    z, y = _check(model, z, y)
    d = model.dimension
    g = (2.0 / d) * (z - y)
    if model.kind == MSE:
        return g
    q = np.sum((z - y) ** 2, axis=-1, keepdims=True) / d
    return expit(q) * g


def loss_hessian(model: LossModel, z, y, step: float = HESSIAN_STEP) -> np.ndarray:
    """Hessian with respect to the prediction, shape (..., D, D).

    Exact ``(2/D) I`` for mse; central differences of the analytic gradient
    (symmetrized) for the convex kind.
    """
    z, y = _check(model, z, y)
    d = model.dimension
    if model.kind == MSE:
        return np.broadcast_to((2.0 / d) * np.eye(d), z.shape[:-1] + (d, d)).copy()
    z, y = np.broadcast_arrays(z, y)
    h = np.empty(z.shape[:-1] + (d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = step
        h[..., :, k] = (loss_gradient(model, z + e, y) - loss_gradient(model, z - e, y)) / (2 * step)
    return 0.5 * (h + np.swapaxes(h, -1, -2))


def loss_hessian_analytic(model: LossModel, z, y) -> np.ndarray:
    """Closed form: s (2/D) I + s (1 - s) (4/D^2) r r^T with s = sigmoid(|r|^2 / D)."""
    z, y = _check(model, z, y)
    d = model.dimension
    eye = np.eye(d)
    if model.kind == MSE:
        return np.broadcast_to((2.0 / d) * eye, z.shape[:-1] + (d, d)).copy()
    r = z - y
    q = np.sum(r**2, axis=-1) / d
    s = expit(q)[..., None, None]
    outer = np.einsum("...i,...j->...ij", r, r)
    return s * (2.0 / d) * eye + s * (1.0 - s) * (4.0 / d**2) * outer
