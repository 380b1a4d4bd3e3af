"""Twisted and twirled predictions and the loss decomposition they induce.

For a model f and rotation T the twisted prediction is T^-1 f(T x). Its group
average (the twirled prediction) is exactly equivariant, and the augmented
loss splits into the loss of the twirled prediction (``mean``) plus the
spread of twisted predictions around it (``equiv``). Under MSE the split is
exact; for other convex losses ``equiv`` is defined as the difference.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .group import (
    BlockAction,
    GroupElement,
    GroupError,
    GroupSpec,
    ShapeError,
    enumerate_group,
    rotate_blocks,
    rotate_blocks_inverse,
    sample_matrices,
)
from .losses import LossModel, loss, loss_hessian
from .tasks import Dataset

DEFAULT_ROTATIONS = 10
JENSEN_SLACK = 1e-12
ZERO_LOSS = 1e-30
_CHUNK_ROWS = 8192


class ModelEvaluationError(RuntimeError):
    pass


class DecompositionError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TwistedBatch:
    predictions: np.ndarray  # (N, D)
    elements: np.ndarray  # (N, 3, 3)

    @property
    def sample_count(self) -> int:
        return len(self.predictions)


@dataclass(frozen=True)
class LossDecomposition:
    total: float
    mean: float
    equiv: float
    percent: float
    approximate: bool = False

    def as_dict(self) -> dict:
        return {"loss_total": self.total, "loss_mean": self.mean, "loss_equiv": self.equiv,
                "percent_equiv": self.percent, "approximate": self.approximate}


@dataclass(frozen=True)
class EstimatorReport:
    mu_hat: np.ndarray  # (S, D) twirled-prediction estimates
    sigma_hat_sq: np.ndarray  # (S,) divide-by-N variance, averaged over D
    mean_loss_unbiased: float
    equiv_loss_unbiased: float
    percent_bias_corrected: float
    rotation_count: int
    mean_loss_naive: float
    equiv_loss_naive: float
    total_loss: float
    per_sample_total: np.ndarray = field(repr=False)
    per_sample_equiv: np.ndarray = field(repr=False)  # bias-corrected
    approximate: bool = False

    def stderr(self, name: str = "equiv") -> float:
        v = self.per_sample_equiv if name == "equiv" else self.per_sample_total
        return float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")

    def as_dict(self) -> dict:
        return {
            "mean_loss_unbiased": self.mean_loss_unbiased,
            "equiv_loss_unbiased": self.equiv_loss_unbiased,
            "percent_bias_corrected": self.percent_bias_corrected,
            "mean_loss_naive": self.mean_loss_naive,
            "equiv_loss_naive": self.equiv_loss_naive,
            "total_loss": self.total_loss,
            "rotation_count": self.rotation_count,
            "sigma_hat_sq_mean": float(np.mean(self.sigma_hat_sq)),
            "equiv_stderr": self.stderr("equiv"),
            "approximate": self.approximate,
        }


def _percent(equiv: float, total: float) -> float:
    return equiv / total if total >= ZERO_LOSS else math.nan


def _as_mats(elements) -> np.ndarray:
    if isinstance(elements, GroupSpec):
        return elements.matrices()
    if len(elements) and isinstance(elements[0], GroupElement):
        return np.stack([g.matrix for g in elements])
    return np.asarray(elements, dtype=float)


def _evaluate(model: Callable, x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for lo in range(0, len(x), _CHUNK_ROWS):
        out[lo:lo + _CHUNK_ROWS] = model(x[lo:lo + _CHUNK_ROWS])
    return out


def twisted_predictions(model: Callable, x: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """T^-1 f(T x) for every sample and rotation.

    ``x`` is (S, D); ``mats`` is (R, 3, 3) shared by all samples or
    (S, R, 3, 3) per sample. Returns (S, R, D).
    """
    x = np.asarray(x, dtype=float)
    s, d = x.shape
    if mats.ndim == 3:
        mats = np.broadcast_to(mats, (s,) + mats.shape)
    r = mats.shape[1]
    xr = rotate_blocks(mats, np.broadcast_to(x[:, None, :], (s, r, d)))
    z = _evaluate(model, xr.reshape(-1, d)).reshape(s, r, d)
    return rotate_blocks_inverse(mats, z)


def twist(model: Callable, action: BlockAction, x, elements) -> TwistedBatch:
    x = np.asarray(x, dtype=float)
    if x.shape != (action.dimension,):
        raise ShapeError(f"expected a vector of length {action.dimension}, got {x.shape}")
    mats = _as_mats(elements)
    try:
        preds = twisted_predictions(model, x[None], mats)[0]
    except Exception as exc:
        for i, m in enumerate(mats):
            try:
                twisted_predictions(model, x[None], m[None])
            except Exception:
                raise ModelEvaluationError(f"model evaluation failed on rotation sample {i}") from exc
        raise
    return TwistedBatch(preds, mats)


def twirl(batch: TwistedBatch) -> np.ndarray:
    if batch.sample_count == 0:
        raise ValueError("cannot twirl an empty batch")
    return batch.predictions.mean(axis=0)


def twirled_function(model: Callable, group: GroupSpec) -> Callable:
    """The exactly equivariant group average of ``model`` over a finite group."""
    mats = _as_mats(enumerate_group(group))

    def mu(x):
        x = np.atleast_2d(x)
        return twisted_predictions(model, x, mats).mean(axis=1)

    return mu


def _check_dataset(action: BlockAction, dataset: Dataset):
    if dataset.dimension != action.dimension:
        raise ShapeError(f"dataset dimension {dataset.dimension} does not match action dimension {action.dimension}")


def _finite_mats(group: GroupSpec) -> np.ndarray:
    if not group.is_finite:
        raise GroupError("exact decomposition needs a finite group; use decompose_sampled for SO(3)")
    return _as_mats(enumerate_group(group))


def decompose_exact(model: Callable, loss_model: LossModel, action: BlockAction, dataset: Dataset,
                    group: GroupSpec) -> LossDecomposition:
    """Exact decomposition by enumerating every group element."""
    _check_dataset(action, dataset)
    mats = _finite_mats(group)
    zt = twisted_predictions(model, dataset.inputs, mats)
    return decompose_twisted(loss_model, zt, dataset.targets)


def decompose_twisted(loss_model: LossModel, zt: np.ndarray, y: np.ndarray) -> LossDecomposition:
    """Population decomposition when ``zt`` holds the whole (uniform) group orbit."""
    mu = zt.mean(axis=1)
    total = float(np.mean(loss(loss_model, zt, y[:, None, :])))
    mean = float(np.mean(loss(loss_model, mu, y)))
    if loss_model.is_quadratic:
        equiv = float(np.mean(np.sum((zt - mu[:, None]) ** 2, axis=-1)) / zt.shape[-1])
        if abs(total - (mean + equiv)) > 1e-10 * max(total, ZERO_LOSS):
            raise DecompositionError(f"MSE decomposition does not reconcile: {total} vs {mean} + {equiv}")
        return LossDecomposition(total, mean, equiv, _percent(equiv, total))
    equiv = total - mean
    if -JENSEN_SLACK < equiv < 0.0:
        equiv = 0.0
    return LossDecomposition(total, mean, equiv, _percent(equiv, total))


def estimate_from_twisted(loss_model: LossModel, zt: np.ndarray, y: np.ndarray) -> tuple[EstimatorReport, LossDecomposition]:
    """Bias-corrected estimators from N sampled twisted predictions per sample."""
    s, n, d = zt.shape
    if n < 2:
        raise ValueError("bias correction needs at least 2 rotations per sample (N/(N-1) undefined)")
    mu = zt.mean(axis=1)
    dev = np.sum((zt - mu[:, None]) ** 2, axis=-1)
    sigma_sq = dev.mean(axis=1) / d
    per_total = loss(loss_model, zt, y[:, None, :]).mean(axis=1)
    per_mean_naive = loss(loss_model, mu, y)
    if loss_model.is_quadratic:
        per_equiv_naive = sigma_sq
    else:
        per_equiv_naive = np.maximum(per_total - per_mean_naive, 0.0)
    per_equiv = n / (n - 1) * per_equiv_naive
    per_mean = per_total - per_equiv
    total = float(per_total.mean())
    equiv = float(per_equiv.mean())
    mean = float(per_mean.mean())
    percent = _percent(equiv, total)
    approx = not loss_model.is_quadratic
    report = EstimatorReport(
        mu_hat=mu, sigma_hat_sq=sigma_sq, mean_loss_unbiased=mean, equiv_loss_unbiased=equiv,
        percent_bias_corrected=percent, rotation_count=n, mean_loss_naive=float(per_mean_naive.mean()),
        equiv_loss_naive=float(per_equiv_naive.mean()), total_loss=total,
        per_sample_total=per_total, per_sample_equiv=per_equiv, approximate=approx,
    )
    return report, LossDecomposition(total, mean, equiv, percent, approx)


def decompose_sampled(model: Callable, loss_model: LossModel, action: BlockAction, dataset: Dataset,
                      spec: GroupSpec, n: int, rng: np.random.Generator) -> tuple[EstimatorReport, LossDecomposition]:
    """Monte Carlo decomposition with fresh rotations for every sample."""
    if n < 2:
        raise ValueError("bias correction needs at least 2 rotations per sample (N/(N-1) undefined)")
    _check_dataset(action, dataset)
    s = len(dataset)
    mats = sample_matrices(spec, rng, s * n).reshape(s, n, 3, 3)
    zt = twisted_predictions(model, dataset.inputs, mats)
    return estimate_from_twisted(loss_model, zt, dataset.targets)


def second_order_equiv_error(model: Callable, loss_model: LossModel, action: BlockAction, dataset: Dataset,
                             group: GroupSpec) -> float:
    """Half the trace of loss Hessian times twisted covariance, averaged over data."""
    _check_dataset(action, dataset)
    mats = _finite_mats(group)
    zt = twisted_predictions(model, dataset.inputs, mats)
    mu = zt.mean(axis=1)
    delta = zt - mu[:, None]
    cov = np.einsum("sri,srj->sij", delta, delta) / zt.shape[1]
    h = loss_hessian(loss_model, mu, dataset.targets)
    return float(0.5 * np.mean(np.einsum("sij,sji->s", h, cov)))


@dataclass
class BootstrapTable:
    rows: list  # (n, percent_mean, percent_stderr)
    repeats: int
    few_repeats: bool = False

    def stderr_at(self, n: int) -> float:
        for row in self.rows:
            if row[0] == n:
                return row[2]
        raise KeyError(n)


def sensitivity_bootstrap(model: Callable, loss_model: LossModel, action: BlockAction, dataset: Dataset,
                          spec: GroupSpec, max_n: int, repeats: int, rng: np.random.Generator,
                          ns: Sequence[int] | None = None) -> BootstrapTable:
    """Standard error of the corrected percent estimate versus rotation count.

    Twisted predictions are computed once for ``max_n`` rotations per sample;
    each row resamples ``n`` of them with replacement ``repeats`` times.
    """
    if max_n < 2:
        raise ValueError("max_n must be at least 2")
    few = repeats < 10
    if few:
        warnings.warn(f"only {repeats} bootstrap repeats; standard errors are unreliable", stacklevel=2)
    _check_dataset(action, dataset)
    s = len(dataset)
    mats = sample_matrices(spec, rng, s * max_n).reshape(s, max_n, 3, 3)
    zt = twisted_predictions(model, dataset.inputs, mats)
    y = dataset.targets
    row_loss = loss(loss_model, zt, y[:, None, :])  # (S, max_n)
    rows_idx = np.arange(s)[:, None]
    rows = []
    for n in (ns if ns is not None else range(2, max_n + 1)):
        est = np.empty(repeats)
        for k in range(repeats):
            idx = rng.integers(0, max_n, size=(s, n))
            sub = zt[rows_idx, idx]
            mu = sub.mean(axis=1)
            tot = row_loss[rows_idx, idx].mean(axis=1)
            if loss_model.is_quadratic:
                eq = np.sum((sub - mu[:, None]) ** 2, axis=(1, 2)) / (n * sub.shape[-1])
            else:
                eq = np.maximum(tot - loss(loss_model, mu, y), 0.0)
            t = tot.sum()
            est[k] = (n / (n - 1)) * eq.sum() / t if t >= ZERO_LOSS else 0.0
        se = float(np.std(est, ddof=1)) if repeats > 1 else float("nan")
        rows.append((int(n), float(est.mean()), se))
    return BootstrapTable(rows, repeats, few)
