"""Data-augmented training with scheduled loss-decomposition measurements."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .analysis import head_deviation_sq
from .group import BlockAction, GroupSpec, sample_matrices, so3
from .losses import LossModel
from .metrics import decompose_sampled
from .models import GRAPH_HEAD, ModelHandle, loss_terms
from .tasks import Dataset, SyntheticTask, make_task

COLUMNS = (
    "step", "loss_total", "loss_mean", "loss_equiv", "percent_equiv",
    "grad_norm_total", "grad_norm_mean", "grad_norm_equiv", "grad_norm_ratio",
    "head_deviation_sq", "epsilon", "n_rotations", "seed",
)
DIVERGENCE_FACTOR = 1e6


class DivergenceError(ArithmeticError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 5000
    augmentation: bool = True
    measure_every: int = 50
    eval_rotations: int = 10
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 1 or self.measure_every < 1:
            raise ValueError("steps and measure_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_rotations < 2:
            raise ValueError("eval_rotations must be >= 2 for the bias-corrected estimators")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.lr * grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float):
    return Adam(lr) if name == "adam" else SGD(lr)


@dataclass
class MetricsTimeSeries:
    rows: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)  # step -> parameter values

    def append(self, row: dict) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("metric steps must be strictly increasing")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in COLUMNS])

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsTimeSeries":
        with open(path) as f:
            rd = csv.DictReader(f)
            if tuple(rd.fieldnames or ()) != COLUMNS:
                raise ValueError(f"unexpected metrics header {rd.fieldnames}")
            rows = [{k: (int(v) if k in ("step", "n_rotations", "seed") else float(v)) for k, v in r.items()} for r in rd]
        return cls(rows)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def gradient_norm_ratio(model: ModelHandle, loss_model: LossModel, probe: Dataset, mats: np.ndarray) -> dict:
    """Norms of the mean/equiv/total gradients over one shared rotation set."""
    terms = loss_terms(model, loss_model, probe.inputs, probe.targets, mats)
    g_total, g_mean, g_equiv = (terms[t][1] for t in ("total", "mean", "equiv"))
    n_mean = float(np.linalg.norm(g_mean))
    n_equiv = float(np.linalg.norm(g_equiv))
    ratio = n_equiv / n_mean if n_mean >= 1e-30 else math.nan
    return {
        "ratio": ratio, "norm_mean": n_mean, "norm_equiv": n_equiv, "norm_total": float(np.linalg.norm(g_total)),
        "residual": float(np.linalg.norm(g_total - g_mean - g_equiv)),
    }


def measure(model: ModelHandle, loss_model: LossModel, action: BlockAction, held: Dataset, probe: Dataset,
            group: GroupSpec, n_rotations: int, rng: np.random.Generator, step: int, seed: int) -> dict:
    _, dec = decompose_sampled(model, loss_model, action, held, group, n_rotations, rng)
    mats = sample_matrices(group, rng, len(probe) * n_rotations).reshape(len(probe), n_rotations, 3, 3)
    g = gradient_norm_ratio(model, loss_model, probe, mats)
    return {
        "step": int(step), "loss_total": dec.total, "loss_mean": dec.mean, "loss_equiv": dec.equiv,
        "percent_equiv": dec.percent, "grad_norm_total": g["norm_total"], "grad_norm_mean": g["norm_mean"],
        "grad_norm_equiv": g["norm_equiv"], "grad_norm_ratio": g["ratio"],
        "head_deviation_sq": head_deviation_sq(model) if model.kind == GRAPH_HEAD else math.nan,
        "epsilon": dec.equiv / dec.mean if dec.mean > 0 else math.nan,
        "n_rotations": int(n_rotations), "seed": int(seed),
    }


def train(model: ModelHandle, task: SyntheticTask | tuple[Dataset, Dataset], config: TrainConfig,
          rng: np.random.Generator, group: GroupSpec | None = None,
          checkpoint_steps: Sequence[int] = (), stop_after: int | None = None) -> tuple[ModelHandle, MetricsTimeSeries]:
    """Minibatch training; metrics on held-out data every ``measure_every`` steps.

    With augmentation on, every (x, y) pair in a batch gets its own uniform
    rotation each step. Measurements draw from a separate RNG stream so they
    never perturb the training trajectory.
    """
    group = group if group is not None else so3()
    train_set, held = make_task(task) if isinstance(task, SyntheticTask) else task
    loss_model = LossModel(config.loss, model.dimension)
    action = BlockAction(group, model.n_atoms)
    train_rng, measure_rng = rng.spawn(2)
    probe = held.take(slice(0, min(config.batch_size, len(held))))
    opt = make_optimizer(config.optimizer, config.learning_rate)
    series = MetricsTimeSeries()
    last = config.steps if stop_after is None else min(config.steps, stop_after)
    ident = np.broadcast_to(np.eye(3), (config.batch_size, 1, 3, 3))
    initial = None
    theta = model.params.values.copy()
    for step in range(last + 1):
        if step in checkpoint_steps:
            series.checkpoints[step] = theta.copy()
        if step % config.measure_every == 0 or step == last:
            row = measure(model, loss_model, action, held, probe, group, config.eval_rotations,
                          measure_rng, step, config.seed)
            if initial is None:
                initial = row["loss_total"]
            if not np.isfinite(row["loss_total"]) or row["loss_total"] > DIVERGENCE_FACTOR * initial:
                raise DivergenceError(f"training diverged at step {step}: loss {row['loss_total']:.3e} "
                                      f"vs initial {initial:.3e}")
            series.append(row)
        if step == last:
            break
        bsz = min(config.batch_size, len(train_set))
        idx = train_rng.choice(len(train_set), size=bsz, replace=False)
        if config.augmentation:
            mats = sample_matrices(group, train_rng, bsz).reshape(bsz, 1, 3, 3)
        else:
            mats = ident[:bsz]
        grad = loss_terms(model, loss_model, train_set.inputs[idx], train_set.targets[idx], mats, ("total",))["total"][1]
        theta = opt.step(theta, grad)
        model = model.with_values(theta)
    return model, series


def correlate_loss_vs_grad_ratio(series: MetricsTimeSeries, min_rows: int = 10) -> dict:
    """Log-log Pearson and rank Spearman between epsilon and the gradient-norm ratio."""
    eps = series.column("epsilon")
    ratio = series.column("grad_norm_ratio")
    ok = np.isfinite(eps) & np.isfinite(ratio) & (eps > 0) & (ratio > 0)
    if ok.sum() < min_rows:
        raise InsufficientDataError(f"need at least {min_rows} rows with positive ratios, have {int(ok.sum())}")
    pearson = float(stats.pearsonr(np.log(eps[ok]), np.log(ratio[ok]))[0])
    spearman = float(stats.spearmanr(eps[ok], ratio[ok])[0])
    return {"pearson_loglog": pearson, "spearman": spearman, "n_used": int(ok.sum()), "n_excluded": int((~ok).sum())}


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
