"""Synthetic rotation-equivariant point-cloud tasks."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .group import make_rng

SPRING = "spring-forces"
AUTOENCODE = "noisy-autoencode"
ISOTROPIC = "isotropic"
ALIGNED = "aligned"


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape or self.inputs.ndim != 2:
            raise ValueError(f"inputs {self.inputs.shape} and targets {self.targets.shape} must be matching (S, D) arrays")
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dimension(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.targets, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = SPRING
    atom_count: int = 8
    sample_count: int = 2048
    heldout_count: int = 256
    noise_scale: float = 0.1
    position_scale: float = 1.0
    orientation: str = ISOTROPIC  # "aligned": every cloud rotated into its principal-axis frame
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (SPRING, AUTOENCODE):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.orientation not in (ISOTROPIC, ALIGNED):
            raise ValueError(f"unknown orientation {self.orientation!r}; choose {ISOTROPIC!r} or {ALIGNED!r}")
        if self.atom_count < 2 or self.sample_count < 1 or self.heldout_count < 1:
            raise ValueError("task needs at least 2 atoms and non-empty splits")


def spring_forces(x: np.ndarray) -> np.ndarray:
    """y_i = sum_j exp(-r_ij^2) (x_j - x_i) for flattened (S, 3N) coordinates."""
    p = x.reshape(x.shape[0], -1, 3)
    e = p[:, None, :, :] - p[:, :, None, :]
    k = np.exp(-np.sum(e**2, axis=-1))
    return np.einsum("bij,bijk->bik", k, e).reshape(x.shape)


def _centered_cloud(rng, n: int, atoms: int, scale: float) -> np.ndarray:
    p = rng.standard_normal((n, atoms, 3)) * scale
    p -= p.mean(axis=1, keepdims=True)
    return p.reshape(n, 3 * atoms)


def align_principal_axes(x: np.ndarray) -> np.ndarray:
    """Rotate each centered cloud so its inertia axes line up with x, y, z (largest spread first).

    Axis signs are fixed by making the third moment along each axis
    non-negative; the frame is completed as a proper rotation.
    """
    p = x.reshape(x.shape[0], -1, 3)
    out = np.empty_like(p)
    for k, cloud in enumerate(p):
        _, vecs = np.linalg.eigh(cloud.T @ cloud)
        r = vecs[:, ::-1].copy()
        for a in range(2):
            if np.sum((cloud @ r[:, a]) ** 3) < 0:
                r[:, a] = -r[:, a]
        r[:, 2] = np.cross(r[:, 0], r[:, 1])
        out[k] = cloud @ r
    return out.reshape(x.shape)


def make_task(task: SyntheticTask) -> tuple[Dataset, Dataset]:
    """Deterministic (train, held-out) splits drawn from one stream."""
    rng = make_rng(task.seed)
    total = task.sample_count + task.heldout_count
    clean = _centered_cloud(rng, total, task.atom_count, task.position_scale)
    if task.orientation == ALIGNED:
        clean = align_principal_axes(clean)
    if task.kind == SPRING:
        x, y = clean, spring_forces(clean)
    else:
        x = clean + task.noise_scale * rng.standard_normal(clean.shape)
        y = clean
    train = Dataset(x[: task.sample_count], y[: task.sample_count])
    held = Dataset(x[task.sample_count:], y[task.sample_count:])
    return train, held
