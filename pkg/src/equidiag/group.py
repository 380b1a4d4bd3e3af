"""Rotation groups acting blockwise on flattened 3D coordinates.

Continuous SO(3) is sampled through normalized Gaussian quaternions; finite
subgroups are explicit element lists so expectations can be taken exactly.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CONTINUOUS = "continuous-SO3"
FINITE = "finite-subgroup"

_ORTHO_TOL = 1e-12
_CLOSURE_TOL = 1e-10


class GroupError(ValueError):
    """Invalid group specification or unsupported group operation."""


class ShapeError(ValueError):
    """Vector or matrix dimensions do not match the action."""


@dataclass(frozen=True)
class GroupElement:
    matrix: np.ndarray
    label: Optional[str] = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ShapeError(f"group element must be 3x3, got {m.shape}")
        if np.abs(m.T @ m - np.eye(3)).max() > _ORTHO_TOL * 10:
            raise GroupError("group element matrix is not orthogonal")
        if abs(np.linalg.det(m) - 1.0) > _ORTHO_TOL * 10:
            raise GroupError("group element is not a proper rotation (det != +1)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return GroupElement(self.matrix @ other.matrix)


def inverse(g: GroupElement) -> GroupElement:
    label = None if g.label is None else f"{g.label}^-1"
    return GroupElement(g.matrix.T.copy(), label)


def identity() -> GroupElement:
    return GroupElement(np.eye(3), "e")


def axis_rotation(axis: str | Sequence[float], angle: float) -> np.ndarray:
    """Rotation matrix about ``axis`` (name or 3-vector) by ``angle`` radians."""
    if isinstance(axis, str):
        axis = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}[axis]
    u = np.asarray(axis, dtype=float)
    u = u / np.linalg.norm(u)
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    c, s = np.cos(angle), np.sin(angle)
    r = np.eye(3) + s * k + (1 - c) * (k @ k)
    # snap quarter-turn rounding noise so cyclic groups close exactly
    r[np.abs(r) < 1e-15] = 0.0
    return r


@dataclass(frozen=True)
class GroupSpec:
    kind: str
    elements: tuple = ()
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, FINITE):
            raise GroupError(f"unknown group kind {self.kind!r}")
        object.__setattr__(self, "elements", tuple(self.elements))
        if self.kind == FINITE and self.elements:
            validate_finite(self.elements)

    @property
    def is_finite(self) -> bool:
        return self.kind == FINITE

    def matrices(self) -> np.ndarray:
        return np.stack([g.matrix for g in self.elements])


def _index_of(m: np.ndarray, mats: np.ndarray) -> int:
    d = np.abs(mats - m[None]).reshape(len(mats), -1).max(axis=1)
    i = int(np.argmin(d))
    return i if d[i] <= _CLOSURE_TOL else -1


def validate_finite(elements: Sequence[GroupElement]) -> None:
    """Check identity, closure under composition and inverse by enumeration."""
    if not elements:
        raise GroupError("finite group has no elements")
    mats = np.stack([g.matrix for g in elements])
    if _index_of(np.eye(3), mats) < 0:
        raise GroupError("finite group does not contain the identity")
    for a in mats:
        if _index_of(a.T, mats) < 0:
            raise GroupError("finite group is not closed under inverse")
        prods = np.einsum("ij,njk->nik", a, mats)
        for p in prods:
            if _index_of(p, mats) < 0:
                raise GroupError("finite group is not closed under composition")
    for i, j in itertools.combinations(range(len(mats)), 2):
        if np.abs(mats[i] - mats[j]).max() <= _CLOSURE_TOL:
            raise GroupError("finite group lists a duplicate element")


# ---------------------------------------------------------------- builders


def so3(seed: int = 0) -> GroupSpec:
    return GroupSpec(CONTINUOUS, (), seed, "SO3")


def trivial_group(seed: int = 0) -> GroupSpec:
    return GroupSpec(FINITE, (identity(),), seed, "identity")


def cyclic(order: int, axis: str = "z", seed: int = 0) -> GroupSpec:
    els = [GroupElement(axis_rotation(axis, 2 * np.pi * k / order), f"C{order}{axis}^{k}") for k in range(order)]
    return GroupSpec(FINITE, tuple(els), seed, f"C{order}{axis}")


def octahedral(seed: int = 0) -> GroupSpec:
    """The 24 proper rotations of the cube: signed permutation matrices with det +1."""
    els = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, sgn) in enumerate(zip(perm, signs)):
                m[row, col] = sgn
            if np.linalg.det(m) > 0:
                els.append(GroupElement(m, f"O{len(els)}"))
    return GroupSpec(FINITE, tuple(els), seed, "octahedral")


def from_matrices(mats, seed: int = 0, name: str = "custom") -> GroupSpec:
    els = tuple(GroupElement(np.asarray(m, dtype=float), f"{name}{i}") for i, m in enumerate(mats))
    return GroupSpec(FINITE, els, seed, name)


def load_group_json(path: str | Path, seed: int = 0) -> GroupSpec:
    """Load a finite group from a JSON array of 3x3 row-major matrices."""
    with open(path) as f:
        raw = json.load(f)
    mats = np.asarray(raw, dtype=float)
    if mats.ndim == 2 and mats.shape[1] == 9:
        mats = mats.reshape(-1, 3, 3)
    if mats.ndim != 3 or mats.shape[1:] != (3, 3):
        raise ShapeError(f"expected an array of 3x3 matrices, got shape {mats.shape}")
    return from_matrices(mats, seed=seed, name=Path(path).stem)


def save_group_json(spec: GroupSpec, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump([g.matrix.tolist() for g in enumerate_group(spec)], f)


BUILDERS = {
    "SO3": lambda seed=0: so3(seed),
    "identity": lambda seed=0: trivial_group(seed),
    "C2x": lambda seed=0: cyclic(2, "x", seed),
    "C2y": lambda seed=0: cyclic(2, "y", seed),
    "C2z": lambda seed=0: cyclic(2, "z", seed),
    "C4x": lambda seed=0: cyclic(4, "x", seed),
    "C4y": lambda seed=0: cyclic(4, "y", seed),
    "C4z": lambda seed=0: cyclic(4, "z", seed),
    "octahedral": lambda seed=0: octahedral(seed),
}


def build_group(name: str, seed: int = 0) -> GroupSpec:
    """Builder lookup by name; anything ending in ``.json`` is loaded from disk."""
    if name.endswith(".json"):
        return load_group_json(name, seed)
    try:
        return BUILDERS[name](seed)
    except KeyError:
        raise GroupError(f"unknown group {name!r}; choose from {sorted(BUILDERS)} or a .json path") from None


# ---------------------------------------------------------------- sampling


def enumerate_group(spec: GroupSpec) -> list[GroupElement]:
    if not spec.is_finite:
        raise GroupError("cannot enumerate a continuous group; sample it instead")
    if not spec.elements:
        raise GroupError("finite group has no elements")
    return list(spec.elements)


def haar_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` Haar-uniform rotation matrices, shape (n, 3, 3)."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    r = np.empty((n, 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - z * w)
    r[:, 0, 2] = 2 * (x * z + y * w)
    r[:, 1, 0] = 2 * (x * y + z * w)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - x * w)
    r[:, 2, 0] = 2 * (x * z - y * w)
    r[:, 2, 1] = 2 * (y * z + x * w)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def sample_matrices(spec: GroupSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` i.i.d. uniform draws from the group as an (n, 3, 3) array."""
    if spec.is_finite:
        if not spec.elements:
            raise GroupError("cannot sample from an empty finite group")
        idx = rng.integers(0, len(spec.elements), size=n)
        return spec.matrices()[idx]
    return haar_rotations(rng, n)


def sample_uniform(spec: GroupSpec, rng: np.random.Generator) -> GroupElement:
    if spec.is_finite:
        if not spec.elements:
            raise GroupError("cannot sample from an empty finite group")
        return spec.elements[int(rng.integers(0, len(spec.elements)))]
    return GroupElement(haar_rotations(rng, 1)[0])


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator; ``stream`` selects an independent child sequence of ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(stream))))


# ---------------------------------------------------------------- actions


@dataclass(frozen=True)
class BlockAction:
    group: GroupSpec
    block_count: int
    dimension: int = field(init=False)

    def __post_init__(self):
        if self.block_count < 1:
            raise ShapeError("block_count must be positive")
        object.__setattr__(self, "dimension", 3 * self.block_count)


def apply(action: BlockAction, g: GroupElement, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (action.dimension,):
        raise ShapeError(f"expected a vector of length {action.dimension}, got shape {v.shape}")
    return (v.reshape(-1, 3) @ g.matrix.T).reshape(-1)


def rotate_blocks(mats: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply per-row rotations to flattened coordinates.

    ``mats`` is (..., 3, 3) and ``x`` is (..., D); leading axes broadcast.
    """
    xb = x.reshape(*x.shape[:-1], -1, 3)
    out = np.einsum("...ij,...nj->...ni", mats, xb)
    return out.reshape(out.shape[:-2] + (-1,))


def rotate_blocks_inverse(mats: np.ndarray, x: np.ndarray) -> np.ndarray:
    xb = x.reshape(*x.shape[:-1], -1, 3)
    out = np.einsum("...ji,...nj->...ni", mats, xb)
    return out.reshape(out.shape[:-2] + (-1,))


def block_matrix(g: np.ndarray, blocks: int) -> np.ndarray:
    """Dense block-diagonal representation kron(I_blocks, g)."""
    return np.kron(np.eye(blocks), g)


def is_signed_permutation(m: np.ndarray, tol: float = 1e-12) -> bool:
    a = np.abs(m)
    ones = np.abs(a - 1.0) <= tol
    zeros = a <= tol
    return bool(np.all(ones | zeros) and np.all(ones.sum(0) == 1) and np.all(ones.sum(1) == 1))
