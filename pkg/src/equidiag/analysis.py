"""Parameter-space diagnostics: Hessian spectra, landscapes, equivariant subspaces.

Hessians are central differences of the analytic parameter gradient on a
named parameter subset, always with one fixed set of rotations so that every
probe point sees the same augmented loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .group import (
    BlockAction,
    GroupError,
    GroupSpec,
    block_matrix,
    enumerate_group,
    is_signed_permutation,
    rotate_blocks,
)
from .losses import MSE, LossModel
from .metrics import decompose_exact, decompose_sampled
from .models import COORD_MLP, EQUIVARIANT, GRAPH_HEAD, ModelHandle, _edges, _dense_forward, loss_terms, rbf
from .tasks import Dataset

POSITIVE_FLOOR = 1e-10
HESSIAN_BUDGET = 2000


class BudgetError(ValueError):
    pass


class AxisSelectionError(ValueError):
    pass


class SignalTooSmallError(ValueError):
    pass


# ------------------------------------------------------------- eigensolver


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a small dense symmetric matrix."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def eig_symmetric(a: np.ndarray, method: str = "lapack") -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenvalues and orthonormal eigenvectors (columns)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if np.abs(a - a.T).max() > 1e-8 * max(1.0, np.abs(a).max()):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    if method == "jacobi":
        return jacobi_eigh(a)
    w, v = np.linalg.eigh(a)
    return w, v


# ---------------------------------------------------------------- Hessians


@dataclass(frozen=True)
class HessianSummary:
    subset_name: str
    subset_size: int
    max_pos_eig: float
    min_pos_eig: float
    condition_number: float
    loss_kind: str
    batch_index: int = 0
    degenerate: bool = False

    def record(self) -> dict:
        return {"subset": self.subset_name, "lambda_max_pos": self.max_pos_eig, "lambda_min_pos": self.min_pos_eig,
                "cond": self.condition_number, "loss_kind": self.loss_kind, "batch_index": self.batch_index}


def positive_extremes(eigenvalues: np.ndarray, floor: float = POSITIVE_FLOOR) -> tuple[float, float]:
    lam_max = float(np.max(eigenvalues)) if len(eigenvalues) else 0.0
    if lam_max <= 0.0:
        return math.nan, math.nan
    pos = eigenvalues[eigenvalues > floor * lam_max]
    return lam_max, float(pos.min())


def summarize(h: np.ndarray, subset_name: str, loss_kind: str, batch_index: int = 0) -> HessianSummary:
    w, _ = eig_symmetric(h)
    lam_max, lam_min = positive_extremes(w)
    degenerate = math.isnan(lam_max)
    cond = math.nan if degenerate else lam_max / lam_min
    return HessianSummary(subset_name, h.shape[0], lam_max, lam_min, cond, loss_kind, batch_index, degenerate)


def _subset_index(model: ModelHandle, subset: Sequence[str] | str) -> tuple[str, np.ndarray]:
    names = [subset] if isinstance(subset, str) else list(subset)
    expanded = []
    for n in names:
        if n in model.params.layout:
            expanded.append(n)
        else:
            found = [s for s in model.params.names() if s.split(".")[0] == n]
            if not found:
                raise KeyError(f"no parameter segment or layer named {n!r}")
            expanded.extend(found)
    return "+".join(names), model.params.indices(expanded)


def fd_hessians(model: ModelHandle, loss_model: LossModel, targets: Sequence[str], subset, x, y, mats,
                step: float | None = None) -> dict[str, np.ndarray]:
    """Raw (unsymmetrized) finite-difference Hessians for several loss targets."""
    name, idx = _subset_index(model, subset)
    if len(idx) > HESSIAN_BUDGET:
        raise BudgetError(f"subset {name} has {len(idx)} parameters; dense budget is {HESSIAN_BUDGET}")
    theta = model.params.values
    if step is None:
        step = 1e-4 * max(1.0, float(np.abs(theta[idx]).max()))
    out = {t: np.empty((len(idx), len(idx))) for t in targets}
    for col, i in enumerate(idx):
        tp = theta.copy()
        tp[i] += step
        tm = theta.copy()
        tm[i] -= step
        gp = loss_terms(model.with_values(tp), loss_model, x, y, mats, targets)
        gm = loss_terms(model.with_values(tm), loss_model, x, y, mats, targets)
        for t in targets:
            out[t][:, col] = (gp[t][1][idx] - gm[t][1][idx]) / (2 * step)
    return out


def hessian_on_subset(model: ModelHandle, loss_model: LossModel, target: str, subset, x, y, mats,
                      step: float | None = None) -> np.ndarray:
    h = fd_hessians(model, loss_model, (target,), subset, x, y, mats, step)[target]
    return 0.5 * (h + h.T)


def condition_numbers(model: ModelHandle, loss_model: LossModel, subset, x, y, mats,
                      batch_index: int = 0) -> tuple[HessianSummary, HessianSummary]:
    """Condition numbers of the mean and equiv Hessians from one batch and rotation set."""
    name, _ = _subset_index(model, subset)
    hs = fd_hessians(model, loss_model, ("mean", "equiv"), subset, x, y, mats)
    return tuple(summarize(0.5 * (hs[t] + hs[t].T), name, t, batch_index) for t in ("mean", "equiv"))


# --------------------------------------------------------------- landscapes


@dataclass(frozen=True)
class LandscapeGrid:
    axis1: np.ndarray
    axis2: np.ndarray
    step_size: float
    grid_radius: int
    values: np.ndarray  # (2R+1, 2R+1); values[i, j] at offsets (i - R, j - R)
    loss_kind: str

    @property
    def center(self) -> float:
        return float(self.values[self.grid_radius, self.grid_radius])


def landscape_grid(model: ModelHandle, loss_model: LossModel, subset, x, y, mats, grid_radius: int = 10,
                   step_scale: float = 2.5, learning_rate: float = 1e-3,
                   total_hessian: np.ndarray | None = None, step_size: float | None = None) -> dict[str, LandscapeGrid]:
    """Mean/equiv/total loss on a 2D grid spanned by extreme positive eigenvectors of the total Hessian.

    The step defaults to ``step_scale * learning_rate * |grad L|``, an estimate
    of a few training steps at this checkpoint.
    """
    _, idx = _subset_index(model, subset)
    h = total_hessian if total_hessian is not None else hessian_on_subset(model, loss_model, "total", subset, x, y, mats)
    w, v = eig_symmetric(h)
    lam_max, lam_min = positive_extremes(w)
    if math.isnan(lam_max):
        raise AxisSelectionError("total-loss Hessian has no positive eigenvalues")
    i_max = int(np.argmax(w))
    i_min = int(np.where(w == lam_min)[0][0])
    if i_min == i_max:
        raise AxisSelectionError("total-loss Hessian has a single positive eigenvalue; cannot span two axes")
    a1, a2 = v[:, i_max].copy(), v[:, i_min].copy()
    if step_size is None:
        g = loss_terms(model, loss_model, x, y, mats, ("total",))["total"][1]
        step_size = step_scale * learning_rate * float(np.linalg.norm(g))
    theta = model.params.values
    n = 2 * grid_radius + 1
    vals = {t: np.empty((n, n)) for t in ("mean", "equiv", "total")}
    for i in range(n):
        for j in range(n):
            t = theta.copy()
            t[idx] += step_size * ((i - grid_radius) * a1 + (j - grid_radius) * a2)
            terms = loss_terms(model.with_values(t), loss_model, x, y, mats, ("total", "mean", "equiv"), with_grad=False)
            for k in vals:
                vals[k][i, j] = terms[k][0]
    return {k: LandscapeGrid(a1, a2, step_size, grid_radius, vals[k], k) for k in vals}


# ------------------------------------------------------ equivariant subspace


@dataclass(frozen=True)
class ParameterSplit:
    equivariant: np.ndarray
    deviation: np.ndarray

    @property
    def deviation_norm_sq(self) -> float:
        return float(np.sum(self.deviation**2))


def _check_rep(rep, dim: int, what: str):
    for m in rep:
        m = np.asarray(m)
        if m.shape != (dim, dim):
            raise ValueError(f"{what} representation matrices must be {dim}x{dim}, got {m.shape}")
        if np.abs(m.T @ m - np.eye(dim)).max() > 1e-10:
            raise ValueError(f"{what} representation is not orthogonal")


def project_equivariant(weights: np.ndarray, in_rep, out_rep) -> ParameterSplit:
    """Layer twirl: average of rho_out(g)^-1 A rho_in(g) over a finite group.

    For a bias vector pass ``in_rep`` as 1x1 identities. The result is the
    orthogonal (Frobenius) projection onto maps commuting with the group.
    """
    a = np.asarray(weights, dtype=float)
    vector = a.ndim == 1
    a2 = a[:, None] if vector else a
    if len(in_rep) != len(out_rep) or not len(in_rep):
        raise ValueError("input and output representations must list the same non-empty set of elements")
    _check_rep(in_rep, a2.shape[1], "input")
    _check_rep(out_rep, a2.shape[0], "output")
    acc = np.zeros_like(a2)
    for ri, ro in zip(in_rep, out_rep):
        acc += np.asarray(ro).T @ a2 @ np.asarray(ri)
    eq = acc / len(in_rep)
    if vector:
        eq = eq[:, 0]
    return ParameterSplit(eq, a - eq)


def axis_permutation_rep(group: GroupSpec) -> list[np.ndarray]:
    """Permutation of Cartesian axes induced by signed-permutation rotations."""
    mats = [g.matrix for g in enumerate_group(group)]
    if not all(is_signed_permutation(m) for m in mats):
        raise GroupError("axis permutation representation needs signed-permutation rotations (octahedral subgroups)")
    return [np.abs(m) for m in mats]


def layer_reps(model: ModelHandle, group: GroupSpec) -> dict[str, tuple[list, list]]:
    """(input rep, output rep) for every parameter segment of ``model``."""
    mats = [g.matrix for g in enumerate_group(group)]
    triv = lambda d: [np.eye(d)] * len(mats)
    reps = {}
    if model.kind == COORD_MLP:
        if not all(is_signed_permutation(m) for m in mats):
            raise GroupError("coord-mlp hidden representations need signed-permutation rotations so tanh commutes")
        widths = [model.dimension, *model.hidden, model.dimension]
        block = lambda d: [block_matrix(m, d // 3) for m in mats]
        for name, fi, fo in zip(model.layer_names(), widths[:-1], widths[1:]):
            reps[f"{name}.weight"] = (block(fi), block(fo))
            reps[f"{name}.bias"] = (triv(1), block(fo))
        return reps
    for name in model.params.names():
        shape = model.params.layout[name].shape
        if model.kind == GRAPH_HEAD and name == "head.weight":
            reps[name] = (triv(shape[1]), axis_permutation_rep(group))
        elif len(shape) == 2:
            reps[name] = (triv(shape[1]), triv(shape[0]))
        else:
            reps[name] = (triv(1), triv(shape[0]))
    return reps


def split_model(model: ModelHandle, group: GroupSpec, segments: Sequence[str] | None = None) -> ParameterSplit:
    """Split the flat parameter vector into its equivariant part and deviation.

    Only segments listed in ``segments`` (segment or layer names; default all)
    carry a deviation; the remaining entries stay in the equivariant part as-is.
    """
    reps = layer_reps(model, group)
    theta = model.params.values
    chosen = set(model.params.names()) if segments is None else set(_expand(model, segments))
    eq = theta.copy()
    for name in chosen:
        seg = model.params.layout[name]
        part = project_equivariant(model.params.view(name), *reps[name])
        eq[seg.slice] = part.equivariant.reshape(-1)
    return ParameterSplit(eq, theta - eq)


def project_model(model: ModelHandle, group: GroupSpec) -> ModelHandle:
    """The model with every layer twirled onto its equivariant subspace."""
    return model.with_values(split_model(model, group).equivariant)


def _expand(model: ModelHandle, names) -> list[str]:
    out = []
    for n in ([names] if isinstance(names, str) else names):
        if n in model.params.layout:
            out.append(n)
        else:
            found = [s for s in model.params.names() if s.split(".")[0] == n]
            if not found:
                raise KeyError(f"no parameter segment or layer named {n!r}")
            out.extend(found)
    return out


def head_weights(model: ModelHandle) -> np.ndarray:
    if model.kind != GRAPH_HEAD:
        raise ValueError(f"head deviation is defined for {GRAPH_HEAD} models, not {model.kind}")
    return model.params.view("head.weight")


def head_deviation_sq(model: ModelHandle) -> float:
    """Squared Frobenius norm of [d_x, d_y, d_z], the head's deviation from its mean vector."""
    w = head_weights(model)
    return float(np.sum((w - w.mean(axis=0, keepdims=True)) ** 2))


def head_deviation_series(checkpoints: Sequence[tuple[int, ModelHandle]], loss_model: LossModel,
                          action: BlockAction, dataset: Dataset, spec: GroupSpec, n_rotations: int,
                          rng: np.random.Generator) -> list[tuple[int, float, float]]:
    rows = []
    for step, model in checkpoints:
        dev = head_deviation_sq(model)
        _, dec = decompose_sampled(model, loss_model, action, dataset, spec, n_rotations, rng)
        rows.append((int(step), dev, dec.percent))
    return rows


# ----------------------------------------------------------------- theorems


@dataclass
class Theorem1Report:
    q_matrix: np.ndarray  # over vec(W) = [w_x; w_y; w_z]
    perp_basis: np.ndarray  # orthonormal basis of the deviation subspace
    lambda_min: float
    lambda_max: float
    l_equiv: float
    quadratic_form: float
    identity_rel_err: float
    scaling: dict = field(default_factory=dict)  # s -> L_equiv(s W_perp) / L_equiv(W_perp)
    bound_violations: int = 0
    bound_trials: int = 0
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {"lambda_min": self.lambda_min, "lambda_max": self.lambda_max, "l_equiv": self.l_equiv,
                "quadratic_form": self.quadratic_form, "identity_rel_err": self.identity_rel_err,
                "scaling": {str(k): v for k, v in self.scaling.items()},
                "bound_violations": self.bound_violations, "bound_trials": self.bound_trials,
                "degenerate": self.degenerate}


def head_perp_basis(hidden: int) -> np.ndarray:
    """Orthonormal basis (3h, 2h) of head matrices whose three rows sum to zero."""
    u = np.array([[1.0, -1.0, 0.0], [1.0, 1.0, -2.0]])
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    b = np.zeros((3 * hidden, 2 * hidden))
    for q in range(hidden):
        for m in range(2):
            b[np.arange(3) * hidden + q, 2 * q + m] = u[m]
    return b


def head_quadratic_form(model: ModelHandle, dataset: Dataset, group: GroupSpec) -> np.ndarray:
    """Q with p^T Q p = L_equiv for p = vec(W), built from the head's linear maps M_{T,x}."""
    head_weights(model)
    mats = np.stack([g.matrix for g in enumerate_group(group)])
    x = dataset.inputs
    hdim = model.hidden[-1]
    e, r, mask = _edges(x, model.n_atoms)
    h = _dense_forward(model.params, model.layer_names()[:-1], rbf(r), linear_last=False)[-1]
    hm = h * mask[None, :, :, None]
    te = np.einsum("gkl,sijl->sgijk", mats, e)
    # M[s, g, i, a, k, q] = sum_j T[k, a] (T e_ij)_k h_ij[q]
    m = np.einsum("gka,sgijk,sijq->sgiakq", mats, te, hm)
    s, ng = m.shape[:2]
    d = model.dimension
    m = m.reshape(s, ng, d, 3 * hdim)
    dm = m - m.mean(axis=1, keepdims=True)
    q = np.einsum("sgdp,sgdr->pr", dm, dm) / (s * ng * d)
    return 0.5 * (q + q.T)


def _l_equiv(model: ModelHandle, dataset: Dataset, group: GroupSpec) -> float:
    action = BlockAction(group, model.n_atoms)
    return decompose_exact(model, LossModel(MSE, model.dimension), action, dataset, group).equiv


def verify_theorem1(model: ModelHandle, dataset: Dataset, group: GroupSpec, trials: int = 100,
                    rng: np.random.Generator | None = None) -> Theorem1Report:
    """Quadratic-form identity, exact s^2 scaling and eigenvalue bounds for the graph head."""
    w = head_weights(model).copy()
    hdim = w.shape[1]
    q = head_quadratic_form(model, dataset, group)
    basis = head_perp_basis(hdim)
    lam, vecs = eig_symmetric(basis.T @ q @ basis)
    lam_min, lam_max = float(lam[0]), float(lam[-1])
    degenerate = lam_min <= POSITIVE_FLOOR * max(lam_max, 0.0) or lam_max <= 0.0

    w_eq = np.broadcast_to(w.mean(axis=0, keepdims=True), w.shape)
    w_perp = w - w_eq
    p = w_perp.reshape(-1)
    l_eq = _l_equiv(model, dataset, group)
    form = float(p @ q @ p)
    rel = abs(form - l_eq) / max(abs(l_eq), 1e-300)

    def with_head(head):
        vals = model.params.values.copy()
        vals[model.params.layout["head.weight"].slice] = head.reshape(-1)
        return model.with_values(vals)

    scaling = {}
    for s in (0.5, 2.0, 10.0):
        scaling[s] = _l_equiv(with_head(w_eq + s * w_perp), dataset, group) / l_eq if l_eq > 0 else math.nan

    rng = rng if rng is not None else np.random.default_rng(0)
    violations = 0
    for _ in range(trials):
        d = (basis @ rng.standard_normal(2 * hdim)).reshape(3, hdim)
        le = _l_equiv(with_head(w_eq + d), dataset, group)
        nrm = float(np.sum(d**2))
        slack = 1e-9 * max(le, 1e-300)
        if not (lam_min * nrm - slack <= le <= lam_max * nrm + slack):
            violations += 1
    return Theorem1Report(q, basis, lam_min, lam_max, l_eq, form, rel, scaling, violations, trials, degenerate)


@dataclass
class ScalingReport:
    scales: list
    l_equiv: list
    grad_norm: list
    base_l_equiv: float
    deviation_norm: float
    quadratic_slopes: list  # between consecutive scales
    gradient_slopes: list
    quadratic_slope_small: float  # least-squares fit over s <= small_cutoff
    gradient_slope_small: float
    segments: list

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("scales", "l_equiv", "grad_norm", "base_l_equiv", "deviation_norm",
                                               "quadratic_slopes", "gradient_slopes", "quadratic_slope_small",
                                               "gradient_slope_small", "segments")}


def _loglog_slope(s, v) -> float:
    s, v = np.log(np.asarray(s)), np.log(np.asarray(v))
    if len(s) < 2:
        return math.nan
    return float(np.polyfit(s, v, 1)[0])


def verify_theorem2_3(model: ModelHandle, group: GroupSpec, dataset: Dataset, segments: Sequence[str] | None = None,
                      scales: Sequence[float] = (1.0, 0.5, 0.25, 0.125, 0.0625),
                      small_cutoff: float = 0.125) -> ScalingReport:
    """L_equiv and its deviation-gradient norm along theta_E + s * theta_perp.

    ``segments`` selects the layers whose deviation is scaled; every other
    layer is replaced by its equivariant projection so that the ray starts
    inside the equivariant subspace.
    """
    full = split_model(model, group)
    if segments is None:
        names = model.params.names()
    else:
        names = _expand(model, segments)
    mask = np.zeros_like(full.deviation)
    mask[model.params.indices(names)] = 1.0
    theta_e = full.equivariant
    theta_perp = full.deviation * mask
    reps = layer_reps(model, group)
    mats = np.stack([g.matrix for g in enumerate_group(group)])
    loss_model = LossModel(MSE, model.dimension)
    grid = np.broadcast_to(mats, (len(dataset),) + mats.shape)

    def perp_grad(m: ModelHandle) -> np.ndarray:
        g = loss_terms(m, loss_model, dataset.inputs, dataset.targets, grid, ("equiv",))["equiv"][1]
        gp = np.zeros_like(g)
        for name in names:
            seg = m.params.layout[name]
            part = project_equivariant(m.params.view(name, g), *reps[name])
            gp[seg.slice] = part.deviation.reshape(-1)
        return gp

    base = _l_equiv(model.with_values(theta_e), dataset, group)
    les, gns = [], []
    for s in scales:
        m = model.with_values(theta_e + s * theta_perp)
        les.append(_l_equiv(m, dataset, group))
        gns.append(float(np.linalg.norm(perp_grad(m))))
    if les[int(np.argmax(scales))] < 1e-24:
        raise SignalTooSmallError("L_equiv at the largest scale is below 1e-24; no deviation to measure")
    order = np.argsort(scales)[::-1]
    ss = [float(scales[i]) for i in order]
    le_o = [les[i] for i in order]
    gn_o = [gns[i] for i in order]
    q_slopes = [float(np.log(le_o[k] / le_o[k + 1]) / np.log(ss[k] / ss[k + 1])) for k in range(len(ss) - 1)]
    g_slopes = [float(np.log(gn_o[k] / gn_o[k + 1]) / np.log(ss[k] / ss[k + 1])) for k in range(len(ss) - 1)]
    small = [k for k, s in enumerate(ss) if s <= small_cutoff + 1e-15]
    return ScalingReport(
        ss, le_o, gn_o, base, float(np.linalg.norm(theta_perp)), q_slopes, g_slopes,
        _loglog_slope([ss[k] for k in small], [le_o[k] for k in small]),
        _loglog_slope([ss[k] for k in small], [gn_o[k] for k in small]),
        names,
    )
