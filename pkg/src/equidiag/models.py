"""Tiny differentiable force models with hand-written reverse mode.

Three fixed architectures, each mapping flattened coordinates (B, 3N) to
flattened per-atom vectors (B, 3N):

* ``coord-mlp``: tanh MLP on centered raw coordinates; not equivariant.
* ``invariant-graph-head``: an edge MLP on radial-basis distance features
  produces invariant hidden vectors h(e); a bias-free linear head with one
  weight vector per Cartesian axis turns them into forces. Equivariant iff
  the three head vectors coincide.
* ``equivariant-baseline``: o_i = sum_j s(r_ij) (x_j - x_i) with a learnable
  radial function s; exactly equivariant for all parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .group import ShapeError, make_rng, rotate_blocks, rotate_blocks_inverse
from .losses import LossModel, loss, loss_gradient

COORD_MLP = "coord-mlp"
GRAPH_HEAD = "invariant-graph-head"
EQUIVARIANT = "equivariant-baseline"
KINDS = (COORD_MLP, GRAPH_HEAD, EQUIVARIANT)

RBF_CENTERS = np.linspace(0.0, 4.0, 8)
RBF_WIDTH = 0.5

TARGETS = ("total", "mean", "equiv")


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass
class ParameterVector:
    values: np.ndarray
    layout: dict[str, Segment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        spans = sorted((s.offset, s.offset + s.size) for s in self.layout.values())
        pos = 0
        for lo, hi in spans:
            if lo != pos:
                raise ValueError("parameter layout segments must be disjoint and contiguous")
            pos = hi
        if pos != self.values.size:
            raise ValueError(f"layout covers {pos} entries but vector has {self.values.size}")

    def view(self, name: str, values: np.ndarray | None = None) -> np.ndarray:
        seg = self.layout[name]
        v = self.values if values is None else values
        return v[seg.slice].reshape(seg.shape)

    def names(self) -> list[str]:
        return sorted(self.layout, key=lambda n: self.layout[n].offset)

    def indices(self, names: Sequence[str]) -> np.ndarray:
        return np.concatenate([np.arange(self.layout[n].offset, self.layout[n].offset + self.layout[n].size) for n in names])

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.array(values, dtype=float), self.layout)

    def __len__(self) -> int:
        return self.values.size


def _layout(shapes: list[tuple[str, tuple]]) -> dict[str, Segment]:
    out, off = {}, 0
    for name, shape in shapes:
        seg = Segment(name, off, tuple(shape))
        out[name] = seg
        off += seg.size
    return out


@dataclass
class ModelHandle:
    kind: str
    n_atoms: int
    hidden: tuple
    params: ParameterVector
    seed: int = 0
    dimension: int = field(init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.dimension = 3 * self.n_atoms

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)

    def with_values(self, values: np.ndarray) -> "ModelHandle":
        return ModelHandle(self.kind, self.n_atoms, self.hidden, self.params.with_values(values), self.seed)

    def layer_names(self) -> list[str]:
        return _layer_names(self.kind, self.hidden)


@dataclass(frozen=True)
class ConstantModel:
    """Input-independent predictor f(x) = c; its twisted predictions are g^T c."""
    value: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        c = np.asarray(self.value, dtype=float)
        if x.shape[-1] != c.shape[-1]:
            raise ValueError(f"input dimension {x.shape[-1]} does not match constant of size {c.shape[-1]}")
        return np.broadcast_to(c, x.shape).copy()


def _layer_names(kind: str, hidden: tuple) -> list[str]:
    if kind == COORD_MLP:
        return [f"hidden{i}" for i in range(len(hidden))] + ["out"]
    if kind == GRAPH_HEAD:
        return [f"edge{i}" for i in range(len(hidden))] + ["head"]
    return [f"radial{i}" for i in range(len(hidden))] + ["radial_out"]


def _shapes(kind: str, n_atoms: int, hidden: tuple) -> list[tuple[str, tuple]]:
    d = 3 * n_atoms
    shapes = []
    if kind == COORD_MLP:
        widths = [d, *hidden, d]
    else:
        widths = [len(RBF_CENTERS), *hidden]
        if kind == EQUIVARIANT:
            widths.append(1)
    names = _layer_names(kind, hidden)
    for name, fan_in, fan_out in zip(names, widths[:-1], widths[1:]):
        shapes.append((f"{name}.weight", (fan_out, fan_in)))
        shapes.append((f"{name}.bias", (fan_out,)))
    if kind == GRAPH_HEAD:
        # rows are the per-axis head vectors w_x, w_y, w_z; no bias
        shapes.append(("head.weight", (3, hidden[-1])))
    return shapes


def init_parameters(kind: str, n_atoms: int, hidden: Sequence[int], seed: int) -> ModelHandle:
    """Uniform(+-1/sqrt(fan_in)) init per layer; head vectors drawn independently."""
    hidden = tuple(int(h) for h in hidden)
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if not hidden:
        raise ValueError("at least one hidden layer is required")
    if kind == COORD_MLP and any(h % 3 for h in hidden):
        raise ValueError("coord-mlp hidden widths must be multiples of 3 (hidden units carry 3-vector blocks)")
    layout = _layout(_shapes(kind, n_atoms, hidden))
    rng = make_rng(seed)
    values = np.empty(sum(s.size for s in layout.values()))
    for name in sorted(layout, key=lambda n: layout[n].offset):
        seg = layout[name]
        fan_in = seg.shape[1] if len(seg.shape) == 2 else layout[name.replace(".bias", ".weight")].shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        values[seg.slice] = rng.uniform(-bound, bound, seg.size)
    return ModelHandle(kind, n_atoms, hidden, ParameterVector(values, layout), seed)


# ------------------------------------------------------------------ forward


def center(x: np.ndarray) -> np.ndarray:
    p = x.reshape(x.shape[0], -1, 3)
    return (p - p.mean(axis=1, keepdims=True)).reshape(x.shape)


def rbf(r: np.ndarray) -> np.ndarray:
    return np.exp(-((r[..., None] - RBF_CENTERS) ** 2) / (2 * RBF_WIDTH**2))


def _dense_forward(params: ParameterVector, names, a, linear_last: bool):
    acts = [a]
    for i, name in enumerate(names):
        z = a @ params.view(f"{name}.weight").T + params.view(f"{name}.bias")
        a = z if (linear_last and i == len(names) - 1) else np.tanh(z)
        acts.append(a)
    return acts


def _dense_backward(params: ParameterVector, names, acts, da, linear_last: bool, grad: np.ndarray):
    for i in reversed(range(len(names))):
        name = names[i]
        w = params.view(f"{name}.weight")
        dz = da if (linear_last and i == len(names) - 1) else da * (1.0 - acts[i + 1] ** 2)
        dz2 = dz.reshape(-1, dz.shape[-1])
        a_in = acts[i].reshape(-1, acts[i].shape[-1])
        params.view(f"{name}.weight", grad)[...] += dz2.T @ a_in
        params.view(f"{name}.bias", grad)[...] += dz2.sum(axis=0)
        da = dz @ w
    return da


def _edges(x: np.ndarray, n_atoms: int):
    p = center(x).reshape(x.shape[0], n_atoms, 3)
    e = p[:, None, :, :] - p[:, :, None, :]  # e[b, i, j] = x_j - x_i
    r = np.sqrt(np.sum(e**2, axis=-1))
    mask = 1.0 - np.eye(n_atoms)
    return e, r, mask


def _forward_cache(model: ModelHandle, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.dimension:
        raise ShapeError(f"model expects inputs of shape (B, {model.dimension}), got {x.shape}")
    ps = model.params
    names = model.layer_names()
    if model.kind == COORD_MLP:
        acts = _dense_forward(ps, names, center(x), linear_last=True)
        return acts[-1], {"acts": acts}
    e, r, mask = _edges(x, model.n_atoms)
    if model.kind == GRAPH_HEAD:
        acts = _dense_forward(ps, names[:-1], rbf(r), linear_last=False)
        h = acts[-1]
        s = h @ ps.view("head.weight").T  # (B, N, N, 3): w_k . h(e)
        out = np.einsum("bijk,bijk,ij->bik", e, s, mask)
        return out.reshape(x.shape), {"acts": acts, "e": e, "mask": mask}
    acts = _dense_forward(ps, names, rbf(r), linear_last=True)
    s = acts[-1][..., 0]
    out = np.einsum("bijk,bij,ij->bik", e, s, mask)
    return out.reshape(x.shape), {"acts": acts, "e": e, "mask": mask}


def forward(model: ModelHandle, x: np.ndarray) -> np.ndarray:
    """Batched forward pass; a single (D,) vector is also accepted."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return _forward_cache(model, x[None])[0][0]
    return _forward_cache(model, x)[0]


def _backward(model: ModelHandle, cache, dout: np.ndarray) -> np.ndarray:
    ps = model.params
    names = model.layer_names()
    grad = np.zeros_like(ps.values)
    if model.kind == COORD_MLP:
        _dense_backward(ps, names, cache["acts"], dout, True, grad)
        return grad
    e, mask, acts = cache["e"], cache["mask"], cache["acts"]
    do = dout.reshape(dout.shape[0], model.n_atoms, 3)
    if model.kind == GRAPH_HEAD:
        ds = do[:, :, None, :] * e * mask[None, :, :, None]
        h = acts[-1]
        ps.view("head.weight", grad)[...] += ds.reshape(-1, 3).T @ h.reshape(-1, h.shape[-1])
        dh = ds @ ps.view("head.weight")
        _dense_backward(ps, names[:-1], acts, dh, False, grad)
        return grad
    ds = np.einsum("bik,bijk,ij->bij", do, e, mask)[..., None]
    _dense_backward(ps, names, acts, ds, True, grad)
    return grad


def vjp(model: ModelHandle, x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Gradient of sum(dout * f(x)) with respect to the flat parameter vector."""
    _, cache = _forward_cache(model, x)
    return _backward(model, cache, dout)


# ------------------------------------------------------------ loss gradients


def loss_terms(model, loss_model: LossModel, x: np.ndarray, y: np.ndarray, mats: np.ndarray,
               targets: Sequence[str] = TARGETS, with_grad: bool = True) -> dict:
    """Augmented-loss terms over a batch with given rotations, plus gradients.

    ``mats`` has shape (B, R, 3, 3): R rotations per sample, shared by every
    target so that the gradients of total, mean and equiv add up exactly.
    The equiv term uses the divide-by-R variance. Returns ``{target: (value,
    grad)}`` (grad is None when ``with_grad`` is false).
    """
    for t in targets:
        if t not in TARGETS:
            raise ValueError(f"unknown gradient target {t!r}; choose from {TARGETS}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0:
        raise ValueError("batch is empty")
    b, r = mats.shape[:2]
    d = x.shape[1]
    xr = rotate_blocks(mats, np.broadcast_to(x[:, None, :], (b, r, d)))
    z, cache = _forward_cache(model, xr.reshape(-1, d))
    zt = rotate_blocks_inverse(mats, z.reshape(b, r, d))
    mu = zt.mean(axis=1)
    yb = y[:, None, :]
    total = float(np.mean(loss(loss_model, zt, yb)))
    mean = float(np.mean(loss(loss_model, mu, y)))
    if loss_model.is_quadratic:
        equiv = float(np.sum((zt - mu[:, None]) ** 2) / (b * r * d))
    else:
        equiv = total - mean
    values = {"total": total, "mean": mean, "equiv": equiv}
    out = {}
    for t in targets:
        if not with_grad:
            out[t] = (values[t], None)
            continue
        scale = 1.0 / (b * r)
        d_total = loss_gradient(loss_model, zt, yb) * scale
        d_mean = np.broadcast_to(loss_gradient(loss_model, mu, y)[:, None, :] * scale, zt.shape)
        dzt = {"total": d_total, "mean": d_mean, "equiv": d_total - d_mean}[t]
        dz = rotate_blocks(mats, dzt).reshape(-1, d)
        out[t] = (values[t], _backward(model, cache, dz))
    return out


def parameter_gradient(model, loss_model: LossModel, x, y, mats, target: str = "total") -> np.ndarray:
    return loss_terms(model, loss_model, x, y, mats, (target,))[target][1]


# ----------------------------------------------------------- serialization


def save_parameters(model: ModelHandle, path: str | Path) -> tuple[Path, Path]:
    """Write little-endian float64 values plus a JSON layout sidecar."""
    path = Path(path)
    model.params.values.astype("<f8").tofile(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = {
        "kind": model.kind,
        "n_atoms": model.n_atoms,
        "dimension": model.dimension,
        "hidden": list(model.hidden),
        "seed": model.seed,
        "segments": [
            {"name": s.name, "offset": s.offset, "shape": list(s.shape)}
            for s in sorted(model.params.layout.values(), key=lambda s: s.offset)
        ],
    }
    sidecar.write_text(json.dumps(meta, indent=2))
    return path, sidecar


def load_parameters(path: str | Path) -> ModelHandle:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    values = np.fromfile(path, dtype="<f8").astype(float)
    layout = {s["name"]: Segment(s["name"], s["offset"], tuple(s["shape"])) for s in meta["segments"]}
    expected = _layout(_shapes(meta["kind"], meta["n_atoms"], tuple(meta["hidden"])))
    if layout != expected:
        raise ValueError("checkpoint layout does not match its declared model kind")
    return ModelHandle(meta["kind"], meta["n_atoms"], tuple(meta["hidden"]), ParameterVector(values, layout), meta["seed"])
