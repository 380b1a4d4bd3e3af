import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import KINDS, random_dataset, small_model
from equidiag.analysis import head_deviation_sq
from equidiag.group import BlockAction, ShapeError, cyclic, make_rng, octahedral, rotate_blocks, sample_matrices, so3
from equidiag.losses import MSE, SOFTPLUS, LossModel
from equidiag.metrics import decompose_exact, twisted_predictions
from equidiag.models import (
    GRAPH_HEAD, ConstantModel, _dense_forward, _edges, forward, init_parameters, load_parameters, loss_terms,
    parameter_gradient, rbf, save_parameters,
)


def _set(model, name, value):
    vals = model.params.values.copy()
    vals[model.params.layout[name].slice] = np.broadcast_to(value, model.params.layout[name].shape).ravel()
    return model.with_values(vals)


@pytest.mark.parametrize("kind", KINDS)
def test_forward_shapes(kind, rng):
    m = small_model(kind, atoms=4)
    x = rng.standard_normal((5, 12))
    assert forward(m, x).shape == (5, 12)
    assert forward(m, x[0]).shape == (12,)
    with pytest.raises(ShapeError):
        forward(m, np.zeros((2, 9)))


@pytest.mark.parametrize("kind", KINDS)
def test_layout_disjoint_and_covering(kind):
    m = small_model(kind)
    segs = sorted(m.params.layout.values(), key=lambda s: s.offset)
    pos = 0
    for s in segs:
        assert s.offset == pos
        pos += s.size
    assert pos == len(m.params)


def test_equivariant_baseline_is_equivariant(rng):
    m = small_model("equivariant-baseline", atoms=5)
    x = rng.standard_normal((20, 15))
    mats = sample_matrices(so3(), rng, 20 * 6).reshape(20, 6, 3, 3)
    zt = twisted_predictions(m, x, mats)
    assert np.abs(zt - forward(m, x)[:, None]).max() <= 1e-10


def test_equivariant_baseline_two_atoms():
    m = small_model("equivariant-baseline", atoms=2)
    m = _set(_set(m, "radial_out.weight", 0.0), "radial_out.bias", 1.0)  # s == 1
    out = forward(m, np.array([1.0, 0, 0, -1.0, 0, 0]))
    assert np.allclose(out, [-2, 0, 0, 2, 0, 0], atol=1e-15)


def test_coord_mlp_zero_output_layer(rng):
    m = _set(_set(small_model("coord-mlp"), "out.weight", 0.0), "out.bias", 0.0)
    assert np.array_equal(forward(m, rng.standard_normal((4, 9))), np.zeros((4, 9)))


def test_graph_head_tied_vectors_are_equivariant(rng):
    m = small_model("invariant-graph-head", atoms=4)
    w = m.params.view("head.weight")
    m = _set(m, "head.weight", np.broadcast_to(w.mean(axis=0), w.shape))
    x = rng.standard_normal((10, 12))
    zt = twisted_predictions(m, x, sample_matrices(so3(), rng, 8))
    assert np.abs(zt - zt[:, :1]).max() <= 1e-10


def test_graph_head_untied_is_not_equivariant(rng):
    m = small_model("invariant-graph-head", atoms=4)
    ds = random_dataset(rng, 8, 4)
    dec = decompose_exact(m, LossModel(MSE, 12), BlockAction(octahedral(), 4), ds, octahedral())
    assert head_deviation_sq(m) > 0 and dec.equiv > 1e-8


def test_graph_head_features_are_invariant(rng):
    m = small_model("invariant-graph-head", atoms=5)
    x = rng.standard_normal((6, 15))
    g = sample_matrices(so3(), rng, 6)
    xr = rotate_blocks(g[:, None], x[:, None])[:, 0]
    names = m.layer_names()[:-1]
    h = _dense_forward(m.params, names, rbf(_edges(x, 5)[1]), False)[-1]
    hr = _dense_forward(m.params, names, rbf(_edges(xr, 5)[1]), False)[-1]
    assert np.abs(h - hr).max() <= 1e-10


@pytest.mark.parametrize("kind", KINDS)
def test_forward_is_bitwise_reproducible(kind, rng):
    m = small_model(kind, atoms=4)
    x = rng.standard_normal((7, 12))
    assert np.array_equal(forward(m, x), forward(m, x.copy()))


def test_constant_model():
    c = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(ConstantModel(c)(np.zeros((2, 3))), np.tile(c, (2, 1)))
    with pytest.raises(ValueError):
        ConstantModel(c)(np.zeros((2, 6)))


# -------------------------------------------------------------- gradients


def _fd(model, loss_model, x, y, mats, target, h=1e-5):
    theta = model.params.values
    g = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fp = loss_terms(model.with_values(tp), loss_model, x, y, mats, (target,), with_grad=False)[target][0]
        fm = loss_terms(model.with_values(tm), loss_model, x, y, mats, (target,), with_grad=False)[target][0]
        g[i] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("loss_kind", (MSE, SOFTPLUS))
@pytest.mark.parametrize("target", ("total", "mean", "equiv"))
def test_gradients_match_finite_differences(kind, loss_kind, target):
    rng = make_rng(21)
    m = small_model(kind, atoms=3, seed=2)
    x, y = rng.standard_normal((2, 4, 9))
    mats = sample_matrices(so3(), rng, 4 * 3).reshape(4, 3, 3, 3)
    lm = LossModel(loss_kind, 9)
    g = parameter_gradient(m, lm, x, y, mats, target)
    fd = _fd(m, lm, x, y, mats, target)
    sig = np.abs(g) > 1e-8
    assert np.all(np.abs(g[sig] - fd[sig]) <= 1e-4 * np.abs(g[sig]) + 1e-9)
    assert np.all(np.abs(fd[~sig]) <= 1e-7)


def test_unknown_gradient_target(rng):
    m = small_model("coord-mlp")
    with pytest.raises(ValueError):
        parameter_gradient(m, LossModel(MSE, 9), np.zeros((1, 9)), np.zeros((1, 9)), np.eye(3)[None, None], "bogus")


def test_gradient_vanishes_at_exact_minimum(rng):
    m = small_model("equivariant-baseline", atoms=3)
    x = rng.standard_normal((5, 9))
    y = forward(m, x)  # targets reproduced for every rotation
    mats = sample_matrices(so3(), rng, 5 * 4).reshape(5, 4, 3, 3)
    g = parameter_gradient(m, LossModel(MSE, 9), x, y, mats, "total")
    assert np.linalg.norm(g) <= 1e-10


def test_equiv_gradient_zero_for_equivariant_baseline(rng):
    m = small_model("equivariant-baseline", atoms=3)
    x, y = rng.standard_normal((2, 6, 9))
    mats = sample_matrices(so3(), rng, 6 * 5).reshape(6, 5, 3, 3)
    for lk in (MSE, SOFTPLUS):
        assert np.linalg.norm(parameter_gradient(m, LossModel(lk, 9), x, y, mats, "equiv")) <= 1e-8


@given(st.integers(0, 10_000))
def test_gradient_decomposition_sums(seed):
    rng = make_rng(seed)
    m = small_model("coord-mlp", seed=seed % 7)
    x, y = rng.standard_normal((2, 3, 9))
    mats = sample_matrices(so3(), rng, 3 * 4).reshape(3, 4, 3, 3)
    t = loss_terms(m, LossModel(MSE, 9), x, y, mats)
    assert np.linalg.norm(t["total"][1] - t["mean"][1] - t["equiv"][1]) <= 1e-8
    assert abs(t["total"][0] - t["mean"][0] - t["equiv"][0]) <= 1e-12 * max(1.0, t["total"][0])


# ----------------------------------------------------------- init and io


@pytest.mark.parametrize("kind", KINDS)
def test_init_deterministic(kind):
    a, b = small_model(kind, seed=4), small_model(kind, seed=4)
    assert np.array_equal(a.params.values, b.params.values)
    assert not np.array_equal(a.params.values, small_model(kind, seed=5).params.values)


def test_graph_head_initial_deviation_positive():
    assert all(head_deviation_sq(small_model(GRAPH_HEAD, seed=s)) > 0 for s in range(100))


def test_init_rejects_bad_widths():
    with pytest.raises(ValueError):
        init_parameters("coord-mlp", 3, (5,), 0)
    with pytest.raises(ValueError):
        init_parameters("mystery", 3, (6,), 0)


@pytest.mark.parametrize("kind", KINDS)
def test_save_load_round_trip(kind, tmp_path):
    m = small_model(kind, atoms=4, seed=9)
    path, sidecar = save_parameters(m, tmp_path / "p.bin")
    meta = json.loads(sidecar.read_text())
    assert {"kind", "n_atoms", "dimension", "hidden", "seed", "segments"} <= set(meta)
    back = load_parameters(path)
    assert back.kind == kind and back.hidden == m.hidden and back.seed == 9
    assert np.array_equal(back.params.values, m.params.values)


def test_load_rejects_mismatched_layout(tmp_path):
    path, sidecar = save_parameters(small_model("coord-mlp"), tmp_path / "p.bin")
    meta = json.loads(sidecar.read_text())
    meta["kind"] = "equivariant-baseline"
    sidecar.write_text(json.dumps(meta))
    with pytest.raises(ValueError):
        load_parameters(path)


def test_load_rejects_truncated_values(tmp_path):
    path, _ = save_parameters(small_model("coord-mlp"), tmp_path / "p.bin")
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_parameters(path)


def test_c4_twisting_of_linear_map(rng):
    # for the coord-mlp with identity-like layers the twist is rho(T)^-1 f(rho(T) x)
    m = small_model("coord-mlp", atoms=1)
    x = rng.standard_normal((3, 3))
    mats = cyclic(4, "z").matrices()
    zt = twisted_predictions(m, x, mats)
    for k, g in enumerate(mats):
        xr = x @ g.T
        assert np.allclose(zt[:, k], forward(m, xr) @ g, atol=1e-14)
