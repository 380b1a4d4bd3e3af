import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_model
from equidiag.group import BlockAction, make_rng, rotate_blocks, sample_matrices, so3, trivial_group
from equidiag.losses import MSE, LossModel
from equidiag.metrics import decompose_sampled
from equidiag.models import init_parameters, loss_terms
from equidiag.tasks import ALIGNED, Dataset, SyntheticTask, align_principal_axes, make_task, spring_forces
from equidiag.training import (
    COLUMNS, SGD, Adam, DivergenceError, InsufficientDataError, MetricsTimeSeries, TrainConfig,
    correlate_loss_vs_grad_ratio, gradient_norm_ratio, train,
)

GOLDEN_HEADER = ("step,loss_total,loss_mean,loss_equiv,percent_equiv,grad_norm_total,grad_norm_mean,"
                 "grad_norm_equiv,grad_norm_ratio,head_deviation_sq,epsilon,n_rotations,seed")
TINY = SyntheticTask(atom_count=4, sample_count=96, heldout_count=24, seed=1)


# ------------------------------------------------------------------- tasks


def test_spring_two_atoms_on_axis():
    d = 0.8
    y = spring_forces(np.array([[0.0, 0, 0, d, 0, 0]]))[0]
    assert np.allclose(y[:3], [d * np.exp(-d * d), 0, 0], atol=1e-15)
    assert np.allclose(y[3:], -y[:3], atol=1e-15)


@pytest.mark.parametrize("kind", ("spring-forces", "noisy-autoencode"))
def test_task_targets_are_equivariant(kind):
    train_set, held = make_task(SyntheticTask(kind=kind, atom_count=5, sample_count=100, heldout_count=10, seed=2))
    rng = make_rng(0)
    mats = sample_matrices(so3(), rng, 100)
    if kind == "spring-forces":
        xr = rotate_blocks(mats, train_set.inputs)
        assert np.abs(spring_forces(xr) - rotate_blocks(mats, train_set.targets)).max() <= 1e-10
    else:
        noise = train_set.inputs - train_set.targets
        assert 0.05 < noise.std() < 0.2
    assert len(held) == 10


def test_spring_forces_sum_to_zero():
    train_set, _ = make_task(SyntheticTask(atom_count=6, sample_count=50, heldout_count=5))
    per = train_set.targets.reshape(50, 6, 3).sum(axis=1)
    assert np.abs(per).max() <= 1e-12


def test_task_is_deterministic_and_splits_disjoint():
    a, ha = make_task(TINY)
    b, hb = make_task(TINY)
    assert a.digest() == b.digest() and ha.digest() == hb.digest()
    assert not any(np.allclose(h, t) for h in ha.inputs for t in a.inputs)


def test_task_validation():
    with pytest.raises(ValueError):
        SyntheticTask(kind="nbody")
    with pytest.raises(ValueError):
        SyntheticTask(orientation="sideways")
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.zeros((2, 6)))


def test_alignment_is_a_rotation_and_canonical():
    rng = make_rng(3)
    p = rng.standard_normal((20, 5, 3))
    p -= p.mean(axis=1, keepdims=True)
    x = p.reshape(20, 15)
    al = align_principal_axes(x)
    # pairwise distances preserved, and rotated copies align to the same frame
    d0 = np.linalg.norm(p[:, :, None] - p[:, None], axis=-1)
    q = al.reshape(20, 5, 3)
    assert np.allclose(np.linalg.norm(q[:, :, None] - q[:, None], axis=-1), d0, atol=1e-12)
    xr = rotate_blocks(sample_matrices(so3(), rng, 20), x)
    assert np.allclose(align_principal_axes(xr), al, atol=1e-9)


# ----------------------------------------------------------- config/series


def test_train_config_validation():
    for bad in (dict(steps=0), dict(measure_every=0), dict(optimizer="lbfgs"), dict(eval_rotations=1),
                dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_series_steps_strictly_increasing():
    s = MetricsTimeSeries()
    s.append({"step": 0})
    with pytest.raises(ValueError):
        s.append({"step": 0})


def test_metrics_csv_golden_header_and_round_trip(tmp_path):
    model = small_model("invariant-graph-head", atoms=4)
    _, series = train(model, TINY, TrainConfig(steps=20, measure_every=10, batch_size=8, eval_rotations=3),
                      make_rng(0))
    path = tmp_path / "m.csv"
    series.write_csv(path)
    assert path.read_text().splitlines()[0] == GOLDEN_HEADER
    assert ",".join(COLUMNS) == GOLDEN_HEADER
    back = MetricsTimeSeries.read_csv(path)
    for a, b in zip(series.rows, back.rows):
        for c in COLUMNS:
            assert a[c] == b[c] or (np.isnan(a[c]) and np.isnan(b[c]))


def test_read_csv_rejects_wrong_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("step,loss\n0,1\n")
    with pytest.raises(ValueError):
        MetricsTimeSeries.read_csv(p)


# --------------------------------------------------------------- optimizers


def test_sgd_converges_on_quadratic_bowl():
    a = np.diag([1.0, 3.0])
    target = np.array([0.5, -2.0])
    theta = np.array([3.0, 4.0])
    opt = SGD(0.05)
    for _ in range(10_000):
        theta = opt.step(theta, a @ (theta - target))
    assert np.abs(theta - target).max() <= 1e-6


def test_adam_three_step_hand_trace():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    opt = Adam(lr)
    theta = np.array([1.0, -2.0])
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.4]), np.array([-0.3, 0.1])]
    m = v = np.zeros(2)
    ref = theta.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        theta = opt.step(theta, g)
        assert np.allclose(theta, ref, rtol=0, atol=1e-15)
    # first step of Adam moves every coordinate by lr against the gradient sign
    assert np.allclose(Adam(lr).step(np.zeros(2), np.array([3.0, -0.01])), [-lr, lr], atol=1e-6)


# ----------------------------------------------------------------- training


def test_equivariant_baseline_percent_is_zero():
    m = small_model("equivariant-baseline", atoms=4)
    _, series = train(m, TINY, TrainConfig(steps=40, measure_every=10, batch_size=8, eval_rotations=4), make_rng(1))
    assert np.abs(series.column("percent_equiv")).max() <= 1e-12
    assert np.abs(series.column("grad_norm_equiv")).max() <= 1e-8


def test_zero_learning_rate_keeps_parameters():
    m = small_model("invariant-graph-head", atoms=4)
    cfg = TrainConfig(steps=60, measure_every=10, batch_size=8, eval_rotations=6, learning_rate=0.0)
    final, series = train(m, TINY, cfg, make_rng(2))
    assert np.array_equal(final.params.values, m.params.values)
    assert np.all(series.column("head_deviation_sq") == series.column("head_deviation_sq")[0])
    eq = series.column("loss_equiv")
    assert eq.std() <= 0.2 * eq.mean()
    # with an exactly enumerable (trivial) group, every metric is fixed exactly
    _, exact = train(m, TINY, cfg, make_rng(2), group=trivial_group())
    assert np.all(exact.column("loss_mean") == exact.column("loss_mean")[0])


def test_training_is_deterministic():
    m = small_model("coord-mlp", atoms=4)
    cfg = TrainConfig(steps=30, measure_every=10, batch_size=8, eval_rotations=3, seed=4)
    _, a = train(m, TINY, cfg, make_rng(4))
    _, b = train(m, TINY, cfg, make_rng(4))
    assert a.rows == b.rows or all(
        np.array_equal(np.array(list(r.values()), float), np.array(list(s.values()), float), equal_nan=True)
        for r, s in zip(a.rows, b.rows))


def test_divergence_guard():
    m = small_model("coord-mlp", atoms=4)
    cfg = TrainConfig(optimizer="sgd", learning_rate=1e4, steps=200, measure_every=1, batch_size=8, eval_rotations=2)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        train(m, TINY, cfg, make_rng(5))


def test_checkpoints_and_stop_after():
    m = small_model("coord-mlp", atoms=4)
    cfg = TrainConfig(steps=50, measure_every=10, batch_size=8, eval_rotations=2)
    _, series = train(m, TINY, cfg, make_rng(6), checkpoint_steps=(0, 20), stop_after=30)
    assert sorted(series.checkpoints) == [0, 20]
    assert np.array_equal(series.checkpoints[0], m.params.values)
    assert series.column("step").tolist() == [0, 10, 20, 30]


def test_augmentation_cannot_hurt_symmetrized_loss():
    # sign test over 5 seeds on orientation-aligned training data
    wins = 0
    for seed in range(5):
        task = SyntheticTask(seed=seed, sample_count=512, heldout_count=128, orientation=ALIGNED)
        train_set, held = make_task(task)
        scores = []
        for aug in (True, False):
            m = init_parameters("coord-mlp", 8, (48, 48), seed)
            cfg = TrainConfig(steps=1000, augmentation=aug, measure_every=1000, seed=seed)
            m, _ = train(m, (train_set, held), cfg, make_rng(seed))
            _, dec = decompose_sampled(m, LossModel(MSE, 24), BlockAction(so3(), 8), held, so3(), 10, make_rng(99))
            scores.append(dec.mean)
        wins += scores[0] <= scores[1]
    assert wins == 5  # one-sided sign test, p = 1/32


# ------------------------------------------------------------- diagnostics


def test_gradient_norm_ratio_sum_and_baseline(rng):
    x, y = rng.standard_normal((2, 6, 12))
    mats = sample_matrices(so3(), rng, 6 * 4).reshape(6, 4, 3, 3)
    lm = LossModel(MSE, 12)
    g = gradient_norm_ratio(small_model("coord-mlp", atoms=4), lm, Dataset(x, y), mats)
    assert g["residual"] <= 1e-8
    base = gradient_norm_ratio(small_model("equivariant-baseline", atoms=4), lm, Dataset(x, y), mats)
    assert base["norm_equiv"] <= 1e-8 and base["ratio"] <= 1e-6


def test_gradient_norm_ratio_matches_finite_differences(rng):
    m = small_model("coord-mlp", atoms=2, seed=3)
    x, y = rng.standard_normal((2, 4, 6))
    mats = sample_matrices(so3(), rng, 4 * 3).reshape(4, 3, 3, 3)
    lm = LossModel(MSE, 6)
    theta = m.params.values
    fd = {}
    for t in ("mean", "equiv"):
        g = np.empty_like(theta)
        for i in range(theta.size):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += 1e-6
            tm[i] -= 1e-6
            f = lambda v: loss_terms(m.with_values(v), lm, x, y, mats, (t,), with_grad=False)[t][0]
            g[i] = (f(tp) - f(tm)) / 2e-6
        fd[t] = np.linalg.norm(g)
    ratio = gradient_norm_ratio(m, lm, Dataset(x, y), mats)["ratio"]
    assert ratio == pytest.approx(fd["equiv"] / fd["mean"], rel=1e-3)


def _series(eps, ratio):
    s = MetricsTimeSeries()
    for k, (e, r) in enumerate(zip(eps, ratio)):
        s.append({"step": k, "epsilon": e, "grad_norm_ratio": r})
    return s


def test_correlation_exact_relations():
    eps = np.geomspace(1e-3, 1.0, 30)
    assert correlate_loss_vs_grad_ratio(_series(eps, eps))["pearson_loglog"] == pytest.approx(1.0, abs=1e-12)
    out = correlate_loss_vs_grad_ratio(_series(eps, 3 * eps**0.5))
    assert out["pearson_loglog"] == pytest.approx(1.0, abs=1e-12) and out["spearman"] == pytest.approx(1.0)


def test_correlation_excludes_undefined_rows():
    eps = list(np.geomspace(1e-3, 1.0, 12)) + [np.nan, 0.1]
    ratio = list(np.geomspace(1e-2, 1.0, 12)) + [0.5, np.nan]
    out = correlate_loss_vs_grad_ratio(_series(eps, ratio))
    assert out["n_used"] == 12 and out["n_excluded"] == 2


def test_correlation_shuffled_null():
    rng = make_rng(8)
    eps = np.geomspace(1e-3, 1.0, 60)
    small = 0
    for _ in range(100):
        r = correlate_loss_vs_grad_ratio(_series(eps, rng.permutation(eps)))["pearson_loglog"]
        small += abs(r) < 0.3
    assert small >= 95


def test_correlation_needs_ten_rows():
    with pytest.raises(InsufficientDataError):
        correlate_loss_vs_grad_ratio(_series(np.ones(9), np.ones(9)))


@given(st.floats(0.1, 3.0), st.floats(0.2, 2.0))
def test_correlation_invariant_to_power_laws(c, p):
    eps = np.geomspace(1e-4, 1.0, 15)
    assert correlate_loss_vs_grad_ratio(_series(eps, c * eps**p))["pearson_loglog"] == pytest.approx(1.0, abs=1e-9)
