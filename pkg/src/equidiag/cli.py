"""Command-line entry point: ``equidiag <command> --config run.toml``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, reports
from .config import ConfigError, ExperimentConfig, dumps, load_config, save_config
from .group import BlockAction, GroupError, ShapeError, build_group, make_rng, sample_matrices
from .losses import LossModel
from .metrics import DecompositionError, ModelEvaluationError, decompose_exact, decompose_sampled, sensitivity_bootstrap
from .models import GRAPH_HEAD, ModelHandle, init_parameters, load_parameters, save_parameters
from .tasks import make_task
from .training import DivergenceError, InsufficientDataError, correlate_loss_vs_grad_ratio, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
OUT_ENV = "EQUIDIAG_OUT"
# independent RNG child streams per command, so analyses never share draws with training
STREAMS = {"measure": 1, "hessian": 2, "landscape": 3, "sensitivity": 4, "theorems": 5, "project-head": 6}
MEASURE_REPEATS = 200  # bootstrap repeats behind the stderr that `measure` reports


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.rotations is not None:
        if args.rotations < 2:
            raise UsageError(f"--rotations {args.rotations}: bias correction needs at least 2 rotations (N/(N-1))")
        cfg = replace(cfg, train=replace(cfg.train, eval_rotations=args.rotations))
    out = args.out or os.environ.get(OUT_ENV) or cfg.out
    return replace(cfg, out=str(out))


def _out_dir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _checkpoint(args, cfg: ExperimentConfig) -> ModelHandle:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint.bin"
    try:
        model = load_parameters(path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {exc.filename}") from exc
    except (ValueError, KeyError) as exc:
        raise UsageError(f"models: cannot load checkpoint {path}: {exc}") from exc
    expect = (cfg.model.kind, cfg.task.atom_count, cfg.model.hidden)
    if (model.kind, model.n_atoms, model.hidden) != expect:
        raise UsageError(f"models: checkpoint layout {(model.kind, model.n_atoms, model.hidden)} does not match "
                         f"config {expect}")
    return model


def _loss(cfg: ExperimentConfig, model: ModelHandle) -> LossModel:
    return LossModel(cfg.train.loss, model.dimension)


def _batch(data, rng: np.random.Generator, size: int):
    idx = np.sort(rng.choice(len(data), size=min(size, len(data)), replace=False))
    return data.take(idx)


def _threads(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    group = build_group(cfg.group, cfg.seed)
    train_set, held = make_task(cfg.task)
    model = init_parameters(cfg.model.kind, cfg.task.atom_count, cfg.model.hidden, cfg.seed)
    ck_step = cfg.analysis.checkpoint_step
    keep = (ck_step,) if 0 <= ck_step <= cfg.train.steps else ()
    try:
        model, series = train(model, (train_set, held), cfg.train, make_rng(cfg.seed), group, checkpoint_steps=keep)
    except DivergenceError as exc:
        raise NumericalFailure(f"training: {exc}") from exc
    artifacts = ["metrics.csv", "decomposition.csv", "checkpoint.bin", "checkpoint.bin.json", "config.toml",
                 "percent.svg", "percent_loglog.svg", "losses.svg"]
    series.write_csv(out / "metrics.csv")
    reports.write_decomposition_csv(out / "decomposition.csv", series.rows)
    save_parameters(model, out / "checkpoint.bin")
    for step, values in series.checkpoints.items():
        save_parameters(model.with_values(values), out / f"checkpoint_step{step}.bin")
        artifacts += [f"checkpoint_step{step}.bin", f"checkpoint_step{step}.bin.json"]
    save_config(cfg, out / "config.toml")
    steps = series.column("step")
    pct = series.column("percent_equiv")
    reports.write_svg(out / "percent.svg", reports.line_plot(
        {"percent from equivariance error": (steps, 100 * pct)}, "Loss share from equivariance error",
        "training step", "percent of total loss", hline=2.0))
    reports.write_svg(out / "percent_loglog.svg", reports.line_plot(
        {"percent from equivariance error": (steps, 100 * pct)}, "Loss share from equivariance error (log-log)",
        "training step", "percent of total loss", logx=True, logy=True))
    reports.write_svg(out / "losses.svg", reports.line_plot(
        {"L_mean": (steps, series.column("loss_mean")), "L_equiv": (steps, series.column("loss_equiv"))},
        "Twirled-prediction error and equivariance error", "training step", "loss", logx=True, logy=True))
    extra = {}
    try:
        extra["loss_vs_grad_ratio"] = correlate_loss_vs_grad_ratio(series)
    except InsufficientDataError as exc:
        extra["loss_vs_grad_ratio"] = {"error": str(exc)}
    if model.kind == GRAPH_HEAD:
        reports.write_rows(out / "head_series.csv", reports.HEAD_SERIES_COLUMNS, series.rows)
        artifacts.append("head_series.csv")
    seeds = {"seed": cfg.seed, "task_seed": cfg.task.seed, "model_seed": cfg.seed,
             "train_stream": "spawn(0) of seed", "measure_stream": "spawn(1) of seed"}
    reports.write_json(out / "manifest.json", reports.manifest(
        cfg.to_dict(), seeds, _dataset_hash(train_set, held), artifacts + ["manifest.json"], extra))
    last = series.rows[-1]
    print(f"trained {cfg.model.kind} for {cfg.train.steps} steps: percent {100 * last['percent_equiv']:.3f}% "
          f"(min {100 * np.nanmin(pct):.3f}%) -> {out}")
    return EXIT_OK


def _dataset_hash(train_set, held) -> str:
    return hashlib.sha256((train_set.digest() + held.digest()).encode()).hexdigest()


def cmd_measure(args) -> int:
    cfg = _config(args)
    model = _checkpoint(args, cfg)
    group = build_group(cfg.group, cfg.seed)
    _, held = make_task(cfg.task)
    loss_model = _loss(cfg, model)
    action = BlockAction(group, model.n_atoms)
    n = cfg.train.eval_rotations
    rng = make_rng(cfg.seed, STREAMS["measure"])
    report, dec = decompose_sampled(model, loss_model, action, held, group, n, rng)
    boot = sensitivity_bootstrap(model, loss_model, action, held, group, n, MEASURE_REPEATS, rng, ns=(n,))
    result = {"decomposition": dec.as_dict(), "estimator": report.as_dict(), "group": cfg.group,
              "samples": len(held),
              "bootstrap": {"n": n, "repeats": MEASURE_REPEATS, "percent_stderr": boot.rows[0][2]}}
    if args.exact_group:
        if not group.is_finite:
            raise UsageError(f"--exact-group needs a finite group; config group is {cfg.group!r}")
        result["exact"] = decompose_exact(model, loss_model, action, held, group).as_dict()
    print(json.dumps(reports.plain(result), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_hessian(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = _checkpoint(args, cfg)
    group = build_group(cfg.group, cfg.seed)
    train_set, _ = make_task(cfg.task)
    loss_model = _loss(cfg, model)
    rng = make_rng(cfg.seed, STREAMS["hessian"])
    batches = args.batches or cfg.analysis.hessian_batches
    r = cfg.analysis.hessian_rotations
    records = []
    for b in range(batches):
        batch = _batch(train_set, rng, cfg.train.batch_size)
        mats = sample_matrices(group, rng, len(batch) * r).reshape(len(batch), r, 3, 3)
        hs = analysis.fd_hessians(model, loss_model, ("mean", "equiv", "total"), cfg.subset,
                                  batch.inputs, batch.targets, mats)
        for kind in ("mean", "equiv", "total"):
            summ = analysis.summarize(0.5 * (hs[kind] + hs[kind].T), cfg.subset, kind, b)
            if summ.degenerate:
                raise NumericalFailure(f"analysis: {kind} Hessian on {cfg.subset} has no positive eigenvalues")
            records.append(summ.record())
    reports.write_json(out / "hessian.json", records)
    idx = np.arange(batches)
    series = {k: (idx, [rec["cond"] for rec in records if rec["loss_kind"] == k]) for k in ("mean", "equiv")}
    reports.write_svg(out / "hessian_condition.svg", reports.line_plot(
        {f"L_{k}": v for k, v in series.items()}, f"Hessian condition numbers on {cfg.subset}", "minibatch",
        "condition number", logy=True))
    for k in ("mean", "equiv", "total"):
        conds = [rec["cond"] for rec in records if rec["loss_kind"] == k]
        print(f"{k:>5}: median condition number {np.median(conds):.4g} over {batches} batch(es)")
    return EXIT_OK


def cmd_landscape(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = _checkpoint(args, cfg)
    group = build_group(cfg.group, cfg.seed)
    train_set, _ = make_task(cfg.task)
    loss_model = _loss(cfg, model)
    rng = make_rng(cfg.seed, STREAMS["landscape"])
    batch = _batch(train_set, rng, cfg.train.batch_size)
    r = cfg.analysis.hessian_rotations
    mats = sample_matrices(group, rng, len(batch) * r).reshape(len(batch), r, 3, 3)
    radius = args.grid_radius or cfg.analysis.grid_radius
    try:
        grids = analysis.landscape_grid(model, loss_model, cfg.subset, batch.inputs, batch.targets, mats,
                                        grid_radius=radius, step_scale=cfg.analysis.step_scale,
                                        learning_rate=cfg.train.learning_rate)
    except analysis.AxisSelectionError as exc:
        raise NumericalFailure(f"analysis: {exc}") from exc
    for k, g in grids.items():
        reports.write_matrix_csv(out / f"landscape_{k}.csv", g.values)
    g0 = grids["total"]
    reports.write_json(out / "landscape.json", {"subset": cfg.subset, "step_size": g0.step_size, "grid_radius": radius,
                                                "axis1": g0.axis1, "axis2": g0.axis2,
                                                "center": {k: g.center for k, g in grids.items()}})
    reports.write_svg(out / "landscape.svg", reports.heatmap_pair(
        {"L_mean": grids["mean"].values, "L_equiv": grids["equiv"].values}, f"Loss landscape on {cfg.subset}"))
    print(f"landscape {2 * radius + 1}x{2 * radius + 1} on {cfg.subset}, step {g0.step_size:.4g} -> {out}")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = _checkpoint(args, cfg)
    group = build_group(cfg.group, cfg.seed)
    _, held = make_task(cfg.task)
    max_n = args.max_n or cfg.analysis.sensitivity_max_n
    repeats = args.repeats or cfg.analysis.sensitivity_repeats
    if max_n < 2:
        raise UsageError("--max-n must be at least 2")
    table = sensitivity_bootstrap(model, _loss(cfg, model), BlockAction(group, model.n_atoms), held, group,
                                  max_n, repeats, make_rng(cfg.seed, STREAMS["sensitivity"]))
    reports.write_bootstrap_csv(out / "sensitivity.csv", table.rows)
    ns = [row[0] for row in table.rows]
    reports.write_svg(out / "sensitivity.svg", reports.line_plot(
        {"bootstrap stderr": (ns, [row[2] for row in table.rows])}, "Percent-estimate stderr vs rotation count",
        "rotations per sample", "stderr of percent", logx=True, logy=True))
    print(f"sensitivity: {len(table.rows)} row(s), repeats {repeats} -> {out / 'sensitivity.csv'}")
    return EXIT_OK


def cmd_theorems(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = _checkpoint(args, cfg)
    group = build_group(cfg.theorem_group, cfg.seed)
    if not group.is_finite:
        raise UsageError(f"theorem checks need a finite group; got {cfg.theorem_group!r}")
    _, held = make_task(cfg.task)
    data = held.take(slice(0, cfg.analysis.theorem_samples))
    rng = make_rng(cfg.seed, STREAMS["theorems"])
    result = {"group": cfg.theorem_group, "samples": len(data)}
    try:
        if model.kind == GRAPH_HEAD:
            t1 = analysis.verify_theorem1(model, data, group, rng=rng)
            result["theorem1"] = t1.as_dict()
            if t1.degenerate:
                reports.write_json(out / "theorems.json", result)
                raise NumericalFailure("analysis: quadratic form is degenerate on this dataset (lambda_min below floor)")
        t23 = analysis.verify_theorem2_3(model, group, data, segments=[cfg.subset])
    except analysis.SignalTooSmallError as exc:
        raise NumericalFailure(f"analysis: {exc}") from exc
    result["theorem2_3"] = t23.as_dict()
    reports.write_json(out / "theorems.json", result)
    print(f"quadratic slope {t23.quadratic_slope_small:.6f}, gradient slope {t23.gradient_slope_small:.6f} "
          f"on {cfg.subset} under {cfg.theorem_group}")
    return EXIT_OK


def cmd_project_head(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = _checkpoint(args, cfg)
    group = build_group(cfg.theorem_group, cfg.seed)
    if not group.is_finite:
        raise UsageError(f"projection needs a finite group; got {cfg.theorem_group!r}")
    split = analysis.split_model(model, group, [cfg.subset])
    projected = model.with_values(split.equivariant)
    _, held = make_task(cfg.task)
    data = held.take(slice(0, cfg.analysis.theorem_samples))
    loss_model = _loss(cfg, model)
    action = BlockAction(group, model.n_atoms)
    before = decompose_exact(model, loss_model, action, data, group)
    after = decompose_exact(projected, loss_model, action, data, group)
    result = {"subset": cfg.subset, "group": cfg.theorem_group, "deviation_norm_sq": split.deviation_norm_sq,
              "before": before.as_dict(), "after": after.as_dict()}
    if model.kind == GRAPH_HEAD:
        w = analysis.head_weights(model)
        wbar = w.mean(axis=0)
        result["w_bar"] = wbar
        result["d"] = {axis: w[k] - wbar for k, axis in enumerate("xyz")}
    save_parameters(projected, out / "checkpoint_projected.bin")
    reports.write_json(out / "projection.json", result)
    print(f"projected {cfg.subset}: ||theta_perp||^2 = {split.deviation_norm_sq:.6g}; exact percent under "
          f"{cfg.theorem_group} {100 * before.percent:.4f}% -> {100 * after.percent:.4f}%")
    return EXIT_OK


def cmd_show_config(args) -> int:
    print(dumps(_config(args), args.format), end="")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="experiment config (.toml or .json); defaults when omitted")
    shared.add_argument("--seed", type=int, help="override the config seed")
    shared.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else config 'out')")
    shared.add_argument("--threads", type=int, default=None, help="cap numerical worker threads")
    shared.add_argument("--rotations", type=int, help="rotations per sample for measurements (N >= 2)")
    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", help="parameter file (default: <out>/checkpoint.bin)")

    p = argparse.ArgumentParser(prog="equidiag", description="Equivariance diagnostics for augmented training.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[shared], help="train with augmentation and log the loss decomposition"
                   ).set_defaults(func=cmd_train)
    m = sub.add_parser("measure", parents=[shared, ckpt], help="print the loss decomposition of a checkpoint as JSON")
    m.add_argument("--exact-group", action="store_true", help="also enumerate the (finite) group exactly")
    m.set_defaults(func=cmd_measure)
    h = sub.add_parser("hessian", parents=[shared, ckpt], help="Hessian condition numbers of L_mean / L_equiv")
    h.add_argument("--batches", type=int, help="number of minibatches (default from config)")
    h.set_defaults(func=cmd_hessian)
    ls = sub.add_parser("landscape", parents=[shared, ckpt], help="2D loss-landscape grids")
    ls.add_argument("--grid-radius", type=int, help="points per side = 2 * radius + 1")
    ls.set_defaults(func=cmd_landscape)
    s = sub.add_parser("sensitivity", parents=[shared, ckpt], help="bootstrap stderr vs rotation count")
    s.add_argument("--max-n", type=int, help="largest rotation count")
    s.add_argument("--repeats", type=int, help="bootstrap repeats per row")
    s.set_defaults(func=cmd_sensitivity)
    sub.add_parser("theorems", parents=[shared, ckpt], help="numerical checks of the deviation-scaling theorems"
                   ).set_defaults(func=cmd_theorems)
    sub.add_parser("project-head", parents=[shared, ckpt], help="project a layer onto its equivariant subspace"
                   ).set_defaults(func=cmd_project_head)
    c = sub.add_parser("show-config", parents=[shared], help="print the fully resolved config")
    c.add_argument("--format", choices=("toml", "json"), default="toml")
    c.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        with _threads(args.threads):
            return args.func(args)
    except (UsageError, ConfigError, GroupError, ShapeError, InsufficientDataError, analysis.BudgetError) as exc:
        print(f"equidiag {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, DivergenceError, DecompositionError, ModelEvaluationError,
            FloatingPointError) as exc:
        print(f"equidiag {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KeyError as exc:
        print(f"equidiag {args.command}: error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
