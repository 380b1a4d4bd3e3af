"""Head deviation versus measured equivariance error for the invariant graph head.

    python scripts/head_correlation.py --seeds 3
"""
import argparse
from dataclasses import replace

from scipy import stats

from equidiag.config import ExperimentConfig, ModelConfig
from equidiag.group import build_group, make_rng
from equidiag.models import init_parameters
from equidiag.tasks import make_task
from equidiag.training import train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps", type=int, default=None, help="override the training length")
    args = p.parse_args()
    for seed in range(args.seeds):
        cfg = ExperimentConfig(model=ModelConfig("invariant-graph-head")).with_seed(seed)
        model = init_parameters(cfg.model.kind, cfg.task.atom_count, cfg.model.hidden, cfg.seed)
        train_cfg = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
        _, series = train(model, make_task(cfg.task), train_cfg, make_rng(seed), build_group(cfg.group, seed))
        dev, eq = series.column("head_deviation_sq"), series.column("loss_equiv")
        rho = stats.spearmanr(dev, eq).statistic
        print(f"seed {seed}: Spearman(|W_perp|^2, L_equiv) = {rho:.3f}; |W_perp|^2 {dev[0]:.3g} -> {dev[-1]:.3g}, "
              f"percent {100 * series.column('percent_equiv')[-1]:.3f}%", flush=True)


if __name__ == "__main__":
    main()
