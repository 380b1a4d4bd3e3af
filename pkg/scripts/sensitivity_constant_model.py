"""Bootstrap stderr of the percent estimate versus rotation count on a constant model.

A constant prediction c has an analytic equivariance error |c|^2 / D under
SO(3), so the stderr curve should fall like 1/sqrt(N).

    python scripts/sensitivity_constant_model.py --seeds 5
"""
import argparse

import numpy as np

from equidiag.group import BlockAction, make_rng, so3
from equidiag.losses import MSE, LossModel
from equidiag.metrics import sensitivity_bootstrap
from equidiag.models import ConstantModel
from equidiag.tasks import Dataset

C = np.array([1.0, 0.5, -0.3, 0.2, 0.8, -1.0])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--max-n", type=int, default=400)
    p.add_argument("--repeats", type=int, default=400)
    p.add_argument("--ns", default="4,10,25,100,400")
    args = p.parse_args()
    ns = tuple(int(n) for n in args.ns.split(","))
    for seed in range(args.seeds):
        rng = make_rng(seed)
        ds = Dataset(np.zeros((args.samples, 6)), rng.standard_normal((args.samples, 6)))
        tab = sensitivity_bootstrap(ConstantModel(C), LossModel(MSE, 6), BlockAction(so3(), 2), ds, so3(),
                                    args.max_n, args.repeats, rng, ns=ns)
        se = {n: s for n, _, s in tab.rows}
        ratios = [f"{a}->{b}: {se[a] / se[b]:.2f}" for a, b in zip(ns, ns[1:]) if b == 4 * a]
        print(f"seed {seed}: " + " ".join(f"N={n} se={se[n]:.4f}" for n in ns) + "  ratios " + ", ".join(ratios))


if __name__ == "__main__":
    main()
