"""log10 of the observability ratio against s and under mesh refinement.

Usage: python3 scripts/observability_scan.py [--s 1.1 2.2 4.4] [--samples 50]
"""

import argparse

from glcontrol.acceptance import desk_setup
from glcontrol.control import observability_constant
from glcontrol.params import Params


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--s", type=float, nargs="+", default=[1.1, 2.2, 4.4])
    ap.add_argument("--h", type=float, nargs="+", default=[0.1, 0.05])
    ap.add_argument("--samples", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for s in args.s:
        p = Params(s=s)
        vals = []
        for h in args.h:
            mesh, ops, _, grid, wset = desk_setup(p, h=h)
            est = observability_constant(ops, p, wset, args.samples, args.seed, mesh)
            vals.append(est.log10_max_ratio)
        print(f"s={s:<5} " + "  ".join(f"h={h}: log10 ratio {v:.4f}" for h, v in zip(args.h, vals)))


if __name__ == "__main__":
    main()
