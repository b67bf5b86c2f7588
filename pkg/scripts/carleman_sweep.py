"""Carleman LHS/RHS over the analytic test family on an (s, lambda) grid.

Usage: python3 scripts/carleman_sweep.py [--s 2 5 10 20 40] [--lam 1.5 2 3] [--out ratios.csv]
"""

import argparse

from glcontrol.acceptance import DESK_GEOMETRY, desk_setup
from glcontrol.carleman import TestFunctionFamily, carleman_ratio, max_ratio_by_s, write_ratio_csv
from glcontrol.params import Params


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--s", type=float, nargs="+", default=[2.0, 5.0, 10.0, 20.0, 40.0])
    ap.add_argument("--lam", type=float, nargs="+", default=[1.5, 2.0, 3.0])
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="carleman_ratios.csv")
    args = ap.parse_args()
    p = Params()
    mesh, ops, _, grid, _ = desk_setup(p, seed=args.seed)
    fam = TestFunctionFamily(args.seed, args.count, p.T, DESK_GEOMETRY.R, DESK_GEOMETRY.r_control)
    rows = carleman_ratio(fam, p, args.s, args.lam, mesh, grid, ops)
    write_ratio_csv(rows, args.out)
    for lam in args.lam:
        for s, r in max_ratio_by_s(rows, lam).items():
            clamped = max(x["clamped_fraction"] for x in rows if x["s"] == s and x["lambda"] == lam)
            print(f"lambda={lam:<4} s={s:<5} max ratio={r:.6g}  clamped fraction={clamped:.3f}")


if __name__ == "__main__":
    main()
