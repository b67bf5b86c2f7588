"""Manufactured-solution errors and observed orders for both theta-schemes.

Usage: python3 scripts/convergence_study.py [--out convergence.csv]
"""

import argparse
import csv
import math

from glcontrol.acceptance import manufactured_error
from glcontrol.params import Params


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="convergence.csv")
    ap.add_argument("--T", type=float, default=0.5)
    args = ap.parse_args()
    hs = [0.2, 0.1, 0.05, 0.025]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "h", "error", "order"])
        for theta in (0.5, 1.0):
            prev = None
            for h in hs:
                e = manufactured_error(Params(theta_scheme=theta), h, T=args.T)
                order = math.log2(prev / e) if prev else float("nan")
                w.writerow([theta, h, f"{e:.17g}", f"{order:.17g}"])
                print(f"theta={theta} h={h:<6} error={e:.3e} order={order:.2f}")
                prev = e


if __name__ == "__main__":
    main()
