"""Weighted-variational vs penalized-HUM controls on the desk instance.

Prints terminal ratios and L2(omega x (0,T)) control norms, the HUM sweep over the
penalty, and the FI control norm per time slab (where the weights put the effort).

Usage: python3 scripts/control_comparison.py [--eps 1e-4 1e-6 1e-8]
"""

import argparse

import numpy as np

from glcontrol.acceptance import bump, desk_setup
from glcontrol.control import control_norm, penalized_hum, solve_fi_variational
from glcontrol.evolution import l2_norm_frames
from glcontrol.params import Params


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--eps", type=float, nargs="+", default=[1e-4, 1e-6, 1e-8])
    ap.add_argument("--h", type=float, default=0.1)
    ap.add_argument("--N_t", type=int, default=64)
    args = ap.parse_args()
    p = Params()
    mesh, ops, _, grid, wset = desk_setup(p, h=args.h, N_t=args.N_t)
    u0 = bump(mesh.vertices)
    fi = solve_fi_variational(ops, p, wset, u0)
    print(f"FI : terminal {fi.terminal_ratio:.3e}  |h| {control_norm(ops, fi.h):.4f}  "
          f"cg {fi.cg_iters} converged={fi.cg_converged} residual {fi.cg_rel_residual:.2e}")
    for e in args.eps:
        hum = penalized_hum(ops, p, u0, None, e, grid)
        print(f"HUM eps={e:.0e}: terminal {hum.terminal_ratio:.3e}  |h| {control_norm(ops, hum.h):.4f}  "
              f"cg {hum.cg_iters}")
    n = np.sqrt(l2_norm_frames(ops, fi.h.frames) ** 2)
    for q in range(4):
        sl = slice(q * grid.N_t // 4, (q + 1) * grid.N_t // 4 + 1)
        print(f"FI |h(t)| on t in [{grid.nodes[sl][0]:.2f}, {grid.nodes[sl][-1]:.2f}]: max {n[sl].max():.3e}")
    print("FI state norm at T:", l2_norm_frames(ops, fi.y.frames[-1:])[0])


if __name__ == "__main__":
    main()
