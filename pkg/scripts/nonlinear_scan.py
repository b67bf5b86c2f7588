"""Source-iteration behaviour of the nonlinear null control versus |u0|_H1.

The contraction factor grows like the square of the amplitude; the scan shows
where the loop stops being a contraction and where the smallness gate rejects.

Usage: python3 scripts/nonlinear_scan.py [--amps 1e-3 1e-2 0.1 0.5 1 2] [--c 1]
"""

import argparse

from glcontrol.acceptance import bump, desk_setup
from glcontrol.control import nonlinear_null_control
from glcontrol.evolution import h1_norm_frames
from glcontrol.params import DivergenceError, Params, PreconditionError


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--amps", type=float, nargs="+", default=[1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0])
    ap.add_argument("--c", type=float, default=1.0)
    ap.add_argument("--N_t", type=int, default=64)
    args = ap.parse_args()
    p = Params(c=args.c)
    mesh, ops, _, grid, wset = desk_setup(p, N_t=args.N_t)
    d = bump(mesh.vertices)
    d /= h1_norm_frames(ops, d[None])[0]
    for a in args.amps:
        try:
            res, log = nonlinear_null_control(ops, p, wset, a * d)
            print(f"|u0|={a:<7g} iterations {log.iterations}  max factor {log.max_factor:.2e}  "
                  f"residual_rel {log.residual_rel:.1e}  terminal {res.terminal_ratio:.2e}")
        except (DivergenceError, PreconditionError) as exc:
            print(f"|u0|={a:<7g} {type(exc).__name__}: {exc}")


if __name__ == "__main__":
    main()
