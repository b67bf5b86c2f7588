"""Desk-scale acceptance checks, shared by ``verify-all`` and the test suite.

Every ``criterion_k`` returns a :class:`CheckResult` whose ``metrics`` are
deterministic numbers (safe to serialise byte-for-byte); wall-clock runtime is
kept separately in ``runtime``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import assemble
from .carleman import (
    LAMBDA0,
    LHS_TERMS,
    RHS_TERMS,
    TestFunctionFamily,
    carleman_ratio,
    collocation_points,
    conjugate_identity_defect,
    max_ratio_by_s,
)
from .control import (
    control_norm,
    estimate_delta,
    nonlinear_null_control,
    observability_constant,
    penalized_hum,
    solve_fi_variational,
)
from .evolution import (
    TimeGrid,
    Trajectory,
    duality_check,
    duality_terms,
    h1_norm_frames,
    l2_norm_frames,
    solve_forward,
)
from .geometry import build_eta0, build_mesh
from .params import DiskGeometry, DivergenceError, Params
from .weights import WeightConstants, eval_weights, inv_tt, mu, weight_gradients

DESK_GEOMETRY = DiskGeometry(1.0, 0.25, 0.5)
DESK_H = 0.1
DESK_NT = 64
# coarse meshes down to h = 0.2 need r_inner > 0.4
CONVERGENCE_GEOMETRY = DiskGeometry(1.0, 0.45, 0.6)
SMALL_GEOMETRY = DiskGeometry(1.0, 0.75, 0.9)
BUMP_CENTER = (0.55, 0.2)


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    metrics: dict
    checks: dict = field(default_factory=dict)
    runtime: float = 0.0
    runtime_limit: float = math.inf

    @property
    def within_time(self) -> bool:
        return self.runtime <= self.runtime_limit

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        failed = [k for k, ok in self.checks.items() if not ok]
        extra = f" (failed: {', '.join(failed)})" if failed else ""
        return (f"criterion {self.number:2d} [{flag}] {self.name}: runtime {self.runtime:.1f}s "
                f"(limit {self.runtime_limit:.0f}s){extra}")

    def to_dict(self) -> dict:
        return {"number": self.number, "name": self.name, "passed": self.passed,
                "checks": self.checks, "metrics": self.metrics}


def bump(X, center=BUMP_CENTER, width=8.0) -> np.ndarray:
    d = np.asarray(X) - np.asarray(center)
    return np.exp(-width * np.sum(d**2, axis=-1)).astype(complex)


def desk_setup(params: Params | None = None, h: float = DESK_H, N_t: int = DESK_NT, seed: int = 0):
    params = params or Params()
    mesh = build_mesh(DESK_GEOMETRY, h, seed)
    ops = assemble(mesh)
    eta = build_eta0(mesh, DESK_GEOMETRY)
    grid = TimeGrid(params.T, N_t)
    wset = eval_weights(mesh, eta, params, grid)
    return mesh, ops, eta, grid, wset


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.runtime = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --- 1: assembly -----------------------------------------------------------------

@_timed
def criterion_1(seed: int = 0) -> CheckResult:
    """Measures of the disk and its circle, stiffness of constants."""
    g = DESK_GEOMETRY
    mesh = build_mesh(g, DESK_H, seed)
    ops = assemble(mesh)
    one = np.ones(ops.n)
    area = float(one @ ops.M_bulk @ one)
    perim = float(one @ ops.M_surf @ one)
    k_const = float(max(np.abs(ops.K_bulk @ one).max(), np.abs(ops.K_surf @ one).max()))
    m = {"area": area, "area_rel_err": abs(area - g.area) / g.area, "perimeter": perim,
         "perimeter_rel_err": abs(perim - g.perimeter) / g.perimeter, "K_const_max": k_const}
    checks = {"area_1pct": m["area_rel_err"] <= 0.01, "perimeter_1pct": m["perimeter_rel_err"] <= 0.01,
              "K_annihilates_constants": k_const <= 1e-13}
    return CheckResult(1, "weak-form assembly", all(checks.values()), m, checks, runtime_limit=1.0)


# --- 2: forward solver -----------------------------------------------------------

def manufactured_solution(params: Params, R: float = 1.0, k=(1.3, 0.7), omega: float = 2.0):
    """u = exp((i omega - 1/2) t) g(x), g = cos(k1 x1) cos(k2 x2) + i x1 x2^2.

    Returns callables ``u(X, t)``, ``f(X, t)`` (bulk) and ``f_gamma(X, t)`` on |x| = R.
    """
    k1, k2 = k
    za = params.a * (1 + 1j * params.alpha)
    zb = params.b * (1 + 1j * params.alpha)
    lam_t = 1j * omega - 0.5

    def parts(X):
        x1, x2 = X[..., 0], X[..., 1]
        c1, s1, c2, s2 = np.cos(k1 * x1), np.sin(k1 * x1), np.cos(k2 * x2), np.sin(k2 * x2)
        g = c1 * c2 + 1j * x1 * x2**2
        gx = -k1 * s1 * c2 + 1j * x2**2
        gy = -k2 * c1 * s2 + 2j * x1 * x2
        hxx = -(k1**2) * c1 * c2
        hyy = -(k2**2) * c1 * c2 + 2j * x1
        hxy = k1 * k2 * s1 * s2 + 2j * x2
        return g, gx, gy, hxx, hyy, hxy

    def u(X, t):
        return np.exp(lam_t * t) * parts(X)[0]

    def f(X, t):
        g, _, _, hxx, hyy, _ = parts(X)
        return np.exp(lam_t * t) * (lam_t * g - za * (hxx + hyy))

    def f_gamma(X, t):
        g, gx, gy, hxx, hyy, hxy = parts(X)
        r = np.linalg.norm(X, axis=-1)
        nx, ny = X[..., 0] / r, X[..., 1] / r
        dn = gx * nx + gy * ny
        # tau = (-ny, nx); Laplace-Beltrami on a circle = tau.H.tau - dn / R
        lap_t = hxx * ny**2 - 2 * hxy * nx * ny + hyy * nx**2 - dn / R
        return np.exp(lam_t * t) * (lam_t * g + za * dn - zb * lap_t)

    return u, f, f_gamma


def manufactured_error(params: Params, h: float, geom: DiskGeometry = CONVERGENCE_GEOMETRY,
                       seed: int = 0, T: float = 0.5) -> float:
    """L2 error at T against the nodal interpolant, with dt = h / 2."""
    mesh = build_mesh(geom, h, seed)
    ops = assemble(mesh)
    N_t = max(1, int(round(T / (h / 2))))
    grid = TimeGrid(T, N_t)
    u, f, fg = manufactured_solution(params, geom.R)
    X = mesh.vertices
    t = grid.nodes[:, None]
    F = f(X[None], t)
    FG = np.zeros_like(F)
    FG[:, mesh.boundary_loop] = fg(X[mesh.boundary_loop][None], t)
    src = Trajectory(grid, F, "source", surface=FG)
    y = solve_forward(ops, params, u(X, 0.0), src, None)
    err = y.frames[-1] - u(X, T)
    return float(l2_norm_frames(ops, err[None])[0])


@_timed
def criterion_2(seed: int = 0) -> CheckResult:
    """Manufactured-solution order, per-step dissipativity (theta = 1), conjugation symmetry."""
    p = Params(theta_scheme=0.5)
    hs = [0.2, 0.1, 0.05]
    errs = [manufactured_error(p, h, seed=seed) for h in hs]
    orders = [math.log(errs[i] / errs[i + 1]) / math.log(hs[i] / hs[i + 1]) for i in range(2)]

    mesh = build_mesh(DESK_GEOMETRY, DESK_H, seed)
    ops = assemble(mesh)
    rng = np.random.default_rng(seed)
    u0 = rng.standard_normal(ops.n) + 1j * rng.standard_normal(ops.n)
    grid = TimeGrid(1.0, DESK_NT)
    y = solve_forward(ops, Params(theta_scheme=1.0), u0, None, None, grid)
    l2 = l2_norm_frames(ops, y.frames)
    max_increase = float(np.max(np.diff(l2)))

    pa = Params(alpha=0.7)
    pb = Params(alpha=-0.7)
    F = rng.standard_normal((DESK_NT + 1, ops.n)) + 1j * rng.standard_normal((DESK_NT + 1, ops.n))
    ya = solve_forward(ops, pa, u0, Trajectory(grid, F, "source"), None)
    yb = solve_forward(ops, pb, np.conj(u0), Trajectory(grid, np.conj(F), "source"), None)
    conj_defect = float(np.abs(ya.frames - np.conj(yb.frames)).max() / np.abs(ya.frames).max())

    m = {"h": hs, "errors": errs, "orders": orders, "max_l2_increase_theta1": max_increase,
         "conjugation_defect": conj_defect}
    checks = {"order_ge_1.8": min(orders) >= 1.8, "dissipative_every_step": max_increase <= 0.0,
              "conjugation_roundoff": conj_defect <= 1e-12}
    return CheckResult(2, "forward solver", all(checks.values()), m, checks, runtime_limit=120.0)


# --- 3: duality ------------------------------------------------------------------

def random_small_instance(rng, ops, grid):
    n, N = ops.n, grid.N_t

    def cplx(*shape):
        return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)

    u0, zT = cplx(n), cplx(n)
    f = Trajectory(grid, cplx(N + 1, n), "source", surface=cplx(N + 1, n))
    h = Trajectory(grid, cplx(N + 1, n), "control")
    g = Trajectory(grid, cplx(N + 1, n), "source", surface=cplx(N + 1, n))
    return u0, f, h, zT, g


def dense_duality_oracle(ops, params, grid, u0, f, h, zT, g) -> dict:
    """Forward and adjoint solves through explicit dense space-time matrices.

    The forward map is the block lower-bidiagonal system E Y = Phi + (B y0, 0, ...);
    the multipliers solve E^H P = (M zT at the last block) - dt Gamma. Returns the
    duality terms and the final states.
    """
    n, N, dt, th = ops.n, grid.N_t, grid.dt, params.theta_scheme
    M = ops.M.toarray()
    KW = (params.a * ops.K_bulk + params.b * ops.K_surf).toarray() * (1 + 1j * params.alpha)
    A = M + th * dt * KW
    B = M - (1 - th) * dt * KW
    E = np.zeros((N * n, N * n), dtype=complex)
    for k in range(N):
        E[k * n:(k + 1) * n, k * n:(k + 1) * n] = A
        if k:
            E[k * n:(k + 1) * n, (k - 1) * n:k * n] = -B
    fs = f.frames if f.surface is None else f.surface
    G = f.frames @ ops.M_bulk.toarray().T + fs @ ops.M_surf.toarray().T + h.frames @ ops.M_ctrl.toarray().T
    gs = g.frames if g.surface is None else g.surface
    Gam = g.frames @ ops.M_bulk.toarray().T + gs @ ops.M_surf.toarray().T
    Phi = dt * (th * G[1:] + (1 - th) * G[:-1])
    rhs = Phi.copy()
    rhs[0] += B @ u0
    Y = np.linalg.solve(E, rhs.ravel()).reshape(N, n)
    r2 = -dt * Gam[1:].copy()
    r2[-1] += M @ zT
    P = np.linalg.solve(E.conj().T, r2.ravel()).reshape(N, n)
    z0 = np.linalg.solve(M, B.conj().T @ P[0])
    return {
        "terminal": float(np.real(Y[-1] @ M @ np.conj(zT))),
        "initial": float(np.real(u0 @ M @ np.conj(z0))),
        "source": float(np.real(np.sum(Phi * np.conj(P)))),
        "observation": float(dt * np.real(np.sum(Y * np.conj(Gam[1:])))),
        "Y": Y,
        "z0": z0,
    }


@_timed
def criterion_3(seed: int = 0, count: int = 20) -> CheckResult:
    mesh = build_mesh(SMALL_GEOMETRY, 0.35, seed)
    ops = assemble(mesh)
    grid = TimeGrid(1.0, 4)
    p = Params()
    rng = np.random.default_rng(seed)
    defects = []
    for _ in range(count):
        defects.append(duality_check(ops, p, *random_small_instance(rng, ops, grid), grid))
    # one instance against the dense oracle
    inst = random_small_instance(np.random.default_rng(seed + 1), ops, grid)
    ours = duality_terms(ops, p, *inst, grid)
    dense = dense_duality_oracle(ops, p, grid, *inst)
    scale = sum(abs(v) for k, v in ours.items())
    oracle_dev = max(abs(ours[k] - dense[k]) for k in ours) / scale
    y = solve_forward(ops, p, inst[0], inst[1], inst[2], grid)
    state_dev = float(np.abs(y.frames[1:] - dense["Y"]).max() / np.abs(dense["Y"]).max())
    m = {"dofs": ops.n, "max_defect": max(defects), "oracle_term_deviation": oracle_dev,
         "oracle_state_deviation": state_dev}
    checks = {"defect_le_1e-10": max(defects) <= 1e-10, "dense_oracle_agrees": max(oracle_dev, state_dev) <= 1e-10}
    return CheckResult(3, "discrete duality", all(checks.values()), m, checks, runtime_limit=30.0)


# --- 4: weight calculus -----------------------------------------------------------

@_timed
def criterion_4(seed: int = 0, samples: int = 10_000) -> CheckResult:
    p = Params()
    R = DESK_GEOMETRY.R
    rng = np.random.default_rng(seed)
    r = R * np.sqrt(rng.uniform(0, 1, samples))
    ang = rng.uniform(0, 2 * np.pi, samples)
    X = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    t = rng.uniform(1e-3, p.T - 1e-3, samples)
    wc = WeightConstants.build(p, R**2)
    eta = R**2 - np.sum(X**2, axis=1)
    th = inv_tt(t, p.T)
    phi = th * wc.spatial_phi(eta)
    xi = th * np.exp(wc.log_E(eta))
    K = math.exp(wc.log_K)
    rel_alg = float(np.max(np.abs(phi + xi - K * th) / (K * th)))
    # complex-step derivative of phi in x as the independent oracle
    hstep = 1e-30
    grad_cs = np.empty_like(X)
    for d in range(2):
        Xc = X.astype(complex)
        Xc[:, d] += 1j * hstep
        eta_c = R**2 - np.sum(Xc**2, axis=1)
        grad_cs[:, d] = np.imag(th * wc.spatial_phi(eta_c)) / hstep
    analytic = -p.lam * xi[:, None] * (-2 * X)
    gscale = np.maximum(np.linalg.norm(analytic, axis=1), 1e-300)
    nz = np.linalg.norm(X, axis=1) > 1e-8
    rel_grad = float(np.max(np.linalg.norm(grad_cs - analytic, axis=1)[nz] / gscale[nz]))
    T = p.T
    mu_jump = float(abs(mu(T / 2, T) - mu(np.nextafter(T / 2, T), T)) / (4 / T**2))
    mesh, ops, eta0, grid, wset = desk_setup(p)
    wg = weight_gradients(mesh, eta0, wset)
    loop = mesh.boundary_loop
    nu = mesh.outward_normals
    gb = wg.grad_phi[:, loop, :]
    tang = gb - np.sum(gb * nu[None], axis=2)[..., None] * nu[None]
    rel_tang = float(np.max(np.linalg.norm(tang, axis=2) / np.linalg.norm(gb, axis=2)))
    m = {"phi_xi_relation_rel": rel_alg, "grad_phi_rel": rel_grad, "mu_jump_rel": mu_jump,
         "tangential_grad_phi_rel": rel_tang}
    checks = {"relation_1e-12": rel_alg <= 1e-12, "grad_1e-12": rel_grad <= 1e-12,
              "mu_continuous": mu_jump <= 1e-14, "grad_gamma_phi_zero": rel_tang <= 1e-12}
    return CheckResult(4, "weight calculus", all(checks.values()), m, checks, runtime_limit=5.0)


# --- 5: conjugated identity --------------------------------------------------------

@_timed
def criterion_5(seed: int = 0, count: int = 20, points: int = 200, params: Params | None = None) -> CheckResult:
    p = params or Params()
    fam = TestFunctionFamily(seed, count, p.T, DESK_GEOMETRY.R, DESK_GEOMETRY.r_control)
    worst = []
    for i, v in enumerate(fam.members):
        pts = {"bulk": collocation_points(points, p.T, DESK_GEOMETRY.R, seed + 7 * i, False),
               "boundary": collocation_points(points, p.T, DESK_GEOMETRY.R, seed + 7 * i + 1, True)}
        worst.append(conjugate_identity_defect(v, p, pts, DESK_GEOMETRY.R))
    m = {"s": p.s, "lambda": p.lam, "max_defect": max(worst), "defects": worst}
    checks = {"defect_le_1e-9": max(worst) <= 1e-9}
    return CheckResult(5, "conjugated-identity audit", all(checks.values()), m, checks, runtime_limit=30.0)


# --- 6: Carleman ratio harness ------------------------------------------------------

@_timed
def criterion_6(seed: int = 0, count: int = 20, s_list=(5.0, 10.0, 20.0), rows_out: list | None = None) -> CheckResult:
    p = Params()
    mesh, ops, _, grid, _ = desk_setup(p, seed=seed)
    fam = TestFunctionFamily(seed, count, p.T, DESK_GEOMETRY.R, DESK_GEOMETRY.r_control)
    rows = carleman_ratio(fam, p, list(s_list), [LAMBDA0], mesh, grid, ops)
    if rows_out is not None:
        rows_out.extend(rows)
    names = LHS_TERMS + RHS_TERMS
    min_term = min(r["terms"][k] for r in rows for k in names)
    mx = max_ratio_by_s(rows, LAMBDA0)
    seq = [mx[s] for s in sorted(mx)]
    finite = all(math.isfinite(v) for v in seq) and len(seq) == len(s_list)
    nonincr = all(seq[i + 1] <= 1.1 * seq[i] for i in range(len(seq) - 1))
    m = {"term_count": len(names), "min_term": min_term, "max_ratio_by_s": {str(k): v for k, v in mx.items()},
         "mean_clamped_fraction": float(np.mean([r["clamped_fraction"] for r in rows])),
         "statuses": sorted({r["status"] for r in rows})}
    checks = {"terms_nonnegative": min_term >= 0, "ratios_finite": finite, "nonincreasing_10pct": nonincr}
    return CheckResult(6, "Carleman ratio harness", all(checks.values()), m, checks, runtime_limit=300.0)


# --- 7: linear null control ---------------------------------------------------------

@_timed
def criterion_7(seed: int = 0, eps_penalty: float = 1e-8, results: dict | None = None) -> CheckResult:
    p = Params()
    mesh, ops, _, grid, wset = desk_setup(p, seed=seed)
    u0 = bump(mesh.vertices)
    fi = solve_fi_variational(ops, p, wset, u0, None)
    hum = penalized_hum(ops, p, u0, None, eps_penalty, grid)
    nf, nh = control_norm(ops, fi.h), control_norm(ops, hum.h)
    off = ops.mask == 0
    leak = float(max(np.abs(fi.h.frames[:, off]).max(), np.abs(hum.h.frames[:, off]).max()))
    if results is not None:
        results.update(fi=fi, hum=hum, ops=ops)
    m = {"fi_terminal_ratio": fi.terminal_ratio, "hum_terminal_ratio": hum.terminal_ratio,
         "fi_control_norm": nf, "hum_control_norm": nh, "relative_gap": abs(nf - nh) / nh,
         "fi_cg_iters": fi.cg_iters, "fi_cg_converged": fi.cg_converged,
         "fi_cg_rel_residual": fi.cg_rel_residual, "hum_cg_iters": hum.cg_iters,
         "max_control_outside_omega": leak}
    checks = {"fi_terminal_le_1e-3": fi.terminal_ratio <= 1e-3, "hum_terminal_le_1e-3": hum.terminal_ratio <= 1e-3,
              "fi_hum_norms_within_25pct": m["relative_gap"] <= 0.25,
              "controls_vanish_outside_omega": leak <= p.weight_floor}
    return CheckResult(7, "linear null control", all(checks.values()), m, checks, runtime_limit=300.0)


# --- 8: observability constant ------------------------------------------------------

@_timed
def criterion_8(seed: int = 0, samples: int = 50) -> CheckResult:
    p = Params()
    out = {}
    for h in (DESK_H, DESK_H / 2):
        mesh, ops, _, grid, wset = desk_setup(p, h=h, seed=seed)
        out[h] = observability_constant(ops, p, wset, samples, seed, mesh)
    a, b = out[DESK_H], out[DESK_H / 2]
    change = abs(10 ** (b.log10_max_ratio - a.log10_max_ratio) - 1)
    m = {"log10_max_ratio_h": a.log10_max_ratio, "log10_max_ratio_h_over_2": b.log10_max_ratio,
         "relative_change": change, "max_ratio_h": a.max_ratio, "excluded": a.excluded}
    checks = {"finite": math.isfinite(a.log10_max_ratio) and math.isfinite(b.log10_max_ratio),
              "refinement_change_le_20pct": change <= 0.2}
    return CheckResult(8, "observability constant", all(checks.values()), m, checks, runtime_limit=300.0)


# --- 9: nonlinear local null control -------------------------------------------------

@_timed
def criterion_9(seed: int = 0, results: dict | None = None) -> CheckResult:
    p = Params()
    mesh, ops, _, grid, wset = desk_setup(p, seed=seed)
    d = bump(mesh.vertices)
    d = d / h1_norm_frames(ops, d[None])[0]
    res, nlog = nonlinear_null_control(ops, p, wset, 1e-3 * d)
    big = {"diverged": False}
    try:
        res_big, log_big = nonlinear_null_control(ops, p, wset, 1e-1 * d)
        big.update(iterations=log_big.iterations, max_factor=log_big.max_factor,
                   terminal_ratio=res_big.terminal_ratio)
    except DivergenceError as exc:
        big.update(diverged=True, report=exc.report)
    delta, diag = estimate_delta(ops, p, wset, d, [2.0**-k for k in range(13)])
    if results is not None:
        results.update(result=res, log=nlog, ops=ops)
    m = {"iterations": nlog.iterations, "max_factor": nlog.max_factor,
         "residual_rel": nlog.residual_rel, "terminal_ratio": res.terminal_ratio,
         "scaled_x100": {k: v for k, v in big.items() if k != "report"}, "delta_hat": delta,
         "delta_scan": diag}
    checks = {"converged": nlog.converged, "factor_lt_0.5": nlog.max_factor < 0.5,
              "iterations_le_10": nlog.iterations <= 10, "residual_le_1e-8": nlog.residual_rel <= 1e-8,
              "terminal_le_1e-3": res.terminal_ratio <= 1e-3, "x100_diverges": big["diverged"],
              "delta_positive": delta > 0}
    return CheckResult(9, "nonlinear local null control", all(checks.values()), m, checks, runtime_limit=900.0)


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9}
