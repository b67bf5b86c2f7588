import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from glcontrol.acceptance import (
    dense_duality_oracle,
    manufactured_error,
    manufactured_solution,
    random_small_instance,
)
from glcontrol.evolution import (
    TimeGrid,
    Trajectory,
    cubic_source,
    duality_check,
    duality_terms,
    energy_report,
    get_stepper,
    h1_norm_frames,
    l2_norm_frames,
    solve_adjoint,
    solve_cubic,
    solve_forward,
)
from glcontrol.params import DivergenceError, Params, PreconditionError


def test_time_grid():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25 and g.nodes[-1] == 2.0 and len(g.interior) == 7
    with pytest.raises(PreconditionError):
        TimeGrid(1.0, 0)


def test_trajectory_csv_roundtrip(small, tmp_path, rng):
    g, n = small["grid"], small["ops"].n
    tr = Trajectory(g, rng.standard_normal((g.N_t + 1, n)) + 1j * rng.standard_normal((g.N_t + 1, n)))
    tr.to_csv(tmp_path / "t.csv")
    back = Trajectory.from_csv(tmp_path / "t.csv", g, n, "forward")
    assert np.array_equal(back.frames, tr.frames)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 0.75, 1.0]))
def test_duality_random(small, seed, theta):
    p = Params(theta_scheme=theta)
    inst = random_small_instance(np.random.default_rng(seed), small["ops"], small["grid"])
    assert duality_check(small["ops"], p, *inst, small["grid"]) <= 1e-12


def test_duality_matches_dense_spacetime_oracle(small, rng):
    p = Params(alpha=-0.3)
    ops, grid = small["ops"], small["grid"]
    inst = random_small_instance(rng, ops, grid)
    ours = duality_terms(ops, p, *inst, grid)
    dense = dense_duality_oracle(ops, p, grid, *inst)
    for k in ours:
        assert ours[k] == pytest.approx(dense[k], rel=1e-11, abs=1e-11)
    z = solve_adjoint(ops, p, inst[3], inst[4], grid)
    assert np.allclose(z.frames[0], dense["z0"], rtol=1e-11, atol=1e-11)


def test_manufactured_sources_symbolic():
    """Bulk and surface sources against sympy, with Laplace-Beltrami = u_thth / R^2."""
    p = Params(a=0.7, b=1.3, alpha=0.4)
    x, y, t, th = sp.symbols("x y t theta", real=True)
    k1, k2, om = sp.Rational(13, 10), sp.Rational(7, 10), 2
    u = sp.exp((sp.I * om - sp.Rational(1, 2)) * t) * (sp.cos(k1 * x) * sp.cos(k2 * y) + sp.I * x * y**2)
    za = p.a * (1 + sp.I * p.alpha)
    zb = p.b * (1 + sp.I * p.alpha)
    f = sp.diff(u, t) - za * (sp.diff(u, x, 2) + sp.diff(u, y, 2))
    R = 1
    polar = {x: R * sp.cos(th), y: R * sp.sin(th)}
    dn = (sp.diff(u, x) * x + sp.diff(u, y) * y) / R
    ub = u.subs(polar)
    fg = (sp.diff(u, t) + za * dn).subs(polar) - zb * sp.diff(ub, th, 2) / R**2
    fl = sp.lambdify((x, y, t), f, "numpy")
    fgl = sp.lambdify((th, t), fg, "numpy")
    uu, ff, ffg = manufactured_solution(p, R)
    r = np.random.default_rng(0)
    X = r.uniform(-0.7, 0.7, (20, 2))
    T = r.uniform(0, 1, 20)
    assert np.allclose(ff(X, T), fl(X[:, 0], X[:, 1], T), rtol=1e-12, atol=1e-12)
    ang = r.uniform(0, 2 * np.pi, 20)
    Xb = np.column_stack([np.cos(ang), np.sin(ang)])
    assert np.allclose(ffg(Xb, T), fgl(ang, T), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_spatial_convergence(theta):
    p = Params(theta_scheme=theta)
    e = [manufactured_error(p, h, T=0.25) for h in (0.2, 0.1)]
    order = math.log2(e[0] / e[1])
    # Crank-Nicolson with dt = h/2 is second order; backward Euler drops to one
    assert order > (1.8 if theta == 0.5 else 0.8)


def test_zero_data_zero_solution(small):
    ops, grid = small["ops"], small["grid"]
    y = solve_forward(ops, Params(), np.zeros(ops.n), None, None, grid)
    assert not np.any(y.frames)


def test_dissipativity(desk, rng):
    ops = desk["ops"]
    u0 = rng.standard_normal(ops.n) + 1j * rng.standard_normal(ops.n)
    for theta in (0.5, 1.0):
        y = solve_forward(ops, Params(theta_scheme=theta), u0, None, None, desk["grid"])
        assert np.all(np.diff(l2_norm_frames(ops, y.frames)) <= 1e-13)


def test_energy_report_backward_euler_bound(desk):
    """Backward Euler: sum_n dt |grad y^n|^2 <= |u0|^2 / (2 min(a, b)), so the
    energy constant is bounded by 1 + sqrt(T + 1/2 + dt/2 |u0|_H1^2 / |u0|^2)."""
    ops, grid = desk["ops"], desk["grid"]
    X = desk["mesh"].vertices
    u0 = np.exp(-4 * np.sum(X**2, axis=1)).astype(complex)
    y = solve_forward(ops, Params(theta_scheme=1.0), u0, None, None, grid)
    rep = energy_report(y, ops)
    q = h1_norm_frames(ops, u0[None])[0] / l2_norm_frames(ops, u0[None])[0]
    assert 1.0 <= rep.C1_ratio <= 1 + math.sqrt(grid.T + 0.5 + grid.dt / 2 * q**2)
    assert len(rep.L2) == grid.N_t + 1 and rep.sqrt_t_laplacian > 0


def test_conjugation_symmetry(small, rng):
    ops, grid = small["ops"], small["grid"]
    u0, f, h, _, _ = random_small_instance(rng, ops, grid)
    ya = solve_forward(ops, Params(alpha=0.8), u0, f, h)
    yb = solve_forward(ops, Params(alpha=-0.8), np.conj(u0), f.conj(), h.conj())
    assert np.allclose(ya.frames, np.conj(yb.frames), rtol=0, atol=1e-13 * np.abs(ya.frames).max())


def test_wrong_sizes_rejected(small):
    ops = small["ops"]
    with pytest.raises(PreconditionError):
        solve_forward(ops, Params(), np.zeros(ops.n + 1), None, None, small["grid"])
    with pytest.raises(PreconditionError):
        solve_forward(ops, Params(), np.zeros(ops.n), None, None)


def test_cubic_source():
    p = Params(c=2.0, gamma=0.5)
    U = np.array([1 + 1j, 0.5])
    assert np.allclose(cubic_source(p, U), -2 * (1 + 0.5j) * np.abs(U) ** 2 * U)


def test_cubic_small_data_close_to_linear(desk):
    ops, grid = desk["ops"], desk["grid"]
    X = desk["mesh"].vertices
    d = np.exp(-8 * np.sum((X - 0.2) ** 2, axis=1)).astype(complex)
    d /= h1_norm_frames(ops, d[None])[0]
    p = Params()
    for amp in (1e-2, 2e-2):
        u = solve_cubic(ops, p, amp * d, None, grid)
        lin = solve_forward(ops, p, amp * d, None, None, grid)
        dev = np.abs(u.frames - lin.frames).max() / np.abs(lin.frames).max()
        # the cubic correction is O(amp^2)
        assert dev < 0.05 * amp**2 / 1e-4 * 1e-3 + 1e-10
        assert u.meta["log"].converged and u.meta["log"].contraction < 0.5


def test_cubic_gate(desk):
    ops = desk["ops"]
    with pytest.raises(PreconditionError):
        solve_cubic(ops, Params(), 10 * np.ones(ops.n), None, desk["grid"])


def test_cubic_divergence_is_structured(desk):
    ops = desk["ops"]
    p = Params(c=5e4, cubic_gate=1e9)
    with pytest.raises(DivergenceError) as exc, np.errstate(over="ignore", invalid="ignore"):
        solve_cubic(ops, p, np.ones(ops.n, dtype=complex), None, desk["grid"])
    assert "factors" in exc.value.report or "step" in exc.value.report


def test_stepper_cache(small):
    p = Params()
    assert get_stepper(small["ops"], p, small["grid"]) is get_stepper(small["ops"], p, small["grid"])
