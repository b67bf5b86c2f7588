import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glcontrol import control as ct
from glcontrol.evolution import Trajectory, get_stepper, h1_norm_frames
from glcontrol.params import DivergenceError, Params, PreconditionError


def real_inner(x, y):
    return float(np.real(np.vdot(x, y)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cg_matches_dense_solve(seed):
    r = np.random.default_rng(seed)
    n = 30
    Q = r.standard_normal((n, n))
    A = Q @ Q.T + n * np.eye(n)
    b = r.standard_normal(n)
    d = 1 / np.diag(A)
    for pre in (None, lambda v: d * v):
        x, info = ct.conjugate_gradient(lambda v: A @ v, b, lambda u, v: float(u @ v), 1e-12, 500,
                                        precond=pre)
        assert info.converged
        assert np.allclose(x, np.linalg.solve(A, b), rtol=1e-9, atol=1e-10)


def test_cg_stall_window_flags_unconverged():
    # spectrum over 16 decades: the residual stagnates in floating point
    d = np.logspace(0, -16, 200)
    b = np.ones(200)
    hist = []
    x, info = ct.conjugate_gradient(lambda v: d * v, b, lambda u, v: float(u @ v), 1e-15, 100_000,
                                    history=hist, stall_window=50)
    assert not info.converged and info.iterations < 100_000
    assert len(hist) == info.iterations
    # the energy error still beats the initial guess
    err = x - b / d
    assert err @ (d * err) < b @ (b / d)


def test_control_weights(small_weights):
    cw = ct.ControlWeights.from_weights(small_weights)
    assert cw.rho[-1] == 0 and cw.rho_h[-1] == 0
    assert np.max(cw.rho) == pytest.approx(1.0)
    assert np.all(cw.rho[:-1] > 0) and np.all(cw.rho_h[:-1] > 0)


def test_control_norm_constant(small):
    ops, grid = small["ops"], small["grid"]
    H = np.ones((grid.N_t + 1, ops.n))
    one = np.ones(ops.n)
    assert ct.control_norm(ops, Trajectory(grid, H, "control")) == pytest.approx(
        math.sqrt(grid.T * one @ ops.M_ctrl @ one), rel=1e-12)


def dense_normal_operator(A, shape):
    """Real matrix of P -> A(P) on rows 1..N (Re/Im stacked)."""
    N1, n = shape
    m = (N1 - 1) * n
    out = np.zeros((2 * m, 2 * m))
    for j in range(2 * m):
        P = np.zeros(shape, dtype=complex)
        k = j % m
        P[1 + k // n, k % n] = 1.0 if j < m else 1j
        y = A(P)[1:].ravel()
        out[:m, j] = y.real
        out[m:, j] = y.imag
    return out


def test_fi_normal_operator_dense_oracle(small, small_weights, rng):
    p = Params()
    ops, grid = small["ops"], small["grid"]
    st_ = get_stepper(ops, p, grid)
    cw = ct.ControlWeights.from_weights(small_weights)
    A = ct.FIOperator(ops, p, st_, cw)
    shape = (grid.N_t + 1, ops.n)
    D = dense_normal_operator(A, shape)
    assert np.allclose(D, D.T, rtol=0, atol=1e-12 * np.abs(D).max())
    w = np.linalg.eigvalsh(0.5 * (D + D.T))
    assert w.min() > -1e-12 * w.max()
    # CG solution against a dense solve
    u0 = rng.standard_normal(ops.n) + 1j * rng.standard_normal(ops.n)
    res = ct.solve_fi_variational(ops, p.with_(cg_tol=1e-13), small_weights, u0)
    b = ct.fi_rhs(ops, p, st_, u0, None)[1:].ravel()
    x = np.linalg.solve(D, np.concatenate([b.real, b.imag]))
    m = len(b)
    P = np.zeros(shape, dtype=complex)
    P[1:] = (x[:m] + 1j * x[m:]).reshape(grid.N_t, ops.n)
    H_dense = A.control(P)
    assert np.allclose(res.h.frames, H_dense, rtol=1e-6, atol=1e-8 * np.abs(H_dense).max())


def test_fi_state_satisfies_dynamics(small, small_weights, rng):
    """Extracted (y, h) obey the discrete dynamics, checked with independently built dense A, B."""
    p = Params()
    ops, grid = small["ops"], small["grid"]
    u0 = rng.standard_normal(ops.n) + 1j * rng.standard_normal(ops.n)
    res = ct.solve_fi_variational(ops, p.with_(cg_tol=1e-13), small_weights, u0)
    Y, H = res.extracted_state.frames, res.h.frames
    dt, th = grid.dt, p.theta_scheme
    M = ops.M.toarray()
    KW = (p.a * ops.K_bulk + p.b * ops.K_surf).toarray() * (1 + 1j * p.alpha)
    A = M + th * dt * KW
    B = M - (1 - th) * dt * KW
    Mc = ops.M_ctrl.toarray()
    for n in range(1, grid.N_t + 1):
        r = A @ Y[n] - B @ Y[n - 1] - dt * Mc @ (th * H[n] + (1 - th) * H[n - 1])
        assert np.linalg.norm(r) <= 1e-8 * np.linalg.norm(B @ u0)
    assert not np.any(Y[-1])
    assert res.terminal_ratio < 1e-6
    assert np.allclose(res.y.frames, Y, atol=1e-7 * np.abs(u0).max())


def test_zero_datum_zero_control(small, small_weights):
    res = ct.solve_fi_variational(small["ops"], Params(), small_weights, np.zeros(small["ops"].n))
    assert not np.any(res.h.frames) and res.terminal_ratio == 0.0


def test_control_supported_in_omega(small, small_weights, rng):
    ops = small["ops"]
    u0 = rng.standard_normal(ops.n).astype(complex)
    res = ct.solve_fi_variational(ops, Params(), small_weights, u0)
    hum = ct.penalized_hum(ops, Params(), u0, None, 1e-6, small["grid"])
    off = ops.mask == 0
    assert not np.any(res.h.frames[:, off]) and not np.any(hum.h.frames[:, off])


def test_source_must_vanish_at_T(small, small_weights):
    ops, grid = small["ops"], small["grid"]
    f = Trajectory(grid, np.ones((grid.N_t + 1, ops.n)), "source")
    assert ct.weighted_source_lognorm(small_weights, ops, f) == math.inf
    with pytest.raises(PreconditionError):
        ct.solve_fi_variational(ops, Params(), small_weights, np.zeros(ops.n), f)
    F = f.frames.copy()
    F[-1] = 0
    assert math.isfinite(ct.weighted_source_lognorm(small_weights, ops, Trajectory(grid, F, "source")))


def test_hum_gramian_self_adjoint(small, rng):
    """<Lambda x, y>_M = <x, Lambda y>_M for the control-to-terminal Gramian."""
    p = Params()
    ops, grid = small["ops"], small["grid"]
    st_ = get_stepper(ops, p, grid)

    def Lam(x):
        H = ct.hum_control_from_terminal(ops, p, st_, x)
        return st_.forward(np.zeros(ops.n, dtype=complex), st_.increments((ops.M_ctrl @ H.T).T))[-1]

    x = rng.standard_normal(ops.n) + 1j * rng.standard_normal(ops.n)
    y = rng.standard_normal(ops.n) + 1j * rng.standard_normal(ops.n)
    M = ops.M
    lhs = np.vdot(y, M @ Lam(x))
    rhs = np.vdot(Lam(y), M @ x)
    assert lhs == pytest.approx(rhs, rel=1e-10)
    assert np.real(np.vdot(x, M @ Lam(x))) > 0


def test_hum_terminal_decreases_with_penalty(desk):
    ops = desk["ops"]
    X = desk["mesh"].vertices
    u0 = np.exp(-8 * np.sum((X - [0.55, 0.2]) ** 2, axis=1)).astype(complex)
    ratios = [ct.penalized_hum(ops, Params(), u0, None, e, desk["grid"]).terminal_ratio
              for e in (1e-3, 1e-5)]
    assert ratios[1] < ratios[0] < 1
    with pytest.raises(PreconditionError):
        ct.penalized_hum(ops, Params(), u0, None, 0.0, desk["grid"])


def test_observability(desk):
    est = ct.observability_constant(desk["ops"], Params(), desk["wset"], 10, 3, desk["mesh"])
    again = ct.observability_constant(desk["ops"], Params(), desk["wset"], 10, 3, desk["mesh"])
    assert est.log10_max_ratio == again.log10_max_ratio
    assert math.isfinite(est.log10_max_ratio) and len(est.ratios_log10) == 10
    assert est.log10_max_ratio == pytest.approx(max(est.ratios_log10))
    with pytest.raises(PreconditionError):
        ct.observability_constant(desk["ops"], Params(), desk["wset"], 5, 3, desk["mesh"])


def test_observability_terms_zero_adjoint(small, small_weights):
    ops, grid = small["ops"], small["grid"]
    z = Trajectory(grid, np.zeros((grid.N_t + 1, ops.n)), "adjoint")
    L, R = ct.observability_terms(ops, Params(), small_weights, z, None)
    assert L == -math.inf and R == -math.inf


def test_nonlinear_small_datum(small, small_weights):
    ops = small["ops"]
    d = np.exp(-4 * np.sum(small["mesh"].vertices ** 2, axis=1)).astype(complex)
    d /= h1_norm_frames(ops, d[None])[0]
    res, log = ct.nonlinear_null_control(ops, Params(), small_weights, 1e-3 * d)
    assert log.converged and log.iterations <= 10 and log.max_factor < 0.5
    assert log.residual_rel <= 1e-8
    assert len(log.records()) == log.iterations
    # zero datum: trivial control, no iteration
    res0, log0 = ct.nonlinear_null_control(ops, Params(), small_weights, 0 * d)
    assert log0.converged and not np.any(res0.h.frames)


def test_nonlinear_divergence_report(small, small_weights):
    ops = small["ops"]
    d = np.exp(-4 * np.sum(small["mesh"].vertices ** 2, axis=1)).astype(complex)
    d /= h1_norm_frames(ops, d[None])[0]
    with pytest.raises(DivergenceError) as exc:
        ct.nonlinear_null_control(ops, Params(c=1e4), small_weights, 0.5 * d)
    rep = exc.value.report
    assert rep["failure"] and isinstance(rep["log"], list) and rep["u0_H1"] == pytest.approx(0.5)


def test_estimate_delta(small, small_weights):
    ops = small["ops"]
    d = np.exp(-4 * np.sum(small["mesh"].vertices ** 2, axis=1)).astype(complex)
    delta, diag = ct.estimate_delta(ops, Params(c=1e3), small_weights, d, [1.0, 0.1, 0.01, 0.001])
    assert delta > 0 and diag[-1]["converged"]
    assert all(not r["converged"] for r in diag[:-1])
    with pytest.raises(PreconditionError):
        ct.estimate_delta(ops, Params(), small_weights, 0 * d, [1.0])


def test_result_json(small, small_weights, tmp_path):
    res = ct.solve_fi_variational(small["ops"], Params(), small_weights, np.ones(small["ops"].n))
    text = res.to_json(small["ops"], tmp_path / "r.json")
    assert '"method": "fi"' in text and (tmp_path / "r.json").exists()
