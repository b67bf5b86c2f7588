"""Null-control synthesis for the linear and cubic systems.

The weighted variational problem is posed on the discrete space-time adjoint
multipliers P = (p^1..p^N). With the forward space-time operator E, the
control operator D and time-only weights rho = exp(-2 s phi_check),

    (E W_y^{-1} E^H + D W_h^{-1} D^H) P = b,
    W_y^{-1} = rho / dt * M^{-1},     W_h^{-1} = rho * xi_hat^3 / dt on supp(mask),

which is the optimality system of minimising
``sum rho^-1 |y|^2 + (rho xi_hat^3)^-1 |h|^2`` subject to the discrete dynamics.
State and control are read off as ``y = W_y^{-1} E^H P`` and
``h = -W_h^{-1} D^H P``. Since rho vanishes at t = T, y(T) = 0 exactly.

rho is normalised by its maximum before solving; the state and control are
invariant under a constant rescaling of both weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .assembly import OperatorSet, indicator_mass
from .geometry import Mesh
from .evolution import (
    Stepper,
    TimeGrid,
    Trajectory,
    cubic_source,
    discrete_laplacian,
    get_stepper,
    h1_norm_frames,
    l2_norm_frames,
    solve_adjoint,
    solve_cubic,
    solve_forward,
)
from .params import DivergenceError, Params, PreconditionError
from .weights import WeightSet

log = __import__("logging").getLogger(__name__)


# --- conjugate gradients ------------------------------------------------------

@dataclass
class CGInfo:
    iterations: int
    rel_residual: float
    converged: bool


def conjugate_gradient(apply, b, inner, tol, maxit, x0=None, precond=None, history=None,
                       stall_window: int | None = None):
    """Preconditioned CG for an operator self-adjoint and positive w.r.t. the real ``inner``.

    ``precond`` (optional) must be self-adjoint and positive in the same inner product.
    Convergence is measured in the preconditioner norm sqrt(<r, Q r>) relative to b.
    With ``stall_window`` set, iteration stops (unconverged) once the best residual
    has not halved within that many iterations. The A-norm error still decreases
    monotonically, so the last iterate is the best available one.
    """
    if precond is None:
        precond = lambda r: r
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply(x) if x0 is not None else b.copy()
    bnorm = math.sqrt(max(inner(b, precond(b)), 0.0))
    if bnorm == 0:
        return np.zeros_like(b), CGInfo(0, 0.0, True)
    zr = precond(r)
    rz = inner(r, zr)
    rn = math.sqrt(max(rz, 0.0))
    if rn <= tol * bnorm:
        return x, CGInfo(0, rn / bnorm, True)
    p = zr.copy()
    best, best_it = rn, 0
    it = 0
    for it in range(1, maxit + 1):
        Ap = apply(p)
        pAp = inner(p, Ap)
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        zr = precond(r)
        rz_new = inner(r, zr)
        rn = math.sqrt(max(rz_new, 0.0))
        if history is not None:
            history.append(rn / bnorm)
        if rn <= tol * bnorm:
            return x, CGInfo(it, rn / bnorm, True)
        if rn < 0.5 * best:
            best, best_it = rn, it
        elif stall_window is not None and it - best_it >= stall_window:
            break
        p = zr + (rz_new / rz) * p
        rz = rz_new
    return x, CGInfo(it, rn / bnorm, False)


# The weighted normal operator is numerically near-singular at realistic (s, lam):
# rho spans hundreds of decades after T/2. CG stops once it stagnates.
FI_STALL_WINDOW = 300


# --- weights on the time nodes -------------------------------------------------

@dataclass
class ControlWeights:
    """Node-wise (N_t + 1) control weights in log space and as clamped factors."""

    log_rho: np.ndarray  # -2 s phi_check, normalised by its max; -inf at t = T
    log_rho_shift: float  # the removed maximum
    log_xi_hat: np.ndarray
    rho: np.ndarray
    rho_h: np.ndarray  # rho * xi_hat^3
    clamped: np.ndarray

    @classmethod
    def from_weights(cls, wset: WeightSet) -> "ControlWeights":
        raw = wset.node_log_weight(-2.0, "phi_check")
        shift = float(np.max(raw[np.isfinite(raw)]))
        log_rho = raw - shift
        log_xi_hat = np.log(wset.node_envelope("xi_hat"))
        floor = wset.floor
        with np.errstate(under="ignore", over="ignore", invalid="ignore"):
            rho = np.exp(log_rho)
            lrh = log_rho + 3 * log_xi_hat
            lrh[-1] = -np.inf
            rho_h = np.exp(lrh)
        clamped = (rho < floor) & np.isfinite(log_rho)
        rho = np.where(clamped, floor, rho)
        rho_h = np.where((rho_h < floor) & np.isfinite(lrh), floor, rho_h)
        return cls(log_rho, shift, log_xi_hat, rho, rho_h, clamped)


def _log_norm_series(log_factor, frames_norm_sq, dt):
    """log of sqrt(sum_n dt * exp(2 log_factor_n) * norm_sq_n), ignoring zero terms."""
    with np.errstate(divide="ignore"):
        terms = 2 * np.asarray(log_factor) + np.log(np.maximum(frames_norm_sq, 0.0)) + math.log(dt)
    terms = terms[np.isfinite(terms) | (terms > 0)]
    if terms.size == 0:
        return -math.inf
    return 0.5 * float(logsumexp(terms))


def _log_to_value(lv: float) -> float:
    if lv == -math.inf:
        return 0.0
    return math.exp(lv) if lv < 709 else math.inf


@dataclass
class ControlResult:
    h: Trajectory
    y: Trajectory
    z_star: np.ndarray | None
    terminal_ratio: float
    weighted_norms: dict
    cg_iters: int
    cg_converged: bool
    cg_rel_residual: float
    obs_constant_estimate: float = math.nan
    extracted_state: Trajectory | None = None
    method: str = "fi"

    def summary(self, ops: OperatorSet) -> dict:
        return {
            "method": self.method,
            "terminal_ratio": self.terminal_ratio,
            "control_norm": control_norm(ops, self.h),
            "cg_iters": self.cg_iters,
            "cg_converged": self.cg_converged,
            "cg_rel_residual": self.cg_rel_residual,
            "obs_constant_estimate": self.obs_constant_estimate,
            "weighted_norms": self.weighted_norms,
        }

    def to_json(self, ops, path=None) -> str:
        text = json.dumps(_jsonable(self.summary(ops)), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


def control_norm(ops: OperatorSet, h: Trajectory) -> float:
    """||1_omega h||_{L^2(omega x (0,T))} with the trapezoid rule in time."""
    H = h.frames
    e = np.real(np.sum(np.conj(H) * (ops.M_ctrl @ H.T).T, axis=1))
    w = np.full(len(H), h.grid.dt)
    w[[0, -1]] *= 0.5
    return float(np.sqrt(max(np.sum(w * e), 0.0)))


def _terminal_ratio(ops, y: Trajectory, u0) -> float:
    n0 = l2_norm_frames(ops, np.asarray(u0, dtype=complex)[None])[0]
    if n0 == 0:
        return 0.0
    return float(l2_norm_frames(ops, y.frames[-1:])[0] / n0)


def _support(ops: OperatorSet) -> np.ndarray:
    return (ops.mask > 0).astype(float)


def _combine_J(P: np.ndarray, theta: float) -> np.ndarray:
    """(J P)^j = theta p^j + (1 - theta) p^{j+1}, j = 0..N (p^0 = p^{N+1} = 0)."""
    out = theta * P
    out[:-1] += (1 - theta) * P[1:]
    return out


def _combine_JH(H: np.ndarray, theta: float) -> np.ndarray:
    """Rows n = 1..N: theta h^n + (1 - theta) h^{n-1}; row 0 zero."""
    out = np.zeros_like(H)
    out[1:] = theta * H[1:] + (1 - theta) * H[:-1]
    return out


class FIOperator:
    """Matrix-free normal operator of the weighted variational problem."""

    def __init__(self, ops: OperatorSet, params: Params, st: Stepper, cw: ControlWeights):
        self.ops = ops
        self.st = st
        self.cw = cw
        self.theta = params.theta_scheme
        self.dt = st.grid.dt
        self.supp = _support(ops)

    def state(self, P):
        """W_y^{-1} E^H P: the extracted state at nodes 1..N (row 0 zero)."""
        EHP = self.st.apply_EH(P)
        Y = np.zeros_like(P)
        Y[1:] = self.st.solve_M(EHP[1:].T).T
        Y *= (self.cw.rho / self.dt)[:, None]
        Y[0] = 0
        return Y

    def control(self, P):
        """-W_h^{-1} D^H P, i.e. the control h at every node, zero off supp(mask)."""
        JP = _combine_J(P, self.theta)
        return -(self.cw.rho_h[:, None]) * JP * self.supp[None, :]

    def apply_D(self, H):
        return self.dt * (self.ops.M_ctrl @ _combine_JH(H, self.theta).T).T

    def __call__(self, P):
        Y = self.state(P)
        return self.st.apply_E(Y) - self.apply_D(self.control(P))

    def block_preconditioner(self):
        """Block-Jacobi (in time) preconditioner for the normal operator.

        Block n is ``rho_n/dt A M_L^{-1} A^H + rho_{n-1}/dt B M_L^{-1} B^H + c_n M_ctrl``
        with the lumped mass M_L, normalised by its total scalar weight before
        factorisation so that the floored tail does not upset pivoting.
        """
        from scipy.sparse import diags
        from scipy.sparse.linalg import splu

        st, cw, dt, th = self.st, self.cw, self.dt, self.theta
        N = st.grid.N_t
        ML = np.asarray(self.ops.M.sum(axis=1)).ravel()
        Mi = diags(1.0 / ML)
        GA = (st.A @ Mi @ st.AH).tocsc()
        GB = (st.B @ Mi @ st.BH).tocsc()
        Mc = self.ops.M_ctrl.tocsc()
        lus = [None]
        scale = np.zeros(N + 1)
        for n in range(1, N + 1):
            a = cw.rho[n] / dt
            b = cw.rho[n - 1] / dt if n >= 2 else 0.0
            c = dt * (th**2 * cw.rho_h[n] + (1 - th) ** 2 * cw.rho_h[n - 1])
            d = a + b + c
            lus.append(splu(((a / d) * GA + (b / d) * GB + (c / d) * Mc).tocsc()))
            scale[n] = 1.0 / d

        def apply(R):
            out = np.zeros_like(R)
            for n in range(1, N + 1):
                out[n] = lus[n].solve(R[n]) * scale[n]
            return out

        return apply

    def a_form(self, P, Q) -> float:
        """Real pairing <A P, Q>, the discrete bilinear form."""
        return float(np.real(np.vdot(Q, self(P))))


def fi_rhs(ops, params, st: Stepper, u0, f: Trajectory | None) -> np.ndarray:
    G = st.load(f, None)
    b = st.increments(G)
    b[1] += st.B @ np.asarray(u0, dtype=complex)
    b[0] = 0
    return b


def weighted_source_lognorm(wset: WeightSet, ops: OperatorSet, f: Trajectory | None) -> float:
    """log ||exp(s phi_hat) xi_check^{-3/2} (f, f_Gamma)||_{L^2(0,T; L^2)}.

    +inf when the source does not vanish at t = T (the weight is infinite there).
    """
    if f is None:
        return -math.inf
    fs = f.frames if f.surface is None else f.surface
    e = np.real(np.sum(np.conj(f.frames) * (ops.M_bulk @ f.frames.T).T, axis=1))
    e += np.real(np.sum(np.conj(fs) * (ops.M_surf @ fs.T).T, axis=1))
    if e[-1] > 0:
        return math.inf
    lw = wset.node_log_weight(1.0, "phi_hat", "xi_check", -1.5)
    return _log_norm_series(lw[:-1], e[:-1], f.grid.dt)


def solve_fi_variational(
    ops: OperatorSet,
    params: Params,
    wset: WeightSet,
    u0,
    f: Trajectory | None = None,
    x0: np.ndarray | None = None,
) -> ControlResult:
    """Null control of the linear system from the weighted variational problem."""
    grid = wset.grid
    u0 = np.asarray(u0, dtype=complex)
    if u0.shape != (ops.n,):
        raise PreconditionError("u0 has the wrong length")
    lsrc = weighted_source_lognorm(wset, ops, f)
    if not (lsrc < math.inf):
        raise PreconditionError("source is not finite in the weighted norm (must vanish at t=T)")
    st = get_stepper(ops, params, grid)
    cw = ControlWeights.from_weights(wset)
    A = FIOperator(ops, params, st, cw)
    b = fi_rhs(ops, params, st, u0, f)
    inner = lambda x, y: float(np.real(np.vdot(x, y)))
    P, info = conjugate_gradient(A, b, inner, params.cg_tol, params.cg_maxit, x0,
                                 precond=A.block_preconditioner(), stall_window=FI_STALL_WINDOW)
    if not info.converged:
        log.warning("FI CG stopped after %d iterations, rel. residual %.2e", info.iterations, info.rel_residual)
    Y = A.state(P)
    Y[0] = u0
    H = A.control(P)
    h = Trajectory(grid, H, "control")
    y_ex = Trajectory(grid, Y, "forward")
    y = solve_forward(ops, params, u0, f, h)
    norms = fi_weighted_norms(ops, wset, cw, A, P, f, lsrc)
    return ControlResult(
        h=h,
        y=y,
        z_star=P,
        terminal_ratio=_terminal_ratio(ops, y, u0),
        weighted_norms=norms,
        cg_iters=info.iterations,
        cg_converged=info.converged,
        cg_rel_residual=info.rel_residual,
        extracted_state=y_ex,
        method="fi",
    )


def fi_weighted_norms(ops, wset: WeightSet, cw: ControlWeights, A: FIOperator, P, f, lsrc) -> dict:
    """Components of the weighted solution-space norm, evaluated in log space.

    The state is ``exp(log_rho) * Ytil`` and the control ``exp(log_rho) xi_hat^3 * Htil``
    with O(1) factors ``Ytil, Htil``, so weights are combined exponent-first.
    """
    dt = wset.grid.dt
    EHP = A.st.apply_EH(P)
    Ytil = np.zeros_like(P)
    Ytil[1:] = A.st.solve_M(EHP[1:].T).T / dt
    Htil = _combine_J(P, A.theta) * A.supp[None, :]
    lphi_check = wset.node_log_weight(1.0, "phi_check")  # s * phi_check
    lphi_hat3 = wset.node_log_weight(1.0 / 3.0, "phi_hat")
    base = cw.log_rho + cw.log_rho_shift  # true log exp(-2 s phi_check)
    ny = l2_norm_frames(ops, Ytil) ** 2
    nh = np.real(np.sum(np.conj(Htil) * (ops.M_ctrl @ Htil.T).T, axis=1))
    h1y = h1_norm_frames(ops, Ytil) ** 2
    lap = discrete_laplacian(ops, Ytil)
    h2y = h1y + l2_norm_frames(ops, lap) ** 2
    inner_nodes = slice(1, -1)
    with np.errstate(invalid="ignore"):
        ly = base + lphi_check
        lh_set = base + lphi_check + 1.5 * cw.log_xi_hat
        lh_lit = base + lphi_check + 6.0 * cw.log_xi_hat
        l3 = base + lphi_hat3
    out_log = {
        "y_L2": _log_norm_series(ly[inner_nodes], ny[inner_nodes], dt),
        "h_L2_set_weight": _log_norm_series(lh_set[:-1], nh[:-1], dt),
        "h_L2_literal_weight": _log_norm_series(lh_lit[:-1], nh[:-1], dt),
        "source_weighted": lsrc,
        "y_L2H2_third": _log_norm_series(l3[inner_nodes], h2y[inner_nodes], dt),
    }
    with np.errstate(divide="ignore", invalid="ignore"):
        linf = l3[inner_nodes] + 0.5 * np.log(h1y[inner_nodes])
    linf = linf[np.isfinite(linf)]
    out_log["y_LinfH1_third"] = float(linf.max()) if linf.size else -math.inf
    out = {f"log10_{k}": (v / math.log(10) if math.isfinite(v) else v) for k, v in out_log.items()}
    out.update({k: _log_to_value(v) for k, v in out_log.items()})
    out["clamped_nodes"] = int(np.count_nonzero(cw.clamped))
    return out


# --- penalised HUM oracle --------------------------------------------------------

def hum_control_from_terminal(ops, params, st: Stepper, zT) -> np.ndarray:
    """Control h = (adjoint of the control-to-terminal-state map) applied to zT."""
    Z, P = st.adjoint(zT, None)
    return _combine_J(P, params.theta_scheme) * _support(ops)[None, :]


def penalized_hum(
    ops: OperatorSet,
    params: Params,
    u0,
    f: Trajectory | None,
    eps_penalty: float,
    grid: TimeGrid,
) -> ControlResult:
    """Minimise 1/2 ||B* z||^2 + eps/2 |zT|^2 + <y_free(T), zT> over terminal data zT."""
    if not eps_penalty > 0:
        raise PreconditionError("eps_penalty must be positive")
    u0 = np.asarray(u0, dtype=complex)
    st = get_stepper(ops, params, grid)
    M = ops.M
    y_free = solve_forward(ops, params, u0, f, None, grid)

    def Lam(x):
        H = hum_control_from_terminal(ops, params, st, x)
        Phi = st.increments((ops.M_ctrl @ H.T).T)
        YT = st.forward(np.zeros(ops.n, dtype=complex), Phi)[-1]
        return YT + eps_penalty * x

    inner = lambda x, y: float(np.real(np.vdot(x, M @ y)))
    zT, info = conjugate_gradient(Lam, -y_free.frames[-1], inner, params.cg_tol, params.cg_maxit)
    if not info.converged:
        log.warning("HUM CG stopped after %d iterations, rel. residual %.2e", info.iterations, info.rel_residual)
    H = hum_control_from_terminal(ops, params, st, zT)
    h = Trajectory(grid, H, "control")
    y = solve_forward(ops, params, u0, f, h)
    return ControlResult(
        h=h,
        y=y,
        z_star=zT,
        terminal_ratio=_terminal_ratio(ops, y, u0),
        weighted_norms={"terminal_adjoint_norm": float(math.sqrt(max(inner(zT, zT), 0.0)))},
        cg_iters=info.iterations,
        cg_converged=info.converged,
        cg_rel_residual=info.rel_residual,
        method="hum",
    )


# --- observability constant ----------------------------------------------------

def smooth_random_field(rng, X, n_modes: int = 6, scale: float = 3.0) -> np.ndarray:
    """Random complex combination of smooth plane waves times affine factors."""
    out = np.zeros(len(X), dtype=complex)
    for _ in range(n_modes):
        k = rng.uniform(-scale, scale, 2)
        bvec = rng.uniform(-1, 1, 2)
        c = complex(rng.standard_normal(), rng.standard_normal())
        out += c * (1 + X @ bvec) * np.exp(1j * X @ k)
    return out / math.sqrt(n_modes)


def observability_terms(ops, params, wset: WeightSet, z: Trajectory, g: Trajectory | None,
                        M_omega=None) -> tuple:
    """(log LHS, log RHS) of the weighted observability inequality (C = 1).

    ``M_omega`` is the mass matrix of the observation region; defaults to M_ctrl.
    """
    M_omega = ops.M_ctrl if M_omega is None else M_omega
    dt = wset.grid.dt
    Z = z.frames
    w = np.full(len(Z), dt)
    w[[0, -1]] *= 0.5
    lw = np.log(w)
    l2 = l2_norm_frames(ops, Z) ** 2
    kz = np.real(np.sum(np.conj(Z) * (ops.K @ Z.T).T, axis=1))
    om = np.real(np.sum(np.conj(Z) * (M_omega @ Z.T).T, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        lhat = wset.node_log_weight(-2.0, "phi_hat")
        lchk = wset.node_log_weight(-2.0, "phi_check")
        lxc = np.log(wset.node_envelope("xi_check"))
        lxh = np.log(wset.node_envelope("xi_hat"))
        lhs_terms = [math.log(l2[0]) if l2[0] > 0 else -math.inf]
        lhs_terms += list(lw + lhat + 3 * lxc + np.log(np.maximum(l2, 0)))
        lhs_terms += list(lw + lhat + lxc + np.log(np.maximum(kz, 0)))
        rhs_terms = list(lw + lchk + 3 * lxh + np.log(np.maximum(om, 0)))
        if g is not None:
            gs = g.frames if g.surface is None else g.surface
            eg = np.real(np.sum(np.conj(g.frames) * (ops.M_bulk @ g.frames.T).T, axis=1))
            eg += np.real(np.sum(np.conj(gs) * (ops.M_surf @ gs.T).T, axis=1))
            rhs_terms += list(lw + lchk + np.log(np.maximum(eg, 0)))
    lhs = np.array(lhs_terms)
    rhs = np.array(rhs_terms)
    lhs = lhs[np.isfinite(lhs)]
    rhs = rhs[np.isfinite(rhs)]
    L = float(logsumexp(lhs)) if lhs.size else -math.inf
    Rr = float(logsumexp(rhs)) if rhs.size else -math.inf
    return L, Rr


@dataclass
class ObservabilityEstimate:
    max_ratio: float
    log10_max_ratio: float
    ratios_log10: list
    excluded: int


def observability_constant(
    ops: OperatorSet,
    params: Params,
    wset: WeightSet,
    sample_count: int,
    seed: int,
    mesh: Mesh,
) -> ObservabilityEstimate:
    """Max LHS/RHS of the observability inequality over random smooth adjoint data.

    Samples are smooth functions of the physical coordinates, so the same
    continuous data are drawn on every mesh. Every other sample has g = 0.
    The omega integral uses the exact indicator of ball(0, r_control).
    The ratio itself overflows double precision for larger s; compare
    ``log10_max_ratio`` in that case.
    """
    vertices = mesh.vertices
    M_omega = indicator_mass(mesh, mesh.geom.r_control)
    if sample_count < 10:
        raise PreconditionError("sample_count must be at least 10")
    rng = np.random.default_rng(seed)
    grid = wset.grid
    t = grid.nodes
    logs = []
    excluded = 0
    for k in range(sample_count):
        zT = smooth_random_field(rng, vertices)
        g = None
        if k % 2 == 1:
            G = np.zeros((grid.N_t + 1, len(vertices)), dtype=complex)
            Gs = np.zeros_like(G)
            for j in range(3):
                G += np.outer(np.cos(j * np.pi * t / grid.T), smooth_random_field(rng, vertices))
                Gs += np.outer(np.sin((j + 1) * np.pi * t / grid.T), smooth_random_field(rng, vertices))
            g = Trajectory(grid, G, "source", surface=Gs)
        if not np.any(zT) and (g is None or not np.any(g.frames)):
            excluded += 1
            continue
        z = solve_adjoint(ops, params, zT, g, grid)
        L, Rr = observability_terms(ops, params, wset, z, g, M_omega)
        if L == -math.inf and Rr == -math.inf:
            excluded += 1
            continue
        logs.append(L - Rr)
    lmax = max(logs) if logs else -math.inf
    return ObservabilityEstimate(
        max_ratio=_log_to_value(lmax),
        log10_max_ratio=lmax / math.log(10),
        ratios_log10=[v / math.log(10) for v in logs],
        excluded=excluded,
    )


# --- nonlinear loop --------------------------------------------------------------

@dataclass
class NonlinearControlLog:
    source_log10_norm: list = field(default_factory=list)
    control_increment: list = field(default_factory=list)
    contraction_factor: list = field(default_factory=list)
    cg_iters: list = field(default_factory=list)
    converged: bool = False
    monotone: bool = True
    delta_estimate: float = math.nan
    residual: float = math.nan
    residual_rel: float = math.nan
    failure: str = ""

    @property
    def iterations(self) -> int:
        return len(self.control_increment)

    @property
    def max_factor(self) -> float:
        finite = [q for q in self.contraction_factor if math.isfinite(q)]
        return max(finite) if finite else 0.0

    def records(self) -> list:
        out = []
        for k, inc in enumerate(self.control_increment):
            out.append({
                "iteration": k + 1,
                "control_increment": inc,
                "contraction_factor": self.contraction_factor[k] if k < len(self.contraction_factor) else None,
                "source_log10_weighted_norm": self.source_log10_norm[k] if k < len(self.source_log10_norm) else None,
                "cg_iters": self.cg_iters[k] if k < len(self.cg_iters) else None,
            })
        return out

    def to_jsonl(self, path=None) -> str:
        lines = [json.dumps(_jsonable(r), sort_keys=True) for r in self.records()]
        summary = {k: v for k, v in asdict(self).items()
                   if k not in ("source_log10_norm", "control_increment", "contraction_factor", "cg_iters")}
        lines.append(json.dumps(_jsonable({"summary": summary}), sort_keys=True))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def cubic_residual(ops, params, st: Stepper, Y: np.ndarray, H: np.ndarray) -> float:
    """||M^{-1} r^n / dt||_{L^2(0,T; L^2)} for the discrete cubic dynamics residual."""
    G = (ops.M @ cubic_source(params, Y).T).T + (ops.M_ctrl @ H.T).T
    Phi = st.increments(G)
    R = st.apply_E(np.vstack([np.zeros((1, Y.shape[1])), Y[1:]]))
    R[1] -= st.B @ Y[0]
    R -= Phi
    R[0] = 0
    r = st.solve_M(R[1:].T).T / st.grid.dt
    return float(np.sqrt(st.grid.dt * np.sum(l2_norm_frames(ops, r) ** 2)))


def _fi_solve_P(ops, params, wset, u0, f, x0=None):
    """Multipliers and CG info for the weighted problem with data (u0, f)."""
    grid = wset.grid
    st = get_stepper(ops, params, grid)
    cw = ControlWeights.from_weights(wset)
    A = FIOperator(ops, params, st, cw)
    b = fi_rhs(ops, params, st, u0, f)
    inner = lambda x, y: float(np.real(np.vdot(x, y)))
    P, info = conjugate_gradient(A, b, inner, params.cg_tol, params.cg_maxit, x0,
                                 precond=A.block_preconditioner(), stall_window=FI_STALL_WINDOW)
    return A, P, info


def nonlinear_null_control(
    ops: OperatorSet,
    params: Params,
    wset: WeightSet,
    u0,
) -> tuple[ControlResult, NonlinearControlLog]:
    """Source iteration on the control map for the cubic system.

    The control map is linear in (u0, f), so each step solves the weighted
    problem for the source increment f^k - f^{k-1} only and accumulates; the
    inexactness of every linear solve is then relative to the increment.

    The returned ``y`` is the closed-loop cubic trajectory under the converged
    control; ``log.residual`` is its discrete cubic-dynamics residual.

    Raises ``DivergenceError`` (with ``report`` holding the log) when the weighted
    source check fails or the contraction factor stays >= 1 for three iterations.
    """
    grid = wset.grid
    u0 = np.asarray(u0, dtype=complex)
    st = get_stepper(ops, params, grid)
    nlog = NonlinearControlLog()

    def fail(msg):
        nlog.failure = msg
        raise DivergenceError(msg, {"log": nlog.records(), "failure": msg,
                                    "u0_H1": float(h1_norm_frames(ops, u0[None])[0])})

    res = solve_fi_variational(ops, params, wset, u0, None)
    nlog.cg_iters.append(res.cg_iters)
    if not np.any(u0):
        nlog.control_increment.append(0.0)
        nlog.source_log10_norm.append(-math.inf)
        nlog.converged = True
        nlog.residual = nlog.residual_rel = 0.0
        return res, nlog
    A = FIOperator(ops, params, st, ControlWeights.from_weights(wset))
    P = res.z_star
    Y = res.extracted_state.frames.copy()
    H = res.h.frames.copy()
    f_prev = np.zeros_like(Y)
    bad = 0
    zero = np.zeros(ops.n, dtype=complex)
    for k in range(params.picard_maxit):
        fk = cubic_source(params, Y)
        fk[-1] = 0.0  # y(T) = 0 exactly; drop round-off in the node value
        lsrc = weighted_source_lognorm(wset, ops, Trajectory(grid, fk, "source"))
        nlog.source_log10_norm.append(lsrc / math.log(10) if math.isfinite(lsrc) else lsrc)
        if lsrc == math.inf or math.isnan(lsrc):
            fail("weighted source check failed: cubic term not in the weighted space")
        if not np.all(np.isfinite(fk)):
            fail("cubic source is not finite")
        df = Trajectory(grid, fk - f_prev, "source")
        _, dP, info = _fi_solve_P(ops, params, wset, zero, df)
        nlog.cg_iters.append(info.iterations)
        dY = A.state(dP)
        dH = A.control(dP)
        P = P + dP
        Y = Y + dY
        H = H + dH
        f_prev = fk
        hn = control_norm(ops, Trajectory(grid, H, "control"))
        inc = control_norm(ops, Trajectory(grid, dH, "control")) / max(hn, 1e-300)
        if not (math.isfinite(hn) and math.isfinite(inc)):
            fail("control blew up")
        if nlog.control_increment and nlog.control_increment[-1] > 0:
            q = inc / nlog.control_increment[-1]
            nlog.contraction_factor.append(q)
            bad = bad + 1 if q >= 1 else 0
            if q >= 1:
                nlog.monotone = False
        nlog.control_increment.append(inc)
        if inc <= params.picard_tol:
            nlog.converged = True
            break
        if bad >= 3:
            fail("source iteration is not contracting (initial datum outside the local regime)")
    if not nlog.converged:
        fail("source iteration hit picard_maxit")

    h = Trajectory(grid, H, "control")
    try:
        traj = solve_cubic(ops, params, u0, None, grid, h=h)
    except (DivergenceError, PreconditionError) as exc:
        fail(f"closed-loop cubic re-simulation failed: {exc}")
    nlog.residual = cubic_residual(ops, params, st, traj.frames, H)
    nlog.residual_rel = nlog.residual / l2_norm_frames(ops, u0[None])[0]
    final_src = Trajectory(grid, f_prev, "source")
    norms = fi_weighted_norms(ops, wset, A.cw, A, P, final_src,
                              weighted_source_lognorm(wset, ops, final_src))
    out = ControlResult(
        h=h,
        y=traj,
        z_star=P,
        terminal_ratio=_terminal_ratio(ops, traj, u0),
        weighted_norms=norms,
        cg_iters=int(sum(nlog.cg_iters)),
        cg_converged=res.cg_converged,
        cg_rel_residual=res.cg_rel_residual,
        extracted_state=Trajectory(grid, Y, "forward"),
        method="fi-nonlinear",
    )
    return out, nlog


def estimate_delta(
    ops: OperatorSet,
    params: Params,
    wset: WeightSet,
    u0_direction,
    scales,
) -> tuple[float, list]:
    """Largest scale (of the H1-normalised direction) for which the loop converges.

    ``scales`` is scanned in decreasing order; returns ``(delta, diagnostics)``.
    """
    d = np.asarray(u0_direction, dtype=complex)
    nrm = h1_norm_frames(ops, d[None])[0]
    if nrm == 0:
        raise PreconditionError("u0_direction must be nonzero")
    d = d / nrm
    diag = []
    for sc in sorted(scales, reverse=True):
        try:
            res, nlog = nonlinear_null_control(ops, params, wset, sc * d)
        except DivergenceError as exc:
            diag.append({"scale": sc, "converged": False, "reason": str(exc)})
            continue
        diag.append({"scale": sc, "converged": True, "iterations": nlog.iterations,
                     "max_factor": nlog.max_factor, "terminal_ratio": res.terminal_ratio})
        return float(sc), diag
    return 0.0, diag
