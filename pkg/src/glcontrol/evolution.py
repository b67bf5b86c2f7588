"""Theta-scheme time integration of the linear, adjoint and cubic systems.

Forward step (``A y^n = B y^{n-1} + dt*(theta G^n + (1-theta) G^{n-1})``) with

    A = M + theta dt (1 + i alpha) K_W,   B = M - (1 - theta) dt (1 + i alpha) K_W,

where ``M = M_bulk + M_surf`` and ``K_W = a K_bulk + b K_surf``. The adjoint
stepper is the algebraic M-adjoint of the forward step map,

    z^{n-1} = M^{-1} B^H A^{-H} (M z^n - dt Gamma^n),

so the discrete duality identity holds to rounding for any data.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import splu

from .assembly import OperatorSet
from .params import DivergenceError, Params, PreconditionError


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N_t: int

    def __post_init__(self):
        if self.N_t < 1 or not self.T > 0:
            raise PreconditionError("TimeGrid needs N_t >= 1 and T > 0")

    @property
    def dt(self) -> float:
        return self.T / self.N_t

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N_t + 1)

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]

    @property
    def midpoints(self) -> np.ndarray:
        n = self.nodes
        return 0.5 * (n[1:] + n[:-1])


KINDS = ("forward", "adjoint", "control", "source")


@dataclass
class Trajectory:
    """Complex nodal fields at every time node, shape ``(N_t + 1, n)``.

    Source trajectories may carry a separate boundary field ``surface``
    (values at boundary vertices are used, the rest ignored); when absent the
    boundary source equals the bulk field's trace.
    """

    grid: TimeGrid
    frames: np.ndarray
    kind: str = "forward"
    surface: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=complex)
        if self.frames.ndim != 2 or self.frames.shape[0] != self.grid.N_t + 1:
            raise ValueError(
                f"trajectory needs {self.grid.N_t + 1} frames, got shape {self.frames.shape}"
            )
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.surface is not None:
            self.surface = np.asarray(self.surface, dtype=complex)
            if self.surface.shape != self.frames.shape:
                raise ValueError("surface field must match frames")

    @classmethod
    def zeros(cls, grid: TimeGrid, n: int, kind: str) -> "Trajectory":
        return cls(grid, np.zeros((grid.N_t + 1, n), dtype=complex), kind)

    @property
    def n(self) -> int:
        return self.frames.shape[1]

    def conj(self) -> "Trajectory":
        surf = None if self.surface is None else np.conj(self.surface)
        return Trajectory(self.grid, np.conj(self.frames), self.kind, surf)

    def to_csv(self, path) -> None:
        """Columns node_index, t, vertex_index, re, im with %.17g numerics."""
        t = self.grid.nodes
        with open(path, "w", newline="") as fh:
            fh.write("node_index,t,vertex_index,re,im\n")
            for k, frame in enumerate(self.frames):
                tk = f"{t[k]:.17g}"
                fh.write(
                    "".join(
                        f"{k},{tk},{j},{z.real:.17g},{z.imag:.17g}\n" for j, z in enumerate(frame)
                    )
                )

    @classmethod
    def from_csv(cls, path, grid: TimeGrid, n: int, kind: str) -> "Trajectory":
        frames = np.zeros((grid.N_t + 1, n), dtype=complex)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                frames[int(row["node_index"]), int(row["vertex_index"])] = complex(
                    float(row["re"]), float(row["im"])
                )
        return cls(grid, frames, kind)


class Stepper:
    """Factorised theta-scheme step operators for one (ops, params, dt)."""

    def __init__(self, ops: OperatorSet, params: Params, grid: TimeGrid):
        self.ops = ops
        self.params = params
        self.grid = grid
        th = params.theta_scheme
        dt = grid.dt
        KW = (params.a * ops.K_bulk + params.b * ops.K_surf) * (1 + 1j * params.alpha)
        M = ops.M
        self.M = M
        self.A = (M + th * dt * KW).tocsc()
        self.B = (M - (1 - th) * dt * KW).tocsr()
        self.BH = self.B.conj().T.tocsr()
        self._A_lu = splu(self.A)
        self._M_lu = splu(M.tocsc().astype(complex))

    def solve_A(self, rhs):
        return self._A_lu.solve(np.asarray(rhs, dtype=complex))

    def solve_AH(self, rhs):
        return self._A_lu.solve(np.asarray(rhs, dtype=complex), trans="H")

    def solve_M(self, rhs):
        return self._M_lu.solve(np.asarray(rhs, dtype=complex))

    def load(self, f: Trajectory | None, h: Trajectory | None) -> np.ndarray:
        """Nodal load vectors G^n = M_bulk f + M_surf f_Gamma + M_ctrl h."""
        ops = self.ops
        G = np.zeros((self.grid.N_t + 1, ops.n), dtype=complex)
        if f is not None:
            G += (ops.M_bulk @ f.frames.T).T
            fs = f.frames if f.surface is None else f.surface
            G += (ops.M_surf @ fs.T).T
        if h is not None:
            G += (ops.M_ctrl @ h.frames.T).T
        return G

    def increments(self, G: np.ndarray) -> np.ndarray:
        """Phi^n = dt (theta G^n + (1-theta) G^{n-1}) for n = 1..N (row 0 unused, zero)."""
        th = self.params.theta_scheme
        Phi = np.zeros_like(G)
        Phi[1:] = self.grid.dt * (th * G[1:] + (1 - th) * G[:-1])
        return Phi

    def forward(self, u0: np.ndarray, Phi: np.ndarray) -> np.ndarray:
        N = self.grid.N_t
        Y = np.empty((N + 1, self.ops.n), dtype=complex)
        Y[0] = u0
        for n in range(1, N + 1):
            Y[n] = self.solve_A(self.B @ Y[n - 1] + Phi[n])
            if not np.all(np.isfinite(Y[n])):
                raise DivergenceError(f"non-finite state at step {n}", {"step": n})
        return Y

    def adjoint(self, zT: np.ndarray, Gam: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        """Backward sweep; returns node values Z and the multipliers P.

        ``P[n] = A^{-H}(M Z[n] - dt Gam[n])`` for n = 1..N (row 0 zero); these
        are the quantities paired with forward increments in the duality.
        """
        N = self.grid.N_t
        dt = self.grid.dt
        Z = np.empty((N + 1, self.ops.n), dtype=complex)
        P = np.zeros((N + 1, self.ops.n), dtype=complex)
        Z[N] = zT
        for n in range(N, 0, -1):
            rhs = self.M @ Z[n]
            if Gam is not None:
                rhs = rhs - dt * Gam[n]
            P[n] = self.solve_AH(rhs)
            Z[n - 1] = self.solve_M(self.BH @ P[n])
            if not np.all(np.isfinite(Z[n - 1])):
                raise DivergenceError(f"non-finite adjoint at step {n - 1}", {"step": n - 1})
        return Z, P

    # space-time operators used by the control solvers -----------------------
    def apply_EH(self, P: np.ndarray) -> np.ndarray:
        """Conjugate transpose of the space-time forward operator.

        (E Y)^n = A y^n - B y^{n-1} on unknowns y^1..y^N; returns
        (E^H P)^n = A^H p^n - B^H p^{n+1} (p^{N+1} = 0), row 0 zero.
        """
        out = np.zeros_like(P)
        AH = self.AH
        out[1:] = (AH @ P[1:].T).T
        out[1:-1] -= (self.BH @ P[2:].T).T
        return out

    def apply_E(self, Y: np.ndarray) -> np.ndarray:
        out = np.zeros_like(Y)
        out[1:] = (self.A @ Y[1:].T).T
        out[2:] -= (self.B @ Y[1:-1].T).T
        return out

    def solve_E(self, R: np.ndarray) -> np.ndarray:
        """Solve E Y = R (zero initial state); row 0 of the result is zero."""
        Y = np.zeros_like(R)
        for n in range(1, self.grid.N_t + 1):
            Y[n] = self.solve_A(R[n] + (self.B @ Y[n - 1] if n > 1 else 0))
        return Y

    def solve_EH(self, R: np.ndarray) -> np.ndarray:
        P = np.zeros_like(R)
        N = self.grid.N_t
        for n in range(N, 0, -1):
            P[n] = self.solve_AH(R[n] + (self.BH @ P[n + 1] if n < N else 0))
        return P

    @cached_property
    def AH(self):
        return self.A.conj().T.tocsr()


_STEPPERS: dict = {}


def get_stepper(ops: OperatorSet, params: Params, grid: TimeGrid) -> Stepper:
    """Cached stepper keyed on object identity of ops and the relevant params."""
    key = (id(ops), params.a, params.b, params.alpha, params.theta_scheme, grid.T, grid.N_t)
    st = _STEPPERS.get(key)
    if st is None or st.ops is not ops:
        if len(_STEPPERS) > 32:
            _STEPPERS.clear()
        st = Stepper(ops, params, grid)
        _STEPPERS[key] = st
    return st


def _check_sizes(ops, grid, *trajs):
    for tr in trajs:
        if tr is None:
            continue
        if tr.grid != grid:
            raise PreconditionError("trajectory grid mismatch")
        if tr.n != ops.n:
            raise PreconditionError(f"trajectory has {tr.n} DOFs, operators have {ops.n}")


def solve_forward(
    ops: OperatorSet,
    params: Params,
    u0: np.ndarray,
    f: Trajectory | None,
    h: Trajectory | None,
    grid: TimeGrid | None = None,
) -> Trajectory:
    """Integrate L y = f + 1_omega h, L_Gamma y = f_Gamma from y(0) = u0."""
    grid = grid or (f.grid if f is not None else h.grid if h is not None else None)
    if grid is None:
        raise PreconditionError("a time grid is required when f and h are both absent")
    _check_sizes(ops, grid, f, h)
    u0 = np.asarray(u0, dtype=complex)
    if u0.shape != (ops.n,):
        raise PreconditionError("u0 has the wrong length")
    st = get_stepper(ops, params, grid)
    Phi = st.increments(st.load(f, h))
    return Trajectory(grid, st.forward(u0, Phi), "forward")


def solve_adjoint(
    ops: OperatorSet,
    params: Params,
    zT: np.ndarray,
    g: Trajectory | None,
    grid: TimeGrid | None = None,
) -> Trajectory:
    """Integrate L* z = g backward from z(T) = zT with the exact discrete adjoint."""
    grid = grid or (g.grid if g is not None else None)
    if grid is None:
        raise PreconditionError("a time grid is required when g is absent")
    _check_sizes(ops, grid, g)
    st = get_stepper(ops, params, grid)
    Gam = st.load(g, None) if g is not None else None
    Z, P = st.adjoint(np.asarray(zT, dtype=complex), Gam)
    return Trajectory(grid, Z, "adjoint", meta={"multipliers": P})


def duality_terms(ops, params, u0, f, h, zT, g, grid=None) -> dict:
    """All terms of the discrete duality identity

    <y(T), zT> - <u0, z(0)> = sum_n <A^{-1} Phi^n, z^n - dt M^{-1} Gam^n>_M
                              + dt sum_n <y^n, M^{-1} Gam^n>_M,

    with real parts taken (the L^2 x L^2(Gamma) scalar product).
    """
    y = solve_forward(ops, params, u0, f, h, grid)
    grid = y.grid
    z = solve_adjoint(ops, params, zT, g, grid)
    st = get_stepper(ops, params, grid)
    Phi = st.increments(st.load(f, h))
    P = z.meta["multipliers"]
    Gam = st.load(g, None) if g is not None else np.zeros_like(Phi)
    M = ops.M
    terminal = np.real(y.frames[-1] @ (M @ np.conj(zT)))
    initial = np.real(np.asarray(u0) @ (M @ np.conj(z.frames[0])))
    source = np.real(np.sum(Phi[1:] * np.conj(P[1:])))
    observ = grid.dt * np.real(np.sum(y.frames[1:] * np.conj(Gam[1:])))
    return {"terminal": terminal, "initial": initial, "source": source, "observation": observ}


def duality_check(ops, params, u0, f, h, zT, g, grid=None) -> float:
    """Relative defect of the discrete duality identity (0 for all-zero data)."""
    t = duality_terms(ops, params, u0, f, h, zT, g, grid)
    defect = abs(t["terminal"] - t["initial"] - t["source"] - t["observation"])
    scale = sum(abs(v) for v in t.values())
    return 0.0 if scale == 0 else defect / scale


def cubic_source(params: Params, U: np.ndarray) -> np.ndarray:
    """Nodal -c(1 + i gamma)|u|^2 u (bulk and boundary share the nodal rule)."""
    return -params.c * (1 + 1j * params.gamma) * np.abs(U) ** 2 * U


def h1_norm_frames(ops: OperatorSet, U: np.ndarray) -> np.ndarray:
    MU = (ops.M @ U.T).T
    KU = (ops.K @ U.T).T
    return np.sqrt(np.maximum(np.real(np.sum(np.conj(U) * (MU + KU), axis=1)), 0.0))


def l2_norm_frames(ops: OperatorSet, U: np.ndarray) -> np.ndarray:
    MU = (ops.M @ U.T).T
    return np.sqrt(np.maximum(np.real(np.sum(np.conj(U) * MU, axis=1)), 0.0))


def source_l2l2(ops: OperatorSet, f: Trajectory | None) -> float:
    """||(f, f_Gamma)||_{L^2(0,T; L^2 x L^2(Gamma))} by the trapezoid rule."""
    if f is None:
        return 0.0
    fs = f.frames if f.surface is None else f.surface
    bulk = np.real(np.sum(np.conj(f.frames) * (ops.M_bulk @ f.frames.T).T, axis=1))
    surf = np.real(np.sum(np.conj(fs) * (ops.M_surf @ fs.T).T, axis=1))
    w = np.full(f.grid.N_t + 1, f.grid.dt)
    w[[0, -1]] *= 0.5
    return float(np.sqrt(max(np.sum(w * (bulk + surf)), 0.0)))


@dataclass
class PicardLog:
    diffs: list = field(default_factory=list)
    factors: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.diffs)

    @property
    def contraction(self) -> float:
        finite = [q for q in self.factors if math.isfinite(q)]
        return max(finite) if finite else 0.0


def solve_cubic(
    ops: OperatorSet,
    params: Params,
    u0: np.ndarray,
    f: Trajectory | None,
    grid: TimeGrid | None = None,
    h: Trajectory | None = None,
) -> Trajectory:
    """Picard iteration for Lu + c(1+i gamma)|u|^2 u = f (+ 1_omega h).

    Raises ``PreconditionError`` above the smallness gate and ``DivergenceError``
    when the empirical contraction factor stays >= 1 for three iterations.
    The returned trajectory's ``meta['log']`` is a :class:`PicardLog`.
    """
    grid = grid or (f.grid if f is not None else h.grid)
    u0 = np.asarray(u0, dtype=complex)
    size = h1_norm_frames(ops, u0[None])[0] + source_l2l2(ops, f)
    if size > params.cubic_gate:
        raise PreconditionError(
            f"data size {size:.3e} exceeds the smallness gate {params.cubic_gate:.3e}"
        )
    st = get_stepper(ops, params, grid)
    base = st.load(f, h)
    log = PicardLog()
    U = st.forward(u0, st.increments(base))
    bad = 0
    for _ in range(params.picard_maxit):
        G = base + (ops.M @ cubic_source(params, U).T).T
        U_new = st.forward(u0, st.increments(G))
        diff = float(np.max(h1_norm_frames(ops, U_new - U)))
        if log.diffs:
            prev = log.diffs[-1]
            q = diff / prev if prev > 0 else 0.0
            log.factors.append(q)
            bad = bad + 1 if q >= 1 else 0
        log.diffs.append(diff)
        U = U_new
        if not math.isfinite(diff):
            raise DivergenceError(
                "Picard iterate is not finite", {"diffs": log.diffs, "factors": log.factors}
            )
        if diff <= params.picard_tol * max(1.0, float(np.max(h1_norm_frames(ops, U)))) or diff == 0:
            log.converged = True
            break
        if bad >= 3:
            raise DivergenceError(
                "Picard iteration for the cubic system is not contracting",
                {"diffs": log.diffs, "factors": log.factors},
            )
    if not log.converged:
        raise DivergenceError(
            "Picard iteration hit picard_maxit", {"diffs": log.diffs, "factors": log.factors}
        )
    return Trajectory(grid, U, "forward", meta={"log": log})


@dataclass
class EnergyReport:
    t: list
    L2: list
    H1: list
    dissipation_bulk: list  # int_Omega |grad u|^2 per node
    dissipation_surf: list  # int_Gamma |grad_Gamma u|^2 per node
    C1_ratio: float  # LHS/RHS of the L^2 energy estimate
    sqrt_t_laplacian: float  # ||sqrt(t) Delta_h u||_{L^2(L^2)}

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def discrete_laplacian(ops: OperatorSet, U: np.ndarray, lu=None) -> np.ndarray:
    """Surrogate Wentzell Laplacian M^{-1} K u, frame-wise."""
    lu = lu or splu(ops.M.tocsc())
    KU = (ops.K @ U.T)
    return (lu.solve(np.real(KU)) + 1j * lu.solve(np.imag(KU))).T


def energy_report(traj: Trajectory, ops: OperatorSet, f: Trajectory | None = None) -> EnergyReport:
    U = traj.frames
    dt = traj.grid.dt
    l2 = l2_norm_frames(ops, U)
    h1 = h1_norm_frames(ops, U)
    db = np.real(np.sum(np.conj(U) * (ops.K_bulk @ U.T).T, axis=1))
    ds = np.real(np.sum(np.conj(U) * (ops.K_surf @ U.T).T, axis=1))
    w = np.full(len(U), dt)
    w[[0, -1]] *= 0.5
    lhs = float(np.max(l2) + np.sqrt(np.sum(w * h1**2)))
    rhs = source_l2l2(ops, f) + float(l2[0])
    c1 = 0.0 if lhs == 0 else (lhs / rhs if rhs > 0 else math.inf)
    lap = discrete_laplacian(ops, U)
    lapn = l2_norm_frames(ops, lap)
    t = traj.grid.nodes
    sq = float(np.sqrt(np.sum(w * t * lapn**2)))
    return EnergyReport(
        t=t.tolist(),
        L2=l2.tolist(),
        H1=h1.tolist(),
        dissipation_bulk=np.maximum(db, 0).tolist(),
        dissipation_surf=np.maximum(ds, 0).tolist(),
        C1_ratio=c1,
        sqrt_t_laplacian=sq,
    )
