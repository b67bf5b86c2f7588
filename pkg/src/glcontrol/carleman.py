"""Audit of the Carleman machinery on analytic test functions.

Two checks live here. ``conjugate_identity_defect`` evaluates the split of the
conjugated adjoint operator acting on ``w = exp(-s phi) v`` into its two parts
plus remainder, pointwise, in the bulk and on the boundary circle.
``carleman_ratio`` integrates every weighted term of the Carleman inequality
by mesh quadrature and reports LHS/RHS.

All pointwise quantities are carried with the common factor ``exp(-s phi)``
removed (every term of the identity is linear in it), which keeps them O(1)
where the factor itself would underflow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .evolution import TimeGrid
from .geometry import Mesh
from .params import Params
from .weights import WeightConstants, dinv_tt, inv_tt

LAMBDA0 = 2.0
S0 = 5.0


@dataclass(frozen=True)
class Mode:
    """c * tau(t) * (1 + b.x) * exp(i k.x) or a Gaussian bump when ``sigma`` is set."""

    amp: complex
    k: tuple = (0.0, 0.0)
    b: tuple = (0.0, 0.0)
    omega: float = 0.0
    power: int = 3
    center: tuple = (0.0, 0.0)
    sigma: float = 0.0

    def spatial(self, X):
        X = np.asarray(X, dtype=float)
        if self.sigma > 0:
            d = X - np.asarray(self.center)
            S = np.exp(-np.sum(d**2, axis=-1) / self.sigma**2).astype(complex)
            g = -2 * d / self.sigma**2 * S[..., None]
            H = (
                4 * d[..., :, None] * d[..., None, :] / self.sigma**4
                - 2 * np.eye(2) / self.sigma**2
            ) * S[..., None, None]
            return S, g, H
        k = np.asarray(self.k)
        b = np.asarray(self.b)
        W = np.exp(1j * X @ k)
        gW = 1j * k * W[..., None]
        HW = -np.outer(k, k) * W[..., None, None]
        P = 1 + X @ b
        S = P * W
        g = b * W[..., None] + P[..., None] * gW
        H = P[..., None, None] * HW + b[:, None] * gW[..., None, :] + gW[..., :, None] * b[None, :]
        return S, g, H

    def temporal(self, t, T):
        t = np.asarray(t, dtype=float)
        q = t * (T - t)
        e = np.exp(1j * self.omega * t)
        p = self.power
        tau = q**p * e
        dtau = (p * (T - 2 * t) * q ** (p - 1) + 1j * self.omega * q**p) * e
        return tau, dtau


@dataclass(frozen=True)
class TestFunction:
    """Analytic v(x, t) with exact derivatives; v_Gamma is its trace."""

    modes: tuple
    T: float

    def eval(self, X, t):
        """Return v, dv/dt, grad v (…,2) and Hessian (…,2,2) at paired points."""
        X = np.asarray(X, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), X.shape[:-1])
        v = np.zeros(X.shape[:-1], dtype=complex)
        vt = np.zeros_like(v)
        g = np.zeros(X.shape, dtype=complex)
        H = np.zeros(X.shape + (2,), dtype=complex)
        for md in self.modes:
            S, gS, HS = md.spatial(X)
            tau, dtau = md.temporal(t, self.T)
            a = md.amp
            v += a * tau * S
            vt += a * dtau * S
            g += (a * tau)[..., None] * gS
            H += (a * tau)[..., None, None] * HS
        return v, vt, g, H

    def scaled(self, factor: complex) -> "TestFunction":
        return TestFunction(
            tuple(Mode(md.amp * factor, md.k, md.b, md.omega, md.power, md.center, md.sigma)
                  for md in self.modes),
            self.T,
        )


def boundary_derivatives(X, g, H, R):
    """Normal derivative, tangential gradient and Laplace-Beltrami on |x| = R."""
    nu = X / np.linalg.norm(X, axis=-1, keepdims=True)
    tau = np.stack([-nu[..., 1], nu[..., 0]], axis=-1)
    dn = np.sum(g * nu, axis=-1)
    grad_t = g - dn[..., None] * nu
    lap_t = np.einsum("...i,...ij,...j->...", tau, H, tau) - dn / R
    return nu, tau, dn, grad_t, lap_t


@dataclass
class TestFunctionFamily:
    seed: int
    count: int
    T: float = 1.0
    R: float = 1.0
    r_control: float = 0.5
    members: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            self.members = make_family(self.seed, self.count, self.T, self.R, self.r_control)


def make_family(seed: int, count: int, T: float, R: float, r_control: float) -> list:
    """Member 0 is a bump inside omega; the rest mix polynomial-trig modes."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        if i == 0:
            c = rng.uniform(-1, 1, 2)
            c = 0.5 * r_control * c / max(1.0, np.linalg.norm(c))
            out.append(TestFunction((Mode(1.0 + 0.5j, center=tuple(c), sigma=0.2 * r_control,
                                          omega=float(rng.uniform(-3, 3))),), T))
            continue
        modes = []
        for _ in range(int(rng.integers(1, 4))):
            amp = complex(rng.standard_normal(), rng.standard_normal())
            k = tuple(rng.uniform(-3, 3, 2) / R)
            b = tuple(rng.uniform(-1, 1, 2) / R)
            modes.append(Mode(amp, k=k, b=b, omega=float(rng.uniform(-4, 4) / T),
                              power=int(rng.integers(2, 4))))
        out.append(TestFunction(tuple(modes), T))
    return out


# --- conjugated-operator identity ------------------------------------------

def _phi_pieces(X, t, params: Params, R: float):
    """phi, xi, grad phi, Laplacian phi, Hessian phi, d_t phi at paired points."""
    wc = WeightConstants.build(params, R**2)
    lam = params.lam
    eta = R**2 - np.sum(X**2, axis=-1)
    geta = -2 * X
    E = np.exp(wc.log_E(eta))
    th = inv_tt(t, params.T)
    spatial = wc.spatial_phi(eta)
    phi = th * spatial
    xi = th * E
    gphi = -lam * xi[..., None] * geta
    lap = -(lam**2) * xi * np.sum(geta**2, axis=-1) - lam * xi * (-4.0)
    Hphi = -lam * (lam * xi[..., None, None] * geta[..., :, None] * geta[..., None, :]
                   + xi[..., None, None] * (-2.0 * np.eye(2)))
    dtphi = dinv_tt(t, params.T) * spatial
    return phi, xi, eta, geta, gphi, lap, Hphi, dtphi


def conjugate_bundle(v: TestFunction, params: Params, X, t, R: float, boundary: bool):
    """Reduced (divided by exp(-s phi)) P1 w, P2 w, R w or their boundary analogues."""
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    a, b, al, s, lam = params.a, params.b, params.alpha, params.s, params.lam
    phi, xi, eta, geta, gphi, lapphi, Hphi, dtphi = _phi_pieces(X, t, params, R)
    vv, vt, gv, Hv = v.eval(X, t)
    lapv = Hv[..., 0, 0] + Hv[..., 1, 1]
    w = vv
    gw = gv - s * gphi * vv[..., None]
    lapw = (lapv - 2 * s * np.sum(gphi * gv, axis=-1) - s * lapphi * vv
            + s**2 * np.sum(gphi**2, axis=-1) * vv)
    dtw = vt - s * dtphi * vv
    if not boundary:
        gsq = np.sum(geta**2, axis=-1)
        big = s**2 * lam**2 * gsq * xi**2 * w + lapw
        mid = 2 * s * lam * xi * np.sum(geta * gw, axis=-1) + (s * lam**2 * gsq + s * lam * (-4.0)) * xi * w
        P1 = a * big + a * al * 1j * mid + s * dtphi * w
        P2 = -a * mid - a * al * 1j * big + dtw
        Rw = vt + a * (1 - al * 1j) * lapv
        return P1, P2, Rw
    nu, tau, dnv, gtv, laptv = boundary_derivatives(X, gv, Hv, R)
    dn_eta = np.sum(geta * nu, axis=-1)
    dn_phi = np.sum(gphi * nu, axis=-1)
    gt_phi = gphi - dn_phi[..., None] * nu
    lapt_phi = np.einsum("...i,...ij,...j->...", tau, Hphi, tau) - dn_phi / R
    dnw = dnv - s * dn_phi * vv
    laptw = (laptv - 2 * s * np.sum(gt_phi * gtv, axis=-1) - s * lapt_phi * vv
             + s**2 * np.sum(gt_phi**2, axis=-1) * vv)
    fG = vt - a * (1 - al * 1j) * dnv + b * (1 - al * 1j) * laptv
    c2 = 2 * a**2 / b
    PG1 = b * laptw - c2 * al * 1j * s * lam * dn_eta * xi * w + s * dtphi * w
    PG2 = -al * b * 1j * laptw + c2 * s * lam * dn_eta * xi * w + dtw
    RG = (fG - a * (1 - al * 1j) * s * lam * dn_eta * xi * w + a * (1 - al * 1j) * dnw
          + c2 * (1 - al * 1j) * s * lam * dn_eta * xi * w)
    return PG1, PG2, RG


def collocation_points(n: int, T: float, R: float, seed: int, boundary: bool):
    """Random points in the closed disk (or on its circle) at interior times."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.02 * T, 0.98 * T, n)
    ang = rng.uniform(0, 2 * np.pi, n)
    r = R * np.ones(n) if boundary else R * np.sqrt(rng.uniform(0, 1, n))
    X = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    return X, t


def conjugate_identity_defect(v: TestFunction, params: Params, points: dict, R: float = 1.0) -> float:
    """max over bulk and boundary points of |P1 w + P2 w - R w| / max(|R w|, 1).

    ``points`` holds ``bulk`` and ``boundary`` entries, each an ``(X, t)`` pair.
    """
    worst = 0.0
    for key, on_bdry in (("bulk", False), ("boundary", True)):
        if key not in points:
            continue
        X, t = points[key]
        P1, P2, Rw = conjugate_bundle(v, params, X, t, R, on_bdry)
        d = np.abs(P1 + P2 - Rw)
        if not np.all(np.isfinite(d)) or not np.all(np.isfinite(Rw)):
            bad = int(np.argmax(~np.isfinite(d) | ~np.isfinite(Rw)))
            raise FloatingPointError(f"non-finite {key} evaluation at point {np.asarray(X)[bad]}, t={np.asarray(t)[bad]}")
        scale = max(float(np.max(np.abs(Rw), initial=0.0)), 1.0)
        worst = max(worst, float(np.max(d, initial=0.0)) / scale)
    return worst


# --- Carleman inequality harness --------------------------------------------

LHS_TERMS = ("bulk_v", "bulk_grad", "bulk_dt", "bulk_lap",
             "bdry_v", "bdry_grad", "bdry_dn", "bdry_dt", "bdry_lap")
RHS_TERMS = ("omega_v", "adj_bulk", "adj_bdry")


def carleman_terms(v: TestFunction, params: Params, mesh: Mesh, grid: TimeGrid, quad: dict):
    """Weighted integrals of every Carleman term, up to one common positive factor.

    Returns ``(terms, clamped_fraction)``. The factor exp(max(-2 s phi)) over all
    samples is divided out so nothing underflows wholesale.
    """
    s, lam, a, b, al = params.s, params.lam, params.a, params.b, params.alpha
    R = mesh.geom.R
    t = grid.interior
    dt = grid.dt
    Xb = mesh.vertices
    loop = mesh.boundary_loop
    Xs = mesh.vertices[loop]

    tt_b = np.repeat(t[:, None], len(Xb), axis=1)
    XX_b = np.broadcast_to(Xb, (len(t),) + Xb.shape)
    phi_b, xi_b, *_ = _phi_pieces(XX_b, tt_b, params, R)
    tt_s = np.repeat(t[:, None], len(Xs), axis=1)
    XX_s = np.broadcast_to(Xs, (len(t),) + Xs.shape)
    phi_s, xi_s, *_ = _phi_pieces(XX_s, tt_s, params, R)

    logw_b = -2 * s * phi_b
    logw_s = -2 * s * phi_s
    shift = max(logw_b.max(), logw_s.max())
    with np.errstate(under="ignore"):
        wb = np.exp(logw_b - shift)
        ws = np.exp(logw_s - shift)
    floor = params.weight_floor
    clamped = (np.count_nonzero(wb < floor) + np.count_nonzero(ws < floor)) / (wb.size + ws.size)

    v_b, vt_b, g_b, H_b = v.eval(XX_b, tt_b)
    lap_b = H_b[..., 0, 0] + H_b[..., 1, 1]
    v_s, vt_s, g_s, H_s = v.eval(XX_s, tt_s)
    _, _, dn_s, gt_s, lapt_s = boundary_derivatives(XX_s, g_s, H_s, R)

    qb = quad["bulk"][None, :] * dt
    qs = quad["surf"][None, :] * dt
    qw = quad["omega"][None, :] * dt

    def integ(q, w, f):
        return float(np.sum(q * w * f))

    Lv = vt_b + a * (1 - 1j * al) * lap_b
    LGv = vt_s - a * (1 - 1j * al) * dn_s + b * (1 - 1j * al) * lapt_s
    terms = {
        "bulk_v": integ(qb, wb, s**3 * lam**4 * xi_b**3 * np.abs(v_b) ** 2),
        "bulk_grad": integ(qb, wb, s * lam**2 * xi_b * np.sum(np.abs(g_b) ** 2, axis=-1)),
        "bulk_dt": integ(qb, wb, np.abs(vt_b) ** 2 / (s * xi_b)),
        "bulk_lap": integ(qb, wb, np.abs(lap_b) ** 2 / (s * xi_b)),
        "bdry_v": integ(qs, ws, s**3 * lam**3 * xi_s**3 * np.abs(v_s) ** 2),
        "bdry_grad": integ(qs, ws, s * lam * xi_s * np.sum(np.abs(gt_s) ** 2, axis=-1)),
        "bdry_dn": integ(qs, ws, s * lam * np.abs(dn_s) ** 2),
        "bdry_dt": integ(qs, ws, np.abs(vt_s) ** 2 / (s * xi_s)),
        "bdry_lap": integ(qs, ws, np.abs(lapt_s) ** 2 / (s * xi_s)),
        "omega_v": integ(qw, wb, s**3 * lam**4 * xi_b**3 * np.abs(v_b) ** 2),
        "adj_bulk": integ(qb, wb, np.abs(Lv) ** 2),
        "adj_bdry": integ(qs, ws, np.abs(LGv) ** 2),
    }
    return terms, clamped


def quadrature_weights(mesh: Mesh, ops) -> dict:
    """Vertex weights: lumped bulk mass, lumped surface mass on the loop, omega mask."""
    bulk = np.asarray(ops.M_bulk.sum(axis=1)).ravel()
    surf = np.asarray(ops.M_surf.sum(axis=1)).ravel()[mesh.boundary_loop]
    return {"bulk": bulk, "surf": surf, "omega": bulk * mesh.control_mask}


def carleman_ratio(family, params: Params, s_list, lambda_list, mesh: Mesh, grid: TimeGrid, ops) -> list:
    """One row per (member, s, lambda): lhs, rhs, ratio, clamped_fraction and the terms.

    Rows with lhs = rhs = 0 are marked ``degenerate``; rhs = 0 < lhs is marked
    ``impossible``. Both have ``ratio`` NaN.
    """
    quad = quadrature_weights(mesh, ops)
    members = family.members if hasattr(family, "members") else list(family)
    rows = []
    for lam in lambda_list:
        for s in s_list:
            p = params.with_(s=float(s), lam=float(lam))
            for i, v in enumerate(members):
                terms, clamped = carleman_terms(v, p, mesh, grid, quad)
                lhs = sum(terms[k] for k in LHS_TERMS)
                rhs = sum(terms[k] for k in RHS_TERMS)
                status = "ok"
                ratio = math.nan
                if rhs == 0 and lhs == 0:
                    status = "degenerate"
                elif rhs == 0:
                    status = "impossible"
                else:
                    ratio = lhs / rhs
                rows.append({"member_id": i, "s": float(s), "lambda": float(lam), "lhs": lhs,
                             "rhs": rhs, "ratio": ratio, "clamped_fraction": clamped,
                             "status": status, "terms": terms})
    return rows


def write_ratio_csv(rows, path) -> None:
    cols = ["member_id", "s", "lambda", "lhs", "rhs", "ratio", "clamped_fraction"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["member_id"]] + [f"{r[c]:.17g}" for c in cols[1:]])


def max_ratio_by_s(rows, lam: float) -> dict:
    out = {}
    for r in rows:
        if r["lambda"] == lam and r["status"] == "ok":
            out[r["s"]] = max(out.get(r["s"], 0.0), r["ratio"])
    return dict(sorted(out.items()))
