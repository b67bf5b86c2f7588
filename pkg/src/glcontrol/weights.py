"""Carleman weights phi, xi and the one-sided time envelopes used for observability.

With ``E(x) = exp(lam (m |eta0|_inf + eta0(x)))`` and ``K = exp(2 lam m |eta0|_inf)``:

    phi = (K - E) / (t (T - t)),        xi = E / (t (T - t)).

The envelopes replace ``1/(t(T-t))`` by ``mu(t)`` (constant ``4/T^2`` on the
first half of the horizon) and take the extremum over the closed disk.
Exponential factors are formed in log space and clamped below at the floor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .evolution import TimeGrid
from .geometry import LAPLACIAN_ETA0, Eta0Field, Mesh
from .params import Params, PreconditionError

_LOG_MAX = 700.0


def mu(t, T: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        late = 1.0 / (t * (T - t))
    return np.where(t <= T / 2, 4.0 / T**2, late)


def inv_tt(t, T: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return 1.0 / (t * (T - t))


def dinv_tt(t, T: float) -> np.ndarray:
    """d/dt of 1/(t(T-t))."""
    t = np.asarray(t, dtype=float)
    return -(T - 2 * t) / (t * (T - t)) ** 2


@dataclass(frozen=True)
class WeightConstants:
    """Space-only pieces of the weights: log K, log E(x) and their extrema."""

    lam: float
    m: float
    sup: float
    log_K: float

    @classmethod
    def build(cls, params: Params, sup: float):
        log_K = 2 * params.lam * params.m * sup
        if log_K > _LOG_MAX:
            raise PreconditionError(
                f"exp(2 lam m |eta0|) overflows (exponent {log_K:.1f}); lower lam or m"
            )
        return cls(params.lam, params.m, sup, log_K)

    def log_E(self, eta):
        return self.lam * (self.m * self.sup + np.asarray(eta))

    def spatial_phi(self, eta):
        """K - E(x), evaluated without cancellation."""
        return math.exp(self.log_K) * -np.expm1(self.log_E(eta) - self.log_K)


def _spatial_phi_literal(params: Params, sup: float, eta):
    """Literal envelope numerator exp(2 s lam m |eta0|) - E(x)."""
    log_K = 2 * params.s * params.lam * params.m * sup
    if log_K > _LOG_MAX:
        raise PreconditionError(
            f"strict envelope exponent {log_K:.1f} overflows; lower s, lam or m"
        )
    log_E = params.lam * (params.m * sup + np.asarray(eta))
    return math.exp(log_K) * -np.expm1(log_E - log_K)


@dataclass
class WeightSet:
    grid: TimeGrid
    s: float
    lam: float
    m: float
    phi: np.ndarray  # (N_t - 1, n) at interior nodes
    xi: np.ndarray
    mu: np.ndarray  # (N_t - 1,)
    phi_check: np.ndarray
    phi_hat: np.ndarray
    xi_check: np.ndarray
    xi_hat: np.ndarray
    # spatial extrema of the envelope numerators, used for endpoint limits
    env: dict
    floor: float
    floor_applied: dict = field(default_factory=dict)

    @property
    def t(self) -> np.ndarray:
        return self.grid.interior

    def exp_factor(self, name: str, log_values: np.ndarray) -> np.ndarray:
        """exp(log_values) clamped below at the floor; flags recorded under ``name``."""
        with np.errstate(under="ignore", over="ignore"):
            vals = np.exp(log_values)
        clamped = vals < self.floor
        self.floor_applied[name] = clamped
        return np.where(clamped, self.floor, vals)

    def e_m2sphi(self) -> np.ndarray:
        return self.exp_factor("e_m2sphi", -2 * self.s * self.phi)

    # node-extended envelopes -------------------------------------------------
    def node_mu(self) -> np.ndarray:
        """mu at all nodes: the right limit 4/T^2 at t = 0 and +inf at t = T."""
        out = np.empty(self.grid.N_t + 1)
        out[0] = 4.0 / self.grid.T**2
        out[1:-1] = self.mu
        out[-1] = np.inf
        return out

    def node_envelope(self, name: str) -> np.ndarray:
        """phi_check, phi_hat, xi_check or xi_hat at every node (inf at t = T)."""
        return self.node_mu() * self.env[name]

    def node_log_weight(self, power: float, phi_name: str, xi_name: str | None = None,
                        xi_power: float = 0.0) -> np.ndarray:
        """log of exp(power * s * phi_env) * xi_env**xi_power at every node.

        At t = T the analytic limit is used: -inf whenever the exponential decays
        (power < 0), which dominates any power of xi.
        """
        mu_n = self.node_mu()
        out = np.empty_like(mu_n)
        inner = slice(0, -1)
        out[inner] = power * self.s * mu_n[inner] * self.env[phi_name]
        if xi_name is not None and xi_power:
            out[inner] += xi_power * np.log(mu_n[inner] * self.env[xi_name])
        out[-1] = -np.inf if power < 0 else np.inf
        return out

    def to_csv(self, mesh_path, time_path) -> None:
        t = self.t
        with open(mesh_path, "w", newline="") as fh:
            fh.write("t,vertex,phi,xi\n")
            for k in range(len(t)):
                fh.write(
                    "".join(
                        f"{t[k]:.17g},{j},{p:.17g},{x:.17g}\n"
                        for j, (p, x) in enumerate(zip(self.phi[k], self.xi[k]))
                    )
                )
        with open(time_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mu", "phi_check", "phi_hat", "xi_check", "xi_hat"])
            for row in zip(t, self.mu, self.phi_check, self.phi_hat, self.xi_check, self.xi_hat):
                w.writerow([f"{v:.17g}" for v in row])


def eval_weights(mesh: Mesh, eta: Eta0Field, params: Params, grid: TimeGrid) -> WeightSet:
    if grid.T != params.T:
        raise PreconditionError("grid horizon differs from params.T")
    wc = WeightConstants.build(params, eta.sup_norm)
    T = grid.T
    t = grid.interior
    theta = inv_tt(t, T)[:, None]
    spatial = wc.spatial_phi(eta.values)
    E = np.exp(wc.log_E(eta.values))
    phi = theta * spatial[None, :]
    xi = theta * E[None, :]
    if params.literal_envelope_weights:
        env_phi = _spatial_phi_literal(params, eta.sup_norm, eta.values)
    else:
        env_phi = spatial
    env = {
        "phi_check": float(env_phi.min()),
        "phi_hat": float(env_phi.max()),
        "xi_check": float(E.min()),
        "xi_hat": float(E.max()),
    }
    mu_t = mu(t, T)
    return WeightSet(
        grid=grid,
        s=params.s,
        lam=params.lam,
        m=params.m,
        phi=phi,
        xi=xi,
        mu=mu_t,
        phi_check=mu_t * env["phi_check"],
        phi_hat=mu_t * env["phi_hat"],
        xi_check=mu_t * env["xi_check"],
        xi_hat=mu_t * env["xi_hat"],
        env=env,
        floor=params.weight_floor,
    )


@dataclass
class WeightGradients:
    grad_phi: np.ndarray  # (N_t - 1, n, 2)
    grad_xi: np.ndarray
    lap_phi: np.ndarray  # (N_t - 1, n)


def weight_gradients(mesh: Mesh, eta: Eta0Field, wset: WeightSet) -> WeightGradients:
    lam = wset.lam
    g = eta.grad[None, :, :]
    xi = wset.xi[:, :, None]
    grad_xi = lam * xi * g
    grad_phi = -grad_xi
    gsq = np.sum(eta.grad**2, axis=1)[None, :]
    lap_phi = -(lam**2) * wset.xi * gsq - lam * wset.xi * LAPLACIAN_ETA0
    return WeightGradients(grad_phi, grad_xi, lap_phi)


def xi_pointwise(x, t, params: Params, R: float) -> np.ndarray:
    """xi at arbitrary points, used by finite-difference checks."""
    wc = WeightConstants.build(params, R**2)
    eta_v = R**2 - np.sum(np.asarray(x) ** 2, axis=-1)
    return inv_tt(t, params.T) * np.exp(wc.log_E(eta_v))
