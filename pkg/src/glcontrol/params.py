"""Scalar model and method constants."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace


class PreconditionError(ValueError):
    """Input data violates an operation's precondition."""


class DivergenceError(RuntimeError):
    """A numerical iteration failed to converge.

    ``report`` carries a JSON-serialisable description of the failure.
    """

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


@dataclass(frozen=True)
class Params:
    """Model coefficients of the cubic Ginzburg-Landau system and numerical knobs.

    ``a, b`` are bulk and surface diffusion, ``c`` the cubic strength,
    ``alpha, gamma`` the dispersion ratios. ``s, lam, m`` are the Carleman
    parameters (``lam`` stands for lambda).
    """

    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    alpha: float = 0.5
    gamma: float = 0.5
    T: float = 1.0
    s: float = 1.1
    lam: float = 1.1
    m: float = 2.0
    theta_scheme: float = 0.5
    cg_tol: float = 1e-10
    cg_maxit: int = 2000
    picard_tol: float = 1e-11
    picard_maxit: int = 30
    weight_floor: float = 1e-300
    # smallness gate for solve_cubic: ||u0||_H1 + ||f||_L2(L2) must stay below it
    cubic_gate: float = 1.0
    literal_envelope_weights: bool = False

    def __post_init__(self):
        checks = [
            (self.a > 0, "a must be positive"),
            (self.b > 0, "b must be positive"),
            (self.c > 0, "c must be positive"),
            (self.alpha != 0, "alpha must be nonzero"),
            (self.gamma != 0, "gamma must be nonzero"),
            (self.T > 0, "T must be positive"),
            (self.s > 1, "s must exceed 1"),
            (self.lam > 1, "lam must exceed 1"),
            (self.m > 1, "m must exceed 1"),
            (0.5 <= self.theta_scheme <= 1.0, "theta_scheme must lie in [1/2, 1]"),
            (0 < self.weight_floor < 1e-12, "weight_floor must lie in (0, 1e-12)"),
            (self.cg_tol > 0 and self.cg_maxit > 0, "bad CG settings"),
            (self.picard_tol > 0 and self.picard_maxit > 0, "bad Picard settings"),
        ]
        for ok, msg in checks:
            if not ok:
                raise PreconditionError(msg)

    def with_(self, **kw) -> "Params":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiskGeometry:
    """Disk of radius ``R`` with concentric control balls ``r_inner < r_control``."""

    R: float = 1.0
    r_inner: float = 0.25
    r_control: float = 0.5

    def __post_init__(self):
        if not (0 < self.r_inner < self.r_control < self.R):
            raise PreconditionError(
                "geometry needs 0 < r_inner < r_control < R, got "
                f"({self.r_inner}, {self.r_control}, {self.R})"
            )

    @property
    def area(self) -> float:
        return math.pi * self.R**2

    @property
    def perimeter(self) -> float:
        return 2 * math.pi * self.R


def field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]
