"""Desk-scale null-control laboratory for the cubic complex Ginzburg-Landau
equation with dynamic (Wentzell-type) boundary conditions on a disk."""

from .params import DiskGeometry, DivergenceError, Params, PreconditionError

__version__ = "0.1.0"

__all__ = ["DiskGeometry", "DivergenceError", "Params", "PreconditionError", "__version__"]
