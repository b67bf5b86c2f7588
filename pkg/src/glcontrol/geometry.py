"""Disk mesh, control-region masks and the Carleman generating function eta0."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from .params import DiskGeometry, PreconditionError


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (n, 2)
    triangles: np.ndarray  # (nt, 3), counter-clockwise
    boundary_loop: np.ndarray  # ordered boundary vertex indices (closed cycle)
    boundary_arclengths: np.ndarray  # length of edge loop[k] -> loop[k+1]
    outward_normals: np.ndarray  # (nb, 2), aligned with boundary_loop
    control_mask: np.ndarray  # (n,) in [0, 1]
    h_max: float
    geom: DiskGeometry

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def radii(self) -> np.ndarray:
        return np.hypot(self.vertices[:, 0], self.vertices[:, 1])

    @property
    def boundary_edges(self) -> np.ndarray:
        loop = self.boundary_loop
        return np.column_stack([loop, np.roll(loop, -1)])

    def is_boundary(self) -> np.ndarray:
        flags = np.zeros(self.n_vertices, dtype=bool)
        flags[self.boundary_loop] = True
        return flags


def _edge_lengths(vertices, triangles):
    p = vertices[triangles]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    return np.linalg.norm(e, axis=2)


def control_mask(radii: np.ndarray, r_control: float, h_max: float) -> np.ndarray:
    """Vertex-wise smoothed indicator of ball(0, r_control), ramped over one layer."""
    return np.clip((r_control - radii) / h_max, 0.0, 1.0)


def build_mesh(geom: DiskGeometry, h_target: float, seed: int = 0) -> Mesh:
    """Triangulate the disk with concentric rings of roughly ``h_target`` spacing.

    Each ring gets a seeded random angular offset, so the result is deterministic
    in ``(geom, h_target, seed)``. The outer ring is placed exactly on the circle.
    """
    if not h_target > 0:
        raise PreconditionError("h_target must be positive")
    if not h_target < geom.r_inner / 2:
        raise PreconditionError(
            f"h_target={h_target} too large for r_inner={geom.r_inner} (need < r_inner/2)"
        )
    rng = np.random.default_rng(seed)
    R = geom.R
    n_rings = max(2, math.ceil(R / h_target))
    pts = [np.zeros((1, 2))]
    for k in range(1, n_rings + 1):
        r = R * k / n_rings
        n_k = max(6, round(2 * math.pi * r / h_target))
        offset = rng.uniform(0, 2 * math.pi / n_k) if k < n_rings else 0.0
        ang = offset + 2 * math.pi * np.arange(n_k) / n_k
        pts.append(r * np.column_stack([np.cos(ang), np.sin(ang)]))
    vertices = np.vstack(pts)
    n_b = len(pts[-1])
    boundary_loop = np.arange(len(vertices) - n_b, len(vertices))
    # radial projection: exact |x| = R on the boundary ring
    vb = vertices[boundary_loop]
    vertices[boundary_loop] = R * vb / np.linalg.norm(vb, axis=1, keepdims=True)

    triangles = Delaunay(vertices).simplices.astype(np.int64)
    triangles = _orient_ccw(vertices, triangles)
    areas = _signed_areas(vertices, triangles)
    triangles = triangles[areas > 1e-14]

    theta = np.arctan2(vertices[boundary_loop, 1], vertices[boundary_loop, 0])
    dtheta = np.mod(np.roll(theta, -1) - theta, 2 * math.pi)
    arclengths = R * dtheta
    normals = vertices[boundary_loop] / R
    h_max = float(_edge_lengths(vertices, triangles).max())
    mask = control_mask(np.hypot(*vertices.T), geom.r_control, h_max)
    mesh = Mesh(vertices, triangles, boundary_loop, arclengths, normals, mask, h_max, geom)
    check_mesh(mesh)
    return mesh


def _signed_areas(vertices, triangles):
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _orient_ccw(vertices, triangles):
    tri = triangles.copy()
    neg = _signed_areas(vertices, tri) < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]
    return tri


def check_mesh(mesh: Mesh) -> None:
    """Raise ``ValueError`` if a Mesh invariant is violated."""
    loop = mesh.boundary_loop
    if len(np.unique(loop)) != len(loop) or len(loop) < 3:
        raise ValueError("boundary loop is not a simple cycle")
    # every boundary edge of the triangulation lies in exactly one triangle
    tri = mesh.triangles
    edges = np.sort(np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    topo_boundary = {tuple(e) for e in uniq[counts == 1]}
    loop_edges = {tuple(sorted(e)) for e in mesh.boundary_edges.tolist()}
    if topo_boundary != loop_edges:
        raise ValueError("boundary loop does not match the triangulation boundary")
    if np.any(counts > 2):
        raise ValueError("non-manifold edge")
    if np.any(_signed_areas(mesh.vertices, tri) <= 1e-14):
        raise ValueError("degenerate triangle")


def save_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh format.

    Header ``vertices N triangles M boundary K`` followed by N coordinate lines,
    M triangle lines and K ordered boundary indices (one per line).
    """
    lines = [f"vertices {mesh.n_vertices} triangles {len(mesh.triangles)} boundary {len(mesh.boundary_loop)}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles]
    lines += [str(i) for i in mesh.boundary_loop]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path, geom: DiskGeometry) -> Mesh:
    text = Path(path).read_text().split("\n")
    head = text[0].split()
    if head[0::2] != ["vertices", "triangles", "boundary"]:
        raise ValueError(f"bad mesh header: {text[0]!r}")
    n, nt, nb = (int(v) for v in head[1::2])
    body = text[1:]
    vertices = np.array([[float(v) for v in ln.split()] for ln in body[:n]])
    triangles = np.array([[int(v) for v in ln.split()] for ln in body[n : n + nt]], dtype=np.int64)
    loop = np.array([int(ln) for ln in body[n + nt : n + nt + nb]], dtype=np.int64)
    R = geom.R
    theta = np.arctan2(vertices[loop, 1], vertices[loop, 0])
    arclengths = R * np.mod(np.roll(theta, -1) - theta, 2 * math.pi)
    h_max = float(_edge_lengths(vertices, triangles).max())
    mask = control_mask(np.hypot(*vertices.T), geom.r_control, h_max)
    mesh = Mesh(vertices, triangles, loop, arclengths, vertices[loop] / R, mask, h_max, geom)
    check_mesh(mesh)
    return mesh


@dataclass(frozen=True)
class Eta0Field:
    values: np.ndarray
    grad: np.ndarray
    sup_norm: float


def eta0(x: np.ndarray, R: float) -> np.ndarray:
    """eta0(x) = R^2 - |x|^2 on points of shape (..., 2)."""
    return R**2 - np.sum(np.asarray(x) ** 2, axis=-1)


def grad_eta0(x: np.ndarray) -> np.ndarray:
    return -2.0 * np.asarray(x)


LAPLACIAN_ETA0 = -4.0


def build_eta0(mesh: Mesh, geom: DiskGeometry) -> Eta0Field:
    values = eta0(mesh.vertices, geom.R)
    values[mesh.boundary_loop] = 0.0
    grad = grad_eta0(mesh.vertices)
    outside = mesh.radii > geom.r_inner
    if np.any(np.linalg.norm(grad[outside], axis=1) < 1e-14):
        raise ValueError("eta0 has a critical point outside omega'")
    return Eta0Field(values, grad, geom.R**2)


def normal_derivative_eta0(mesh: Mesh, eta: Eta0Field) -> np.ndarray:
    """grad eta0 . nu at the boundary vertices (in boundary-loop order)."""
    dn = np.einsum("ij,ij->i", eta.grad[mesh.boundary_loop], mesh.outward_normals)
    if np.any(dn >= 0):
        bad = int(np.argmax(dn >= 0))
        raise ValueError(f"normal derivative of eta0 is not negative at boundary vertex {bad}")
    return dn
