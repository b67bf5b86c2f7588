"""P1 bulk-surface operators with the trace u = u_Gamma built into the unknowns.

Every mesh vertex carries one complex DOF; boundary vertices hold both the
trace of the bulk field and the surface field. The normal-flux coupling term
never appears: the weak Wentzell form absorbs it through integration by parts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .geometry import Mesh


@dataclass(frozen=True)
class OperatorSet:
    M_bulk: sp.csr_matrix
    M_surf: sp.csr_matrix
    K_bulk: sp.csr_matrix
    K_surf: sp.csr_matrix
    M_ctrl: sp.csr_matrix
    mask: np.ndarray

    @property
    def n(self) -> int:
        return self.M_bulk.shape[0]

    @property
    def M(self) -> sp.csr_matrix:
        return (self.M_bulk + self.M_surf).tocsr()

    @property
    def K(self) -> sp.csr_matrix:
        """Unit-coefficient Wentzell stiffness K_bulk + K_surf."""
        return (self.K_bulk + self.K_surf).tocsr()

    def control_load(self, h: np.ndarray) -> np.ndarray:
        return self.M_ctrl @ h


def assemble(mesh: Mesh) -> OperatorSet:
    """Assemble consistent (non-lumped) P1 mass and stiffness matrices."""
    v = mesh.vertices
    tri = mesh.triangles
    n = mesh.n_vertices
    p0, p1, p2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    if np.any(area < 1e-14):
        raise ValueError(f"degenerate triangle (min area {area.min():.3e})")

    # gradients of barycentric coordinates: rows are grad(lambda_i)
    e = np.stack([p2 - p1, p0 - p2, p1 - p0], axis=1)  # edge opposite vertex i
    grads = np.stack([e[..., 1], -e[..., 0]], axis=2) / (2 * area[:, None, None])
    grads = -grads  # outward-rotated edge gives -grad; flip to grad(lambda_i)
    k_loc = area[:, None, None] * np.einsum("tik,tjk->tij", grads, grads)
    m_ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    m_loc = area[:, None, None] * m_ref

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    K_bulk = sp.coo_matrix((k_loc.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    M_bulk = sp.coo_matrix((m_loc.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    edges = mesh.boundary_edges
    ell = mesh.boundary_arclengths
    ms_loc = ell[:, None, None] * np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    ks_loc = (1.0 / ell)[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])
    r2 = np.repeat(edges, 2, axis=1).ravel()
    c2 = np.tile(edges, (1, 2)).ravel()
    M_surf = sp.coo_matrix((ms_loc.ravel(), (r2, c2)), shape=(n, n)).tocsr()
    K_surf = sp.coo_matrix((ks_loc.ravel(), (r2, c2)), shape=(n, n)).tocsr()

    D = sp.diags(mesh.control_mask)
    M_ctrl = (D @ M_bulk @ D).tocsr()
    return OperatorSet(
        M_bulk=_symmetrize(M_bulk),
        M_surf=_symmetrize(M_surf),
        K_bulk=_symmetrize(K_bulk),
        K_surf=_symmetrize(K_surf),
        M_ctrl=_symmetrize(M_ctrl),
        mask=mesh.control_mask.copy(),
    )


def indicator_mass(mesh: Mesh, radius: float, levels: int = 8) -> sp.csr_matrix:
    """P1 mass matrix weighted by the exact indicator of ball(0, radius).

    Each triangle is split into ``levels**2`` congruent pieces and the
    indicator is sampled at their centroids, so only triangles cut by the
    circle carry quadrature error.
    """
    v = mesh.vertices
    tri = mesh.triangles
    n = mesh.n_vertices
    p0, p1, p2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    # barycentric centroids of the sub-triangles of a uniform refinement
    k = levels
    pts = []
    for i in range(k):
        for j in range(k - i):
            pts.append(((i + 1 / 3) / k, (j + 1 / 3) / k))  # upward pieces
            if i + j < k - 1:
                pts.append(((i + 2 / 3) / k, (j + 2 / 3) / k))  # downward pieces
    pts = np.array(pts)
    lam = np.column_stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])  # (Q, 3)
    X = p0[:, None, :] + pts[None, :, 0, None] * d1[:, None, :] + pts[None, :, 1, None] * d2[:, None, :]
    inside = (np.sum(X**2, axis=2) < radius**2).astype(float)  # (T, Q)
    w = area[:, None] * inside / len(pts)
    m_loc = np.einsum("tq,qi,qj->tij", w, lam, lam)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return _symmetrize(sp.coo_matrix((m_loc.ravel(), (rows, cols)), shape=(n, n)).tocsr())


def _symmetrize(A):
    return (0.5 * (A + A.T)).tocsr()


def energy_product(ops: OperatorSet, u: np.ndarray, v: np.ndarray) -> complex:
    """Complex pairing int_Omega u conj(v) + int_Gamma u conj(v).

    The real part is the L^2 x L^2(Gamma) scalar product.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != (ops.n,) or v.shape != (ops.n,):
        raise ValueError(f"expected fields of length {ops.n}, got {u.shape} and {v.shape}")
    return complex(u @ (ops.M @ np.conj(v)))


def hk_norms(ops: OperatorSet, u: np.ndarray) -> dict:
    l2sq = energy_product(ops, u, u).real
    u = np.asarray(u)
    grad_sq = float(np.real(u @ (ops.K @ np.conj(u))))
    return {"L2": float(np.sqrt(max(l2sq, 0.0))), "H1": float(np.sqrt(max(l2sq + grad_sq, 0.0)))}


def dump_coo(ops: OperatorSet, out_dir) -> list[Path]:
    """Write every matrix as ``row col value`` text, one file per matrix."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("M_bulk", "M_surf", "K_bulk", "K_surf", "M_ctrl"):
        A = getattr(ops, name).tocoo()
        order = np.lexsort((A.col, A.row))
        p = out_dir / f"{name}.coo"
        p.write_text(
            "".join(f"{r} {c} {x:.17g}\n" for r, c, x in zip(A.row[order], A.col[order], A.data[order]))
        )
        paths.append(p)
    return paths
