import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glcontrol.assembly import assemble, dump_coo, energy_product, hk_norms, indicator_mass
from glcontrol.geometry import build_mesh
from glcontrol.params import DiskGeometry

G = DiskGeometry(1.0, 0.25, 0.5)


@pytest.fixture(scope="module")
def ops():
    return assemble(build_mesh(G, 0.1))


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(G, 0.1)


def test_symmetry_and_sign(ops):
    for name in ("M_bulk", "M_surf", "K_bulk", "K_surf", "M_ctrl"):
        A = getattr(ops, name)
        assert abs(A - A.T).max() == 0, name
        w = np.linalg.eigvalsh(A.toarray())
        assert w.min() > -1e-12, name
    assert np.linalg.eigvalsh(ops.M.toarray()).min() > 0


def test_surface_matrices_live_on_boundary(ops, mesh):
    interior = np.setdiff1d(np.arange(ops.n), mesh.boundary_loop)
    for A in (ops.M_surf, ops.K_surf):
        A = A.tocsr()
        assert A[interior].nnz == 0


def test_quadratic_exactness(ops, mesh):
    # int x^2 over the polygonal disk / circle: exact value on the mesh domain is close to pi/4
    x = mesh.vertices[:, 0]
    one = np.ones(ops.n)
    # stiffness reproduces int |grad x|^2 = area exactly for the linear function x
    assert x @ ops.K_bulk @ x == pytest.approx(one @ ops.M_bulk @ one, rel=1e-12)
    # tangential gradient of x on the polygon: int |d x / ds|^2 -> pi R
    assert x @ ops.K_surf @ x == pytest.approx(math.pi, rel=0.01)


def test_mass_convergence():
    errs = []
    for h in (0.1, 0.05):
        o = assemble(build_mesh(G, h))
        one = np.ones(o.n)
        errs.append(abs(one @ o.M_bulk @ one - math.pi))
    assert errs[1] < errs[0] / 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_energy_product_hermitian(ops, seed):
    r = np.random.default_rng(seed)
    u = r.standard_normal(ops.n) + 1j * r.standard_normal(ops.n)
    v = r.standard_normal(ops.n) + 1j * r.standard_normal(ops.n)
    assert energy_product(ops, u, v) == pytest.approx(np.conj(energy_product(ops, v, u)), rel=1e-12)
    assert energy_product(ops, u, u).real > 0
    n = hk_norms(ops, u)
    assert n["H1"] >= n["L2"] > 0


def test_control_mass_and_load(ops, mesh):
    chi = ops.mask
    assert np.allclose(ops.M_ctrl.toarray(), (np.diag(chi) @ ops.M.toarray() @ np.diag(chi)))
    h = np.ones(ops.n)
    assert np.allclose(ops.control_load(h), ops.M_ctrl @ h)


def test_indicator_mass_second_order():
    errs = []
    for h in (0.1, 0.05, 0.025):
        m = build_mesh(G, h)
        one = np.ones(m.n_vertices)
        errs.append(abs(one @ indicator_mass(m, 0.5) @ one - math.pi * 0.25))
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(rates) > 1.7


def test_dump_coo(ops, tmp_path):
    paths = dump_coo(ops, tmp_path)
    assert len(paths) == 5
    rows = np.loadtxt(paths[0])
    assert rows.shape[1] == 3 and len(rows) == ops.M_bulk.nnz
