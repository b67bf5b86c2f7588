import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glcontrol.geometry import (
    LAPLACIAN_ETA0,
    build_eta0,
    build_mesh,
    check_mesh,
    eta0,
    grad_eta0,
    load_mesh,
    normal_derivative_eta0,
    save_mesh,
)
from glcontrol.params import DiskGeometry, PreconditionError

G = DiskGeometry(1.0, 0.25, 0.5)


@pytest.mark.parametrize("h", [0.1, 0.06])
def test_mesh_invariants(h):
    mesh = build_mesh(G, h)
    check_mesh(mesh)
    assert mesh.h_max <= 1.6 * h
    assert np.allclose(mesh.radii[mesh.boundary_loop], G.R, atol=1e-14)
    assert np.all(mesh.radii <= G.R + 1e-14)
    # outward normals are the unit radial vectors at the boundary
    assert np.allclose(mesh.outward_normals, mesh.vertices[mesh.boundary_loop] / G.R)
    assert math.isclose(mesh.boundary_arclengths.sum(), 2 * math.pi * G.R, rel_tol=1e-12)


def test_mesh_deterministic():
    a, b = build_mesh(G, 0.1, seed=3), build_mesh(G, 0.1, seed=3)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.triangles, b.triangles)


def test_control_mask_support():
    mesh = build_mesh(G, 0.1)
    m = mesh.control_mask
    assert np.all((m >= 0) & (m <= 1))
    assert np.all(m[mesh.radii > G.r_control] == 0)
    assert np.all(m[mesh.radii <= G.r_control - mesh.h_max] == 1)


def test_too_coarse_rejected():
    with pytest.raises(PreconditionError):
        build_mesh(G, 0.2)


def test_save_load_roundtrip(tmp_path):
    mesh = build_mesh(G, 0.1)
    p = tmp_path / "m.txt"
    save_mesh(mesh, p)
    back = load_mesh(p, G)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(back.boundary_loop, mesh.boundary_loop)
    assert np.allclose(back.control_mask, mesh.control_mask)


def test_broken_mesh_detected():
    mesh = build_mesh(G, 0.1)
    broken = dataclasses.replace(mesh, boundary_loop=mesh.boundary_loop[:-1])
    with pytest.raises(ValueError):
        check_mesh(broken)


@given(st.floats(0, 2 * math.pi), st.floats(0, 1), st.floats(0.5, 3.0))
def test_eta0_calculus(ang, r, R):
    x = np.array([r * R * math.cos(ang), r * R * math.sin(ang)])
    # central finite differences as the oracle (eta0 is quadratic: FD is exact up to rounding)
    e = 1e-3
    fd = np.array([(eta0(x + e * d, R) - eta0(x - e * d, R)) / (2 * e) for d in np.eye(2)])
    assert np.allclose(fd, grad_eta0(x), atol=1e-9)
    lap = sum(eta0(x + e * d, R) - 2 * eta0(x, R) + eta0(x - e * d, R) for d in np.eye(2)) / e**2
    assert abs(lap - LAPLACIAN_ETA0) < 1e-5
    assert eta0(x, R) >= -1e-12


def test_eta0_boundary_and_normal_derivative():
    mesh = build_mesh(G, 0.1)
    eta = build_eta0(mesh, G)
    assert np.all(eta.values[mesh.boundary_loop] == 0)
    assert np.all(eta.values >= 0)
    assert eta.sup_norm == pytest.approx(G.R**2)
    assert np.allclose(normal_derivative_eta0(mesh, eta), -2 * G.R)
