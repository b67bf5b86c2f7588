import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glcontrol import carleman as cm
from glcontrol.params import Params

T = 1.0
FAMILY = cm.TestFunctionFamily(0, 20, T, 1.0, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 19), st.floats(0, 2 * math.pi), st.floats(0, 1), st.floats(0.05, 0.95))
def test_test_function_derivatives_fd(i, ang, r, t):
    v = FAMILY.members[i]
    x = np.array([[r * math.cos(ang), r * math.sin(ang)]])
    val, vt, g, H = v.eval(x, t)
    e = 1e-5
    fd_t = (v.eval(x, t + e)[0] - v.eval(x, t - e)[0]) / (2 * e)
    assert np.allclose(fd_t, vt, rtol=1e-6, atol=1e-8)
    for d in range(2):
        dx = np.zeros(2)
        dx[d] = e
        fd_g = (v.eval(x + dx, t)[0] - v.eval(x - dx, t)[0]) / (2 * e)
        assert np.allclose(fd_g, g[..., d], rtol=1e-6, atol=1e-8)
        fd_H = (v.eval(x + dx, t)[2] - v.eval(x - dx, t)[2]) / (2 * e)
        assert np.allclose(fd_H, H[..., d, :], rtol=1e-6, atol=1e-8)


def test_test_functions_vanish_at_time_ends():
    x = np.array([[0.3, -0.2]])
    for v in FAMILY.members:
        for t in (0.0, T):
            assert abs(v.eval(x, t)[0][0]) == 0


def test_boundary_derivatives_polar():
    """Laplace-Beltrami on the circle equals the second angular derivative / R^2."""
    R = 1.3
    v = FAMILY.members[3]
    ang = np.linspace(0, 2 * np.pi, 9)[:-1]
    e = 1e-4
    t = 0.4

    def on_circle(a):
        return np.column_stack([R * np.cos(a), R * np.sin(a)])

    X = on_circle(ang)
    _, _, g, H = v.eval(X, t)
    nu, tau, dn, gt, lapt = cm.boundary_derivatives(X, g, H, R)
    fd = (v.eval(on_circle(ang + e), t)[0] - 2 * v.eval(X, t)[0] + v.eval(on_circle(ang - e), t)[0]) / (e * R) ** 2
    assert np.allclose(fd, lapt, rtol=1e-5, atol=1e-6)
    fdn = (v.eval(X * (1 + e / R), t)[0] - v.eval(X * (1 - e / R), t)[0]) / (2 * e)
    assert np.allclose(fdn, dn, rtol=1e-6, atol=1e-8)
    assert np.allclose(np.sum(gt * nu, axis=-1), 0, atol=1e-12)


@pytest.mark.parametrize("s,lam", [(1.1, 1.1), (2.0, 1.5), (3.0, 1.2)])
def test_conjugated_identity(s, lam):
    p = Params(s=s, lam=lam)
    worst = 0.0
    for i, v in enumerate(FAMILY.members):
        pts = {"bulk": cm.collocation_points(200, T, 1.0, i, False),
               "boundary": cm.collocation_points(200, T, 1.0, 100 + i, True)}
        worst = max(worst, cm.conjugate_identity_defect(v, p, pts, 1.0))
    assert worst <= 1e-9


def test_identity_is_sensitive():
    """A wrong operator (sign of alpha flipped in the adjoint) must be detected."""
    p = Params()
    v = FAMILY.members[2]
    X, t = cm.collocation_points(50, T, 1.0, 0, False)
    P1, P2, Rw = cm.conjugate_bundle(v, p, X, t, 1.0, False)
    _, vt, _, H = v.eval(X, t)
    wrong = vt + p.a * (1 + p.alpha * 1j) * (H[..., 0, 0] + H[..., 1, 1])
    assert np.max(np.abs(P1 + P2 - wrong)) > 1e-3 * max(1, np.max(np.abs(wrong)))




def test_terms_nonnegative_and_scale_invariant(desk):
    p = Params(s=5.0, lam=2.0)
    quad = cm.quadrature_weights(desk["mesh"], desk["ops"])
    v = FAMILY.members[1]
    terms, clamped = cm.carleman_terms(v, p, desk["mesh"], desk["grid"], quad)
    assert set(terms) == set(cm.LHS_TERMS + cm.RHS_TERMS)
    assert all(x >= 0 for x in terms.values())
    assert 0 <= clamped <= 1
    t2, _ = cm.carleman_terms(v.scaled(3 - 2j), p, desk["mesh"], desk["grid"], quad)
    for k in terms:
        assert t2[k] == pytest.approx(13 * terms[k], rel=1e-12, abs=1e-300)


def test_ratio_rows_and_csv(desk, tmp_path):
    fam = cm.TestFunctionFamily(1, 3, T, 1.0, 0.5)
    rows = cm.carleman_ratio(fam, Params(), [5.0, 10.0], [2.0], desk["mesh"], desk["grid"], desk["ops"])
    assert len(rows) == 6
    for r in rows:
        assert r["status"] in ("ok", "degenerate", "impossible")
        if r["status"] == "ok":
            assert r["ratio"] == pytest.approx(r["lhs"] / r["rhs"])
    cm.write_ratio_csv(rows, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("member_id,s,lambda") and len(lines) == 7
    mx = cm.max_ratio_by_s(rows, 2.0)
    assert list(mx) == [5.0, 10.0]


def test_family_deterministic():
    a = cm.make_family(5, 4, T, 1.0, 0.5)
    b = cm.make_family(5, 4, T, 1.0, 0.5)
    assert a == b
