import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from glcontrol.params import DiskGeometry, DivergenceError, Params, PreconditionError, field_names


def test_defaults_valid():
    p = Params()
    assert p.s > 1 and p.lam > 1 and p.m > 1
    assert 0 <= p.theta_scheme <= 1


@pytest.mark.parametrize("kw", [{"s": 1.0}, {"lam": 0.5}, {"m": 1.0}, {"a": 0.0}, {"T": -1.0},
                                {"theta_scheme": 1.5}])
def test_invalid_params_rejected(kw):
    with pytest.raises(PreconditionError):
        Params(**kw)


def test_with_and_to_dict_roundtrip():
    p = Params().with_(s=3.0, alpha=-0.2)
    assert p.s == 3.0 and p.alpha == -0.2
    assert Params(**p.to_dict()) == p
    assert set(p.to_dict()) == set(field_names(Params))


@pytest.mark.parametrize("args", [(1.0, 0.5, 0.4), (1.0, 0.0, 0.5), (1.0, 0.3, 1.0)])
def test_invalid_geometry(args):
    with pytest.raises(PreconditionError):
        DiskGeometry(*args)


@given(st.floats(0.1, 10.0))
def test_geometry_measures(R):
    g = DiskGeometry(R, 0.25 * R, 0.5 * R)
    assert math.isclose(g.area, math.pi * R**2)
    assert math.isclose(g.perimeter, 2 * math.pi * R)


def test_divergence_error_carries_report():
    e = DivergenceError("boom", {"k": 1})
    assert e.report == {"k": 1} and "boom" in str(e)
