import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pooled_spline.splines import (BasisError, SplineBasis, eval_basis, eval_basis_deriv,
                                   make_basis, normal_basis)


def _normal_quantile_bisect(p, tol=1e-12):
    lo, hi = -10.0, 10.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_normal_knots_match_bisection():
    basis = normal_basis((0.25, 0.5, 0.75))
    expected = [_normal_quantile_bisect(p) for p in (0.25, 0.5, 0.75)]
    np.testing.assert_allclose(basis.knots, expected, atol=1e-6)
    assert basis.knots[0] == pytest.approx(-0.6745, abs=1e-4)


def test_uniform_grid_knots():
    basis = make_basis(np.arange(1, 102), (0.25, 0.5, 0.75))
    assert basis.knots == (26.0, 51.0, 76.0)


def test_degenerate_values_name_quantiles():
    with pytest.raises(BasisError, match="0.25 and 0.5"):
        make_basis(np.full(20, 3.0))


@pytest.mark.parametrize("q", [(0.5, 0.25, 0.75), (0.0, 0.5, 0.75), (0.25, 0.5, 1.0)])
def test_bad_quantiles(q):
    with pytest.raises(BasisError):
        make_basis(np.arange(10.0), q)


def test_basis_validation():
    with pytest.raises(BasisError):
        SplineBasis((0.0, 0.0, 1.0))
    with pytest.raises(BasisError):
        SplineBasis((0.0, 1.0))
    assert SplineBasis.linear().dim == 1


def test_eval_at_first_knot_is_zero():
    t = 0.6745
    out = eval_basis(SplineBasis((-t, 0.0, t)), -t)
    np.testing.assert_allclose(out, [-t, 0.0])


def test_eval_hand_values():
    b = SplineBasis((-1.0, 0.0, 1.0))
    np.testing.assert_allclose(eval_basis(b, 0.0), [0.0, 1.0])
    # 3^3 - 2^3 * 2 + 1^3 * 1
    np.testing.assert_allclose(eval_basis(b, 2.0), [2.0, 12.0])


def test_linear_basis_is_identity():
    x = np.linspace(-3, 3, 7)
    np.testing.assert_array_equal(eval_basis(SplineBasis.linear(), x)[:, 0], x)


knot_triples = st.lists(st.floats(-5, 5), min_size=3, max_size=3, unique=True).map(sorted).filter(
    lambda t: t[1] - t[0] > 0.05 and t[2] - t[1] > 0.05)


@settings(max_examples=60, deadline=None)
@given(knot_triples, st.floats(0.01, 5))
def test_zero_below_first_knot(knots, gap):
    b = SplineBasis(tuple(knots))
    assert eval_basis(b, knots[0] - gap)[1] == 0.0


@settings(max_examples=60, deadline=None)
@given(knot_triples, st.floats(0.01, 5), st.floats(0.1, 3))
def test_linear_beyond_last_knot(knots, start, h):
    b = SplineBasis(tuple(knots))
    x = knots[2] + start + h * np.arange(3)
    f2 = eval_basis(b, x)[:, 1]
    second = f2[2] - 2 * f2[1] + f2[0]
    assert abs(second) < 1e-10 * max(1.0, np.abs(f2).max())


@settings(max_examples=40, deadline=None)
@given(knot_triples, st.floats(-4, 4))
def test_shift_covariance(knots, c):
    b = SplineBasis(tuple(knots))
    bs = SplineBasis(tuple(t + c for t in knots))
    x = np.linspace(knots[0] - 1, knots[2] + 1, 9)
    f, fs = eval_basis(b, x), eval_basis(bs, x + c)
    np.testing.assert_allclose(fs[:, 1], f[:, 1], atol=1e-9 * max(1, np.abs(f).max()))
    np.testing.assert_allclose(fs[:, 0], f[:, 0] + c, atol=1e-12 * max(1, abs(c)))


@pytest.mark.parametrize("knots", [tuple(normal_basis().knots), (-1.0, 0.3, 2.5)])
def test_smoothness_at_knots(knots):
    b = SplineBasis(knots)

    def f2(x):
        return float(eval_basis(b, x)[1])

    for t in knots:
        for h in (1e-2, 1e-3):
            # every straddling gap shrinks like O(h); a jump would leave an O(1) gap
            assert abs(f2(t + h) - f2(t - h)) < 50 * h
            d_left = (f2(t) - f2(t - h)) / h
            d_right = (f2(t + h) - f2(t)) / h
            assert abs(d_right - d_left) < 50 * h
            dd_left = (f2(t) - 2 * f2(t - h) + f2(t - 2 * h)) / h**2
            dd_right = (f2(t + 2 * h) - 2 * f2(t + h) + f2(t)) / h**2
            assert abs(dd_right - dd_left) < 200 * h


def test_derivative_matches_finite_difference():
    b = SplineBasis((-1.0, 0.2, 1.5))
    x = np.linspace(-3, 3, 61) + 1e-3
    h = 1e-6
    fd = (eval_basis(b, x + h) - eval_basis(b, x - h)) / (2 * h)
    np.testing.assert_allclose(eval_basis_deriv(b, x), fd, atol=1e-6)
