import numpy as np
import pytest

from langevin_bea.polynomials import Poly, format_poly, monomial_basis, parse_poly


def random_poly(rng, nvars, degree, terms=6):
    p = Poly.zero(nvars)
    for _ in range(terms):
        expt = tuple(int(e) for e in rng.integers(0, degree + 1, nvars))
        if sum(expt) > degree:
            continue
        p = p + Poly.monomial(nvars, expt, rng.normal())
    return p


def test_arithmetic_matches_pointwise_evaluation():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(40, 2))
    for _ in range(25):
        a = random_poly(rng, 2, 4)
        b = random_poly(rng, 2, 4)
        assert np.allclose((a + b)(pts), a(pts) + b(pts), atol=1e-12)
        assert np.allclose((a - b)(pts), a(pts) - b(pts), atol=1e-12)
        assert np.allclose((a * b)(pts), a(pts) * b(pts), atol=1e-10)
        assert np.allclose((2.5 * a)(pts), 2.5 * a(pts), atol=1e-12)


def test_power_and_differentiation():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(30, 2))
    q = Poly.variable(2, 0)
    p = Poly.variable(2, 1)
    f = (q + 2 * p) ** 3
    assert np.allclose(f(pts), (pts[:, 0] + 2 * pts[:, 1]) ** 3)
    # d/dq (q + 2p)^3 = 3 (q + 2p)^2
    assert f.diff(0).allclose(3 * (q + 2 * p) ** 2, tol=1e-12)
    assert f.diff(1).allclose(6 * (q + 2 * p) ** 2, tol=1e-12)


def test_no_zero_coefficients_stored():
    q = Poly.variable(2, 0)
    z = q - q
    assert z.coeffs == {}
    assert z.is_zero()
    assert (0 * q).coeffs == {}


def test_substitution_composes():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(20, 2))
    f = random_poly(rng, 2, 3)
    g0 = random_poly(rng, 2, 2)
    g1 = random_poly(rng, 2, 2)
    h = f.subs([g0, g1])
    stacked = np.stack([g0(pts), g1(pts)], axis=-1)
    assert np.allclose(h(pts), f(stacked), atol=1e-9)


def test_flip_momentum_is_involution_and_flips_sign():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(20, 2))
    f = random_poly(rng, 2, 4)
    flipped = f.flip_momentum(1)
    assert flipped.flip_momentum(1).allclose(f, tol=0.0)
    neg = pts.copy()
    neg[:, 1] *= -1
    assert np.allclose(flipped(pts), f(neg), atol=1e-12)


def test_truncate_reports_dropped_mass():
    f = Poly(2, {(0, 0): 1.0, (2, 1): 2.0, (4, 2): -3.0})
    kept, dropped = f.truncate(3)
    assert kept.coeffs == {(0, 0): 1.0, (2, 1): 2.0}
    assert dropped == 3.0


def test_monomial_basis_count_and_order():
    basis = monomial_basis(2, 3)
    assert len(basis) == 10  # C(3+2, 2)
    assert basis[0] == (0, 0)
    degrees = [sum(b) for b in basis]
    assert degrees == sorted(degrees)


@pytest.mark.parametrize(
    "expr",
    ["q1^2", "2*q1*p1 - p1^2 + 0.5", "-q1 + 3.5e-2*p1^3", "1"],
)
def test_parse_format_round_trip(expr):
    f = parse_poly(expr, 1)
    g = parse_poly(format_poly(f, 1), 1)
    assert g.allclose(f, tol=1e-15)


def test_parse_poly_two_dims():
    f = parse_poly("q2^2*p1 - 2*p2", 2)
    assert f.coefficient((0, 2, 1, 0)) == 1.0
    assert f.coefficient((0, 0, 0, 1)) == -2.0


def test_parse_poly_rejects_bad_input():
    with pytest.raises(ValueError):
        parse_poly("q3", 2)
    with pytest.raises(ValueError):
        parse_poly("", 1)
    with pytest.raises(ValueError):
        parse_poly("q1^2 + * p1", 1)
