import math

import numpy as np
import pytest

from langevin_bea.integrators import PhaseState, StepParams
from langevin_bea.lyapunov import (
    check_drift_inequality,
    gamma,
    gamma_delta,
    generator_on_gamma_power,
    moment_sweep,
    weighted_norm,
)
from langevin_bea.polynomials import Poly
from langevin_bea.potentials import audit_assumptions, double_well, quadratic, quartic
from langevin_bea.harness import exact_ou_reference, gaussian_expectation

SIGMA2 = math.sqrt(2.0)


def test_gamma_point_values():
    model = quadratic(1)
    assert gamma(np.zeros(1), np.zeros(1), model, 1.0) == 1.0
    # 0.5 + 0.5 + 0.5 + 0.25 + 1
    assert gamma(np.ones(1), np.ones(1), model, 1.0) == pytest.approx(2.75)


def test_gamma_delta_values_and_identity():
    model = quadratic(1)
    q = np.ones(1)
    p = np.ones(1)
    assert gamma_delta(q, p, model, 1.0, 0.0) == gamma(q, p, model, 1.0)
    assert gamma_delta(q, p, model, 1.0, 0.1) == pytest.approx(2.775)
    rng = np.random.default_rng(0)
    qs = rng.normal(size=(100, 1))
    ps = rng.normal(size=(100, 1))
    lhs = gamma_delta(qs, ps, model, 1.3, 0.2) - gamma(qs, ps, model, 1.3)
    assert np.allclose(lhs, 0.25 * 1.3 * 0.2 * (ps**2).sum(axis=-1))


@pytest.mark.parametrize("maker", [quadratic, quartic, double_well])
@pytest.mark.parametrize("d", [1, 2])
def test_gamma_coercivity_lower_bound(maker, d):
    # Gamma >= |p|^2/8 + gamma^2 |q|^2/12 + 1, exactly, for nonnegative V
    model = maker(d)
    rng = np.random.default_rng(17)
    n = 1_000_000 // (2 * d)
    q = rng.uniform(-6, 6, size=(n, d))
    p = rng.uniform(-6, 6, size=(n, d))
    for g in (0.5, 1.0, 2.0):
        G = gamma(q, p, model, g)
        bound = (p**2).sum(-1) / 8 + g**2 * (q**2).sum(-1) / 12 + 1.0
        assert np.all(G >= bound)


def test_gamma_delta_momentum_bound():
    model = quartic(1)
    rng = np.random.default_rng(3)
    q = rng.normal(size=(1000, 1))
    p = rng.normal(size=(1000, 1))
    Gd = gamma_delta(q, p, model, 1.0, 0.3)
    assert np.all(Gd >= (p**2).sum(-1) / 8)


def test_generator_drift_equality_at_origin():
    # V = q^2/2, gamma=1, sigma^2=2, beta=.5, kappa=0 at (0,0):
    # L Gamma = 1 and -a1 Gamma + d1 = -0.5 + 1.5 = 1
    model = quadratic(1)
    lg = generator_on_gamma_power(np.zeros(1), np.zeros(1), model, 1.0, SIGMA2, 1)
    assert lg == pytest.approx(1.0)
    d1 = 0.5 * 1 * 2.0 + 1.0 * (0.0 + 0.5)
    a1 = 0.5
    assert -a1 * 1.0 + d1 == pytest.approx(1.0)


@pytest.mark.parametrize("maker", [quadratic, quartic])
@pytest.mark.parametrize("ell", [1, 2, 3])
def test_drift_inequality_on_grid(maker, ell):
    model = maker(1)
    audit = audit_assumptions(model, [(-5, 5)], 101, gamma=1.0, candidate_beta=0.5)
    report = check_drift_inequality(
        model, 1.0, SIGMA2, audit, ell, [(-5, 5), (-5, 5)], 101
    )
    assert report.passed
    assert report.a_ell == pytest.approx(0.5 if ell == 1 else 0.5 * (ell - 1))


def test_drift_inequality_sigma_zero():
    model = quadratic(1)
    audit = audit_assumptions(model, [(-4, 4)], 81, gamma=1.0, candidate_beta=0.5)
    report = check_drift_inequality(model, 1.0, 0.0, audit, 1, [(-4, 4), (-4, 4)], 81)
    assert report.d_ell == pytest.approx(1.0 * (audit.kappa + 0.5))
    assert report.passed


def test_drift_inequality_requires_audit():
    model = quadratic(1)
    with pytest.raises(ValueError, match="B-2"):
        check_drift_inequality(model, 1.0, SIGMA2, None, 1, [(-4, 4), (-4, 4)], 41)


def test_moment_sweep_zero_steps():
    model = quadratic(1)
    params = StepParams(delta=0.1, gamma=1.0, sigma=SIGMA2, scheme="split_step")
    sweep = moment_sweep(model, params, 1, 0, 4, seed=0)
    assert len(sweep.estimates) == 1
    assert sweep.estimates[0] == pytest.approx(1.0)  # Gamma_delta(0,0) = 1
    assert not sweep.diverged


def test_moment_sweep_ou_matches_exact_stationary():
    model = quadratic(1)
    delta = 0.5  # half the moment bound 1/gamma
    params = StepParams(delta=delta, gamma=1.0, sigma=SIGMA2, scheme="split_step")
    sweep = moment_sweep(model, params, 1, 20_000, 64, seed=2)
    assert not sweep.diverged
    ref = exact_ou_reference(1.0, SIGMA2, "split_step", delta)
    S = ref.stationary_cov_discrete()
    # E Gamma_delta under N(0, S) via its quadratic polynomial
    gpoly = Poly(2, {(0, 2): 0.5 + 0.25 * 1.0 * delta, (2, 0): 0.75,
                     (1, 1): 0.5, (0, 0): 1.0})
    exact = gaussian_expectation(gpoly, np.zeros(2), S)
    assert 0.5 * exact < sweep.estimates[-1] < 2.0 * exact


def test_moment_sweep_explicit_euler_divergence_flag():
    model = quartic(1)
    params = StepParams(delta=0.1, gamma=1.0, sigma=SIGMA2, scheme="explicit_euler")
    sweep = moment_sweep(
        model, params, 1, 500, 4, seed=0,
        state0=PhaseState(np.array([10.0]), np.zeros(1)),
    )
    assert sweep.diverged


def test_weighted_norm_constants_and_gamma_power():
    model = quadratic(1)
    box = [(-4, 4), (-4, 4)]
    one = Poly.constant(2, 1.0)
    res = weighted_norm(one, 0, 0, box, 41, model, 1.0)
    assert res.value == pytest.approx(1.0)
    assert res.seminorm == 0.0
    # f = Gamma itself, ell = 1, k = 0 -> ratio identically 1
    gpoly = Poly(2, {(0, 2): 0.5, (2, 0): 0.75, (1, 1): 0.5, (0, 0): 1.0})
    res = weighted_norm(gpoly, 1, 0, box, 41, model, 1.0)
    assert res.value == pytest.approx(1.0, abs=1e-12)


def test_weighted_norm_q2_bounded_by_coercivity():
    model = quadratic(1)
    q2 = Poly.monomial(2, (2, 0))
    res = weighted_norm(q2, 1, 0, [(-6, 6), (-6, 6)], 121, model, 1.0)
    assert res.value <= 12.0 / 1.0**2 + 1e-9
    assert 0.0 < res.boundary_ratio <= 1.0


def test_weighted_norm_callable_matches_poly():
    model = quadratic(1)
    q2 = Poly.monomial(2, (2, 0))
    box = [(-3, 3), (-3, 3)]
    res_poly = weighted_norm(q2, 1, 1, box, 81, model, 1.0)
    res_grid = weighted_norm(lambda x: x[:, 0] ** 2, 1, 1, box, 81, model, 1.0)
    assert res_grid.value == pytest.approx(res_poly.value, rel=1e-2)
