import numpy as np
import pytest

from langevin_bea.polynomials import Poly
from langevin_bea.potentials import (
    AuditError,
    PotentialModel,
    audit_assumptions,
    double_well,
    make_potential,
    quadratic,
    quartic,
    semiconvexity_constant,
)

ALL_MODELS = [maker(d) for maker in (quadratic, quartic, double_well) for d in (1, 2)]


def finite_diff_grad(model, q, h=1e-6):
    g = np.zeros_like(q)
    for i in range(q.shape[-1]):
        e = np.zeros(q.shape[-1])
        e[i] = h
        g[..., i] = (model.value(q + e) - model.value(q - e)) / (2 * h)
    return g


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: f"{m.name}-d{m.d}")
def test_grad_matches_finite_differences(model):
    rng = np.random.default_rng(11)
    q = rng.normal(size=(50, model.d))
    fd = finite_diff_grad(model, q)
    scale = 1.0 + np.abs(model.grad(q))
    assert np.max(np.abs(model.grad(q) - fd) / scale) < 1e-6


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: f"{m.name}-d{m.d}")
def test_hess_matches_finite_differences_of_grad(model):
    rng = np.random.default_rng(12)
    q = rng.normal(size=(20, model.d))
    h = 1e-6
    H = model.hess(q)
    for j in range(model.d):
        e = np.zeros(model.d)
        e[j] = h
        fd = (model.grad(q + e) - model.grad(q - e)) / (2 * h)
        scale = 1.0 + np.abs(H[..., j])
        assert np.max(np.abs(H[..., j] - fd) / scale) < 1e-6


def test_poly_form_agreement():
    rng = np.random.default_rng(13)
    for model in ALL_MODELS:
        q = rng.normal(size=(30, model.d))
        assert np.allclose(model.value(q), model.poly(q), atol=1e-12)


def test_deriv_apply_orders():
    model = quartic(1)
    q = np.array([[0.5], [1.5]])
    # V = q^4 + q^2: V''' = 24 q, 4th = 24
    v3 = model.deriv_apply(3, q, [np.ones((2, 1)), np.ones((2, 1))])
    assert np.allclose(v3[:, 0], 24 * q[:, 0])
    v4 = model.deriv_apply(4, q, [np.ones((2, 1))] * 3)
    assert np.allclose(v4[:, 0], 24.0)


def test_audit_quadratic_b2_constants():
    # (1/2)<V', q> = 0.5 q^2 vs beta V + c q^2 with c = beta/2 + 0.1875 = 0.4375
    model = quadratic(1)
    audit = audit_assumptions(model, [(-4, 4)], 201, gamma=1.0, candidate_beta=0.5)
    c = 1.0 * 0.5 * 1.5 / (8 * 0.5)
    assert c == pytest.approx(0.1875)
    assert audit.kappa == pytest.approx(0.0, abs=1e-12)
    assert audit.passes["B2"]
    assert audit.beta1 == pytest.approx(1.0, rel=1e-9)
    assert audit.kappa1 == pytest.approx(0.5, rel=1e-6)
    assert audit.kappa2 == pytest.approx(0.0, abs=1e-12)
    assert audit.theta == 0.0


def test_audit_quartic_lower_bound():
    model = quartic(1)
    audit = audit_assumptions(model, [(-2, 2)], 401, gamma=1.0, candidate_beta=0.5)
    assert audit.strict_b4
    assert audit.kappa1 == pytest.approx(1.0, abs=1e-3)
    assert audit.kappa2 == pytest.approx(0.0, abs=1e-9)
    assert audit.all_pass


def test_audit_unshifted_double_well():
    # V = q^4 - q^2 (not the shipped shifted form): theta = 2, relaxed B-4
    model = make_potential("custom", params={"terms": [[[4], 1.0], [[2], -1.0]]})
    audit = audit_assumptions(model, [(-2, 2)], 401, gamma=1.0, candidate_beta=0.5)
    assert audit.theta == pytest.approx(2.0, abs=1e-3)
    assert not audit.strict_b4
    assert audit.kappa1 == 1.0
    assert audit.kappa2 == pytest.approx(1.0, abs=1e-3)
    assert audit.passes["B4_quadratic_lower"]
    # brute-force confirmation of q^4 - q^2 >= q^2 - 1 on a fine grid
    q = np.linspace(-3, 3, 20001)
    assert np.all(q**4 - q**2 >= q**2 - 1 - 1e-12)


def test_semiconvexity_examples():
    assert semiconvexity_constant(quadratic(1), [(-3, 3)], 101) == 0.0
    model = make_potential("custom", params={"terms": [[[4], 1.0], [[2], -1.0]]})
    assert semiconvexity_constant(model, [(-2, 2)], 801) == pytest.approx(2.0, abs=1e-4)
    # V = cos(q) + q^2 has V'' = 2 - cos(q) >= 1 > 0
    cosq = PotentialModel.from_callables(
        1,
        value=lambda q: np.cos(q[..., 0]) + q[..., 0] ** 2,
        grad=lambda q: np.stack([-np.sin(q[..., 0]) + 2 * q[..., 0]], axis=-1),
        hess=lambda q: (2 - np.cos(q[..., 0]))[..., None, None],
        name="cos+q2",
    )
    assert semiconvexity_constant(cosq, [(-np.pi, np.pi)], 501) == 0.0


def test_theta_monotone_in_box():
    model = make_potential("custom", params={"terms": [[[4], 1.0], [[2], -1.0]]})
    small = semiconvexity_constant(model, [(-0.1, 0.1)], 101)
    large = semiconvexity_constant(model, [(-2.0, 2.0)], 101)
    assert small <= large + 1e-12


@pytest.mark.parametrize("maker", [quadratic, quartic, double_well])
def test_audit_constants_stable_under_refinement(maker):
    # constants certified at one resolution keep holding at 10x finer
    model = maker(1)
    box = [(-3, 3)]
    coarse = audit_assumptions(model, box, 41, gamma=1.0, candidate_beta=0.5)
    q = np.linspace(-3, 3, 401)[:, None]
    V, G = model.value(q), model.grad(q)
    qdotg = (q * G).sum(axis=-1)
    q2 = (q**2).sum(axis=-1)
    c = 0.5 * 1.5 / (8 * 0.5)
    b2 = 0.5 * qdotg - 0.5 * V - c * q2 + coarse.kappa
    assert b2.min() >= -1e-9
    b4 = V - coarse.kappa1 * q2 + coarse.kappa2
    assert b4.min() >= -1e-9


def test_non_finite_potential_fails_loudly():
    bad = PotentialModel.from_callables(
        1,
        value=lambda q: np.where(np.abs(q[..., 0]) > 1, np.nan, q[..., 0] ** 2),
        grad=lambda q: 2 * q,
        hess=lambda q: 2 * np.ones(q.shape[:-1])[..., None, None],
        name="bad",
    )
    with pytest.raises(AuditError, match="non-finite"):
        audit_assumptions(bad, [(-2, 2)], 21, gamma=1.0, candidate_beta=0.5)


def test_make_potential_custom_and_errors():
    model = make_potential("custom", params={"terms": [[[2, 0], 0.5], [[0, 2], 0.5]]})
    assert model.d == 2
    assert model.value(np.array([1.0, 1.0])) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="unknown potential"):
        make_potential("cubic")


def test_double_well_is_nonnegative_shifted_quartic():
    model = double_well(1)
    q = np.linspace(-2, 2, 101)[:, None]
    assert model.value(q).min() >= 0.0
    # same force field as q^4 - q^2
    raw = make_potential("custom", params={"terms": [[[4], 1.0], [[2], -1.0]]})
    assert np.allclose(model.grad(q), raw.grad(q), atol=1e-12)
