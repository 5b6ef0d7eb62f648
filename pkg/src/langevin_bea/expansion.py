"""Backward-error-analysis engine for the implicit Langevin schemes.

The pieces, in dependency order:

* the position-solve Taylor coefficients d_k and their recursion;
* the one-step weak expansion E phi(q_1, p_1) ~ sum delta^n A_n phi,
  assembled two independent ways: symbolically (exact polynomial algebra
  in a sqrt(delta)-graded series, taking Gaussian moments of the noise)
  and numerically (deterministic Gauss-Hermite expectations on a step
  ladder, coefficients extracted by a guarded Vandermonde fit);
* the modified-generator coefficients L_n from the Bernoulli recursion,
  hard-checked by reconstructing the A_n from the inverse relation;
* the modified invariant density corrections mu_n from Poisson solves
  against the Gibbs-adjoint operators;
* the modified flow v_n(t) via Duhamel quadrature, cross-checked against
  the exact block-triangular coefficient dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.linalg

from .generators import (
    GibbsMeasure,
    IncompatibleRHS,
    OperatorMatrix,
    adjoint_matrix,
    build_operator_matrix,
    solve_poisson,
)
from .integrators import SolverConfig, StepParams, _step_arrays
from .polynomials import Poly, monomial_basis

__all__ = [
    "DriftExpansion",
    "drift_coefficients",
    "taylor_drift_check",
    "ExtractionResult",
    "one_step_weak_coefficients",
    "one_step_expectation",
    "assemble_An",
    "build_A_series",
    "OperatorSeries",
    "bernoulli_numbers",
    "modified_operators",
    "MeasureExpansion",
    "measure_expansion",
    "ModifiedFlow",
    "modified_flow",
]


# ---------------------------------------------------------------------- #
# d_k recursion


@dataclass
class DriftExpansion:
    """Taylor coefficients of the implicit position solve in the step size.

    ds[k-1] is d_k as a list of d phase-space polynomials in (x, y); the
    expansion reads z = x + sum_k delta^k d_k(x, y).
    """

    ds: list
    order: int
    d: int


def _compositions(total, parts):
    """All tuples of `parts` nonnegative ints summing to `total`."""
    if parts == 0:
        if total == 0:
            yield ()
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def drift_coefficients(model, gamma, order):
    """Build d_1..d_order by the recursion.

    d_1(x, y) = y and, for k >= 2,
    d_k = (-1)^(k-1) gamma^(k-2) (gamma y + grad V(x))
          + sum_{j=2}^{k-1} (-1)^(j-1) gamma^(j-2)
            sum_{n=1}^{k-j} (1/n!)
            sum_{k_1+..+k_n = k-j-n} D^(n+1) V(x)(d_{k_1+1}, .., d_{k_n+1}).
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    d = model.d
    nv = 2 * d
    y_vec = [Poly.variable(nv, d + i) for i in range(d)]
    grad_vec = [
        Poly(nv, {k + (0,) * d: c for k, c in model.poly.diff(i).coeffs.items()})
        for i in range(d)
    ]
    gy_plus_grad = [gamma * y_vec[i] + grad_vec[i] for i in range(d)]

    ds = [y_vec]
    for k in range(2, order + 1):
        dk = [((-1.0) ** (k - 1)) * gamma ** (k - 2) * comp for comp in gy_plus_grad]
        for j in range(2, k):
            sign = ((-1.0) ** (j - 1)) * gamma ** (j - 2)
            for n in range(1, k - j + 1):
                m = k - j - n
                if m < 0:
                    continue
                coeff = sign / math.factorial(n)
                for ks in _compositions(m, n):
                    vecs = [ds[ki] for ki in ks]  # d_{k_i + 1} is ds[k_i]
                    contracted = model.deriv_apply_poly(n + 1, vecs)
                    for i in range(d):
                        dk[i] = dk[i] + coeff * contracted[i]
        ds.append(dk)
    return DriftExpansion(ds=ds, order=order, d=d)


def _position_solve_mp(model, gamma, qv, pv, delta, mp):
    """High-precision Newton solve of z(1+g*delta) + delta^2 grad V(z) = (1+g*delta) q + delta p."""
    d = model.d
    grad_polys = [model.poly.diff(i) for i in range(d)]
    hess_polys = [[grad_polys[i].diff(j) for j in range(d)] for i in range(d)]

    def ev(poly, z):
        total = mp.mpf(0)
        for k, c in poly.coeffs.items():
            term = mp.mpf(repr(c))
            for x, e in zip(z, k):
                term *= x**e
            total += term
        return total

    one = mp.mpf(1)
    g = mp.mpf(repr(float(gamma)))
    a = one + g * delta
    z = [qv[i] for i in range(d)]
    for _ in range(80):
        F = [a * z[i] + delta**2 * ev(grad_polys[i], z) - a * qv[i] - delta * pv[i] for i in range(d)]
        if max(abs(f) for f in F) < mp.mpf(10) ** (-mp.mp.dps + 6):
            break
        J = mp.matrix(d, d)
        for i in range(d):
            for j in range(d):
                J[i, j] = (one if i == j else mp.mpf(0)) * a + delta**2 * ev(hess_polys[i][j], z)
        dz = mp.lu_solve(J, mp.matrix(F))
        z = [z[i] - dz[i] for i in range(d)]
    return z


def taylor_drift_check(model, gamma, expansion, points, h=1e-10, dps=80):
    """Divided-difference cross-check of the d_k recursion.

    For each base point the implicit position solve runs in high-precision
    arithmetic on a small step ladder; Newton-form divided differences then
    read off the Taylor coefficients of the solve directly (the k-th
    divided difference through 0, h, .., k*h is d_k + O(h * d_{k+1})).
    Returns the worst relative error per order k = 1..order.
    """
    import mpmath as mp

    d = model.d
    points = np.asarray(points, dtype=float)
    order = expansion.order
    dvals = [np.stack([comp(points) for comp in dk], axis=-1) for dk in expansion.ds]
    worst = {k: 0.0 for k in range(1, order + 1)}
    with mp.workdps(dps):
        hh = mp.mpf(repr(float(h)))
        nodes = [j * hh for j in range(order + 2)]
        for m, pt in enumerate(points):
            qv = [mp.mpf(repr(float(x))) for x in pt[:d]]
            pv = [mp.mpf(repr(float(x))) for x in pt[d:]]
            values = [qv] + [
                _position_solve_mp(model, gamma, qv, pv, dn, mp) for dn in nodes[1:]
            ]
            for i in range(d):
                col = [v[i] for v in values]
                # Newton divided-difference diagonal: coeffs[k] = [f; x_0..x_k]
                diagonal = [col[0]]
                work = list(col)
                for k in range(1, order + 2):
                    work = [
                        (work[j + 1] - work[j]) / (nodes[j + k] - nodes[j])
                        for j in range(len(work) - 1)
                    ]
                    diagonal.append(work[0])
                for k in range(1, order + 1):
                    approx = float(diagonal[k])
                    exact = float(dvals[k - 1][m, i])
                    scale = max(abs(exact), 1.0)
                    err = abs(approx - exact) / scale
                    worst[k] = max(worst[k], err)
    return worst


# ---------------------------------------------------------------------- #
# symbolic one-step expansion (sqrt(delta)-graded polynomial series)


class _Graded:
    """Series sum_g delta^(g/2) * P_g with Poly coefficients, truncated at cap."""

    __slots__ = ("terms", "cap", "nvars")

    def __init__(self, nvars, terms=None, cap=64):
        self.nvars = nvars
        self.cap = cap
        self.terms = {}
        if terms:
            for g, p in terms.items():
                if g <= cap and not p.is_zero():
                    self.terms[g] = p

    def __add__(self, other):
        out = dict(self.terms)
        for g, p in other.terms.items():
            out[g] = out[g] + p if g in out else p
        return _Graded(self.nvars, out, min(self.cap, other.cap))

    def __mul__(self, other):
        out = {}
        for g1, p1 in self.terms.items():
            for g2, p2 in other.terms.items():
                g = g1 + g2
                if g > self.cap:
                    continue
                prod = p1 * p2
                out[g] = out[g] + prod if g in out else prod
        return _Graded(self.nvars, out, min(self.cap, other.cap))

    def power(self, n):
        result = _Graded(self.nvars, {0: Poly.constant(self.nvars, 1.0)}, self.cap)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result


def _expect_eta(poly, d):
    """Gaussian expectation over the eta block (vars 2d..3d-1) of a 3d-var Poly."""
    out = {}
    for k, c in poly.coeffs.items():
        eta = k[2 * d : 3 * d]
        if any(e % 2 for e in eta):
            continue
        factor = 1.0
        for e in eta:
            factor *= float(math.prod(range(1, e, 2))) if e else 1.0
        key = k[: 2 * d]
        out[key] = out.get(key, 0.0) + c * factor
    return Poly(2 * d, out)


def _scheme_state_series(scheme, model, gamma, sigma, n_orders):
    """q_1 and p_1 as graded series over (q, p, eta), exact to delta^n_orders.

    Split-step: q_1 = q + sum delta^k d_k(q, p),
                p_1 = sum delta^k d_{k+1}(q, p) + sqrt(delta) sigma eta.
    Implicit Euler: same position solve with momentum p + sqrt(delta) sigma
    eta substituted, and p_1 = (q_1 - q)/delta; the substitution produces
    the half-power terms whose odd Gaussian moments cancel in expectation.
    """
    d = model.d
    nv3 = 3 * d
    cap = 2 * n_orders + 2
    exp = drift_coefficients(model, gamma, n_orders + 1)

    def embed(poly2d, momentum_subs=None):
        """Lift a (x, y) polynomial to (q, p, eta[, s]) variables."""
        if momentum_subs is None:
            return Poly(nv3, {k + (0,) * d: c for k, c in poly2d.coeffs.items()})
        reps = [Poly.variable(nv3 + 1, i) for i in range(d)] + momentum_subs
        return poly2d.subs(reps)

    q_series = [
        _Graded(nv3, {0: Poly.variable(nv3, i)}, cap) for i in range(d)
    ]
    p_series = [_Graded(nv3, {}, cap) for _ in range(d)]

    if scheme == "split_step":
        for k, dk in enumerate(exp.ds, start=1):
            for i in range(d):
                poly = embed(dk[i])
                if 2 * k <= cap:
                    q_series[i] = q_series[i] + _Graded(nv3, {2 * k: poly}, cap)
                if 2 * (k - 1) <= cap:
                    p_series[i] = p_series[i] + _Graded(nv3, {2 * (k - 1): poly}, cap)
        for i in range(d):
            noise = Poly.variable(nv3, 2 * d + i) * sigma
            p_series[i] = p_series[i] + _Graded(nv3, {1: noise}, cap)
        return q_series, p_series

    if scheme == "implicit_euler":
        # substitute y -> p + s*sigma*eta, with s a bookkeeping variable for
        # sqrt(delta); its exponent shifts the grade by one half-step each.
        momentum_subs = [
            Poly.variable(nv3 + 1, d + i)
            + sigma * Poly.variable(nv3 + 1, nv3) * Poly.variable(nv3 + 1, 2 * d + i)
            for i in range(d)
        ]
        for k, dk in enumerate(exp.ds, start=1):
            for i in range(d):
                lifted = embed(dk[i], momentum_subs)
                for key, c in lifted.coeffs.items():
                    g_pos = 2 * k + key[nv3]
                    g_mom = 2 * (k - 1) + key[nv3]
                    base = Poly(nv3, {key[:nv3]: c})
                    if g_pos <= cap:
                        q_series[i] = q_series[i] + _Graded(nv3, {g_pos: base}, cap)
                    if g_mom <= cap:
                        p_series[i] = p_series[i] + _Graded(nv3, {g_mom: base}, cap)
        return q_series, p_series

    raise ValueError("symbolic expansion covers the implicit schemes only")


def _compose_and_average(phi, q1, p1, d, n_max, check_half_powers=True):
    """E phi(q1_series, p1_series) collected by integer delta powers."""
    cap = 2 * n_max
    acc = _Graded(3 * d, {}, cap)
    for k, c in phi.coeffs.items():
        term = _Graded(3 * d, {0: Poly.constant(3 * d, c)}, cap)
        for i in range(d):
            if k[i]:
                term = term * q1[i].power(k[i])
            if k[d + i]:
                term = term * p1[i].power(k[d + i])
        acc = acc + term
    out = [Poly.zero(2 * d) for _ in range(n_max + 1)]
    for g, poly in acc.terms.items():
        expected = _expect_eta(poly, d)
        if g % 2:
            if check_half_powers and expected.max_abs_coeff() > 1e-12:
                raise AssertionError(
                    f"half-power grade {g} survived expectation: {expected!r}"
                )
            continue
        if g // 2 <= n_max:
            out[g // 2] = out[g // 2] + expected
    return out


def apply_An_symbolic(scheme, model, gamma, sigma, phi, n_max, check_half_powers=True):
    """A_0 phi .. A_{n_max} phi by exact graded polynomial composition.

    Returns the list of phase-space polynomials [A_n phi]. The odd
    (half-power) grades must vanish after taking Gaussian moments of the
    noise; this is asserted when check_half_powers is set.
    """
    q1, p1 = _scheme_state_series(scheme, model, gamma, sigma, n_max)
    return _compose_and_average(phi, q1, p1, model.d, n_max, check_half_powers)


# ---------------------------------------------------------------------- #
# numeric extraction


def _gauss_hermite_eta(d, nodes):
    """Standard-normal quadrature nodes/weights tensorized over d dims."""
    x, w = np.polynomial.hermite.hermgauss(nodes)
    eta1 = x * math.sqrt(2.0)
    w1 = w / math.sqrt(math.pi)
    if d == 1:
        return eta1[:, None], w1
    grids = np.meshgrid(*([eta1] * d), indexing="ij")
    eta = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.ones(eta.shape[0])
    idx = np.meshgrid(*([np.arange(nodes)] * d), indexing="ij")
    for block in idx:
        weights = weights * w1[block.ravel()]
    return eta, weights


def _one_step_states(scheme, model, gamma, sigma, base_points, deltas, gh_nodes):
    """Stepped states over (delta ladder) x (points) x (GH noise nodes).

    Returns (states, weights, M, n_eta) with states of shape
    (n_deltas, M * n_eta, 2d); the states are observable-independent, so
    whole operator columns can be extracted from one set of solves.
    """
    d = model.d
    base_points = np.atleast_2d(np.asarray(base_points, dtype=float))
    eta, weights = _gauss_hermite_eta(d, gh_nodes)
    n_eta = len(eta)
    M = len(base_points)
    solver = SolverConfig(tol=1e-15, max_iter=200)
    q0 = np.repeat(base_points[:, :d], n_eta, axis=0)
    p0 = np.repeat(base_points[:, d:], n_eta, axis=0)
    eta_full = np.tile(eta, (M, 1))
    states = np.empty((len(deltas), M * n_eta, 2 * d))
    for i, delta in enumerate(deltas):
        params = StepParams(delta=float(delta), gamma=gamma, sigma=sigma, scheme=scheme)
        q1, p1, _ = _step_arrays(q0, p0, model, params, eta_full, solver)
        states[i] = np.concatenate([q1, p1], axis=-1)
    return states, weights, M, n_eta


def one_step_expectation(scheme, model, gamma, sigma, phi, base_points, deltas, gh_nodes=12):
    """E phi(q_1, p_1), exact in the noise by Gauss-Hermite quadrature.

    base_points: (M, 2d); returns (n_deltas, M). Implicit solves run at a
    tight tolerance so the only approximation for non-polynomial noise
    dependence is the quadrature itself.
    """
    states, weights, M, n_eta = _one_step_states(
        scheme, model, gamma, sigma, base_points, deltas, gh_nodes
    )
    vals = phi(states).reshape(len(deltas), M, n_eta)
    return vals @ weights


@dataclass
class ExtractionResult:
    coeffs: np.ndarray  # c_0..c_N at the base point
    cond: float
    half_power_rel: float  # largest fitted half-power coefficient, relative
    deltas: np.ndarray
    values: np.ndarray
    powers: np.ndarray


def _fit_powers(deltas, values, powers):
    deltas = np.asarray(deltas, dtype=float)
    scale = deltas.max()
    X = (deltas[:, None] / scale) ** powers[None, :]
    sol, _, _, sv = np.linalg.lstsq(X, values, rcond=None)
    cond = float(sv[0] / sv[-1]) if len(sv) and sv[-1] > 0 else math.inf
    rescale = scale**powers
    if sol.ndim > 1:
        rescale = rescale.reshape(-1, *([1] * (sol.ndim - 1)))
    return sol / rescale, cond


def one_step_weak_coefficients(
    scheme, model, gamma, sigma, phi, N, base_point, deltas=None, gh_nodes=None, guard=4
):
    """Extract c_0..c_N with E phi(q_1,p_1) = sum c_n delta^n + O(delta^(N+1)).

    Deterministic throughout: Gauss-Hermite in the noise, a geometric step
    ladder, and a guarded least-squares fit in powers of delta. The same
    data is refit with the delta^(1/2) and delta^(3/2) columns added;
    their fitted size is reported so the expected cancellation of half
    powers can be asserted.
    """
    if deltas is None:
        base = 1.0 / gamma
        deltas = np.geomspace(base / 2048.0, base / 32.0, 16)
    deltas = np.asarray(deltas, dtype=float)
    if gh_nodes is None:
        gh_nodes = max(2 * N + 2, 10)
    values = one_step_expectation(
        scheme, model, gamma, sigma, phi, np.asarray(base_point)[None, :], deltas, gh_nodes
    )[:, 0]

    powers = np.arange(0, N + guard + 1, dtype=float)
    coeffs, cond = _fit_powers(deltas, values, powers)

    half_powers = np.sort(np.concatenate([powers, [0.5, 1.5]]))
    half_coeffs, _ = _fit_powers(deltas, values, half_powers)
    scale = np.max(np.abs(coeffs)) or 1.0
    is_half = (half_powers % 1.0) != 0.0
    half_rel = float(np.max(np.abs(half_coeffs[is_half])) / scale) if is_half.any() else 0.0

    return ExtractionResult(
        coeffs=coeffs[: N + 1],
        cond=cond,
        half_power_rel=half_rel,
        deltas=deltas,
        values=values,
        powers=powers,
    )


# ---------------------------------------------------------------------- #
# A_n operator matrices


def assemble_An(scheme, model, gamma, sigma, n, degree_cap, method=None, rng_seed=7, deltas=None):
    """Matrix of A_n on the degree-capped monomial basis.

    method 'analytic' uses the exact graded expansion (the default for the
    split-step scheme); 'extracted' samples the one-step expectation at a
    point cloud and fits each basis image (the default for implicit Euler,
    whose position solve depends on the noise through the implicit
    equation). Columns carry their provenance.
    """
    if method is None:
        method = "analytic" if scheme == "split_step" else "extracted"
    d = model.d
    basis = monomial_basis(2 * d, degree_cap)
    nb = len(basis)
    index = {b: i for i, b in enumerate(basis)}
    mat = np.zeros((nb, nb))
    mass = np.zeros(nb)

    if method == "analytic":
        q1, p1 = _scheme_state_series(scheme, model, gamma, sigma, n)
        for j, b in enumerate(basis):
            img = _compose_and_average(Poly.monomial(2 * d, b), q1, p1, d, n)[n]
            kept, dropped = img.truncate(degree_cap)
            mass[j] = dropped
            for k, c in kept.coeffs.items():
                mat[index[k], j] = c
        return OperatorMatrix(
            basis=basis, matrix=mat, degree_cap=degree_cap, d=d, which=f"A{n}",
            truncation_mass=mass, provenance="analytic",
        )

    if method != "extracted":
        raise ValueError("method must be 'analytic' or 'extracted'")
    rng = np.random.default_rng(rng_seed)
    n_points = 2 * nb + 8
    points = rng.uniform(-1.4, 1.4, size=(n_points, 2 * d))
    if deltas is None:
        base = 1.0 / gamma
        deltas = np.geomspace(base / 1024.0, base / 64.0, 12)
    powers = np.arange(0, n + 5, dtype=float)
    states, weights, M, n_eta = _one_step_states(
        scheme, model, gamma, sigma, points, deltas, gh_nodes=max(2 * n + 4, 12)
    )
    design = np.stack([[math.prod(x**e for x, e in zip(pt, b)) for b in basis] for pt in points])
    for j, b in enumerate(basis):
        if j == 0:
            # E 1 = 1 identically: the constant column is the identity at
            # n = 0 and exactly zero at every higher order
            if n == 0:
                mat[0, 0] = 1.0
            continue
        phi = Poly.monomial(2 * d, b)
        values = phi(states).reshape(len(deltas), M, n_eta) @ weights
        fitted, _ = _fit_powers(deltas, values, powers)  # (n_powers, M)
        col, *_ = np.linalg.lstsq(design, fitted[n], rcond=None)
        col[np.abs(col) < 1e-9] = 0.0
        mat[:, j] = col
    return OperatorMatrix(
        basis=basis, matrix=mat, degree_cap=degree_cap, d=d, which=f"A{n}",
        truncation_mass=None, provenance="extracted",
    )


@dataclass
class OperatorSeries:
    """A_0..A_N (and, once built, L_0..L_N) at a shared degree cap."""

    scheme: str
    degree_cap: int
    A: list
    L: list = None
    provenance: list = field(default_factory=list)

    @property
    def basis(self):
        return self.A[0].basis


def build_A_series(scheme, model, gamma, sigma, n_max, degree_cap, method=None):
    """OperatorSeries with A_0 = I, A_1 = L-matrix, .., A_{n_max}."""
    d = model.d
    basis = monomial_basis(2 * d, degree_cap)
    eye = OperatorMatrix(
        basis=basis, matrix=np.eye(len(basis)), degree_cap=degree_cap, d=d,
        which="A0", truncation_mass=np.zeros(len(basis)), provenance="analytic",
    )
    A = [eye]
    for n in range(1, n_max + 1):
        A.append(assemble_An(scheme, model, gamma, sigma, n, degree_cap, method=method))
    return OperatorSeries(
        scheme=scheme, degree_cap=degree_cap, A=A,
        provenance=[a.provenance for a in A],
    )


# ---------------------------------------------------------------------- #
# Bernoulli recursion for the modified generator


def bernoulli_numbers(n_max):
    """B_0..B_n in the generating-function convention with B_1 = -1/2."""
    B = [Fraction(1)]
    for n in range(1, n_max + 1):
        s = Fraction(0)
        for k in range(n):
            s += Fraction(math.comb(n + 1, k)) * B[k]
        B.append(-s / (n + 1))
    return [float(b) for b in B]


def modified_operators(series, n_max, roundtrip_tol=1e-10):
    """Fill L_0..L_{n_max} from A_1..A_{n_max+1} by the Bernoulli recursion.

    L_n = A_{n+1} + sum_{l=1}^{n} (B_l / l!) sum_{n_1+..+n_{l+1} = n-l}
          L_{n_1} .. L_{n_l} A_{n_{l+1}+1}.

    The inverse relation A_n = sum_{l=1}^{n} (1/l!) sum_{n_1+..+n_l = n-l}
    L_{n_1} .. L_{n_l} is then evaluated and must reproduce the inputs;
    a mismatch signals a convention or assembly bug and raises.
    """
    if len(series.A) < n_max + 2:
        raise ValueError(f"need A_0..A_{n_max + 1} to build L_0..L_{n_max}")
    B = bernoulli_numbers(n_max + 1)
    A = [a.matrix for a in series.A]
    L = []
    for n in range(n_max + 1):
        acc = A[n + 1].copy()
        for ell in range(1, n + 1):
            w = B[ell] / math.factorial(ell)
            for comp in _compositions(n - ell, ell + 1):
                term = np.eye(A[0].shape[0])
                for ni in comp[:-1]:
                    term = term @ L[ni]
                term = term @ A[comp[-1] + 1]
                acc = acc + w * term
        L.append(acc)

    # hard round-trip check of the inverse relation
    for n in range(1, n_max + 2):
        if n - 1 > n_max:
            continue
        rebuilt = np.zeros_like(A[0])
        for ell in range(1, n + 1):
            w = 1.0 / math.factorial(ell)
            for comp in _compositions(n - ell, ell):
                if any(ni > n_max for ni in comp):
                    continue
                term = np.eye(A[0].shape[0])
                for ni in comp:
                    term = term @ L[ni]
                rebuilt = rebuilt + w * term
        err = float(np.max(np.abs(rebuilt - A[n])))
        scale = max(1.0, float(np.max(np.abs(A[n]))))
        if err > roundtrip_tol * scale:
            raise RuntimeError(
                f"Bernoulli round trip failed at order {n}: entrywise error {err:.3e}"
            )

    template = series.A[0]
    series.L = [
        OperatorMatrix(
            basis=template.basis, matrix=Ln, degree_cap=series.degree_cap,
            d=template.d, which=f"L{n}", truncation_mass=None,
            provenance=series.provenance[min(n + 1, len(series.provenance) - 1)],
        )
        for n, Ln in enumerate(L)
    ]
    return series


# ---------------------------------------------------------------------- #
# modified invariant measure


@dataclass
class MeasureExpansion:
    mus: list  # mu_0 = 1, mu_1, .., mu_N as Polys
    residuals: list
    means: list
    degree_cap: int

    def assembled(self, delta):
        out = self.mus[0]
        for n in range(1, len(self.mus)):
            out = out + (delta**n) * self.mus[n]
        return out


def measure_expansion(series, model, gamma, sigma, n_max, degree_cap, measure=None, rhs_tol=1e-8):
    """mu_0..mu_{n_max} from L^* mu_n = - sum_{l=1}^{n} (L_l)^* mu_{n-l}.

    The Gibbs adjoints (L_l)^* are taken in the monomial basis through the
    Gram matrix of the measure; each right-hand side must average to zero
    under rho (guaranteed by L_l 1 = 0) before the Poisson solve runs.
    """
    if series.L is None:
        raise ValueError("call modified_operators first")
    measure = measure or GibbsMeasure(model, gamma, sigma)
    d = model.d
    basis = series.basis
    gram = measure.gram_matrix(basis)
    adj = [adjoint_matrix(Lk, gram) for Lk in series.L]
    template = series.L[0]

    one = np.zeros(len(basis))
    one[0] = 1.0
    mu_coeffs = [one]
    mus = [Poly.constant(2 * d, 1.0)]
    residuals = [0.0]
    means = [1.0]
    for n in range(1, n_max + 1):
        gvec = np.zeros(len(basis))
        for ell in range(1, n + 1):
            gvec -= adj[ell] @ mu_coeffs[n - ell]
        gpoly = template.coeffs_to_poly(gvec)
        mean_g = measure.average(gpoly)
        if abs(mean_g) > rhs_tol * max(1.0, gpoly.max_abs_coeff()):
            raise IncompatibleRHS(
                f"<G_{n}>_rho = {mean_g:.3e}; upstream L_n 1 = 0 must have failed"
            )
        result = solve_poisson(
            "L_star", model, gamma, sigma, gpoly, degree_cap, measure=measure
        )
        mu_coeffs.append(result.coeffs)
        mus.append(result.mu)
        residuals.append(result.residual)
        means.append(result.mean)
    return MeasureExpansion(mus=mus, residuals=residuals, means=means, degree_cap=degree_cap)


# ---------------------------------------------------------------------- #
# modified flow


@dataclass
class ModifiedFlow:
    t_grid: np.ndarray
    coeffs: np.ndarray  # (N+1, len(t_grid), n_basis), exact block path
    duhamel_coeffs: np.ndarray  # same shape, quadrature path
    basis: list
    phi: Poly
    cross_check: float  # max coefficient gap between the two paths

    def v_n(self, n, t_index):
        return self.coeffs[n, t_index]

    def assembled(self, t_index, delta):
        out = np.zeros(self.coeffs.shape[-1])
        for n in range(self.coeffs.shape[0]):
            out = out + delta**n * self.coeffs[n, t_index]
        return out


def _duhamel_vn(L_mats, phi_vec, n, t, order, cache):
    """v_n(t) by Gauss-Legendre Duhamel quadrature, recursively."""
    key = (n, float(t))
    if key in cache:
        return cache[key]
    L = L_mats[0]
    if n == 0:
        out = scipy.linalg.expm(t * L) @ phi_vec
        cache[key] = out
        return out
    if t == 0.0:
        out = np.zeros_like(phi_vec)
        cache[key] = out
        return out
    x, w = np.polynomial.legendre.leggauss(order)
    s = 0.5 * t * (x + 1.0)
    ws = 0.5 * t * w
    out = np.zeros_like(phi_vec)
    for si, wi in zip(s, ws):
        F = np.zeros_like(phi_vec)
        for ell in range(1, n + 1):
            F = F + L_mats[ell] @ _duhamel_vn(L_mats, phi_vec, n - ell, si, order, cache)
        out = out + wi * (scipy.linalg.expm((t - si) * L) @ F)
    cache[key] = out
    return out


def modified_flow(series, phi, n_max, t_grid, quad_order=16):
    """v_0..v_{n_max} on t_grid, by two independent integrators.

    The exact path solves the block lower-triangular coefficient system
    d/dt (v_0..v_N) with one matrix exponential; the Duhamel path nests
    Gauss-Legendre quadrature through the variation-of-constants formula.
    Their maximum coefficient gap is reported as cross_check.
    """
    if series.L is None:
        raise ValueError("call modified_operators first")
    if n_max + 1 > len(series.L):
        raise ValueError("not enough L_n available")
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] != 0.0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must increase from 0")
    L_mats = [Lk.matrix for Lk in series.L]
    template = series.L[0]
    phi_vec = template.poly_to_coeffs(phi)
    nb = len(phi_vec)

    big = np.zeros(((n_max + 1) * nb, (n_max + 1) * nb))
    for row in range(n_max + 1):
        for col in range(row + 1):
            big[row * nb : (row + 1) * nb, col * nb : (col + 1) * nb] = L_mats[row - col]
    v0 = np.zeros((n_max + 1) * nb)
    v0[:nb] = phi_vec

    coeffs = np.zeros((n_max + 1, len(t_grid), nb))
    for it, t in enumerate(t_grid):
        sol = scipy.linalg.expm(t * big) @ v0
        for n in range(n_max + 1):
            coeffs[n, it] = sol[n * nb : (n + 1) * nb]

    cache = {}
    duhamel = np.zeros_like(coeffs)
    for it, t in enumerate(t_grid):
        for n in range(n_max + 1):
            duhamel[n, it] = _duhamel_vn(L_mats, phi_vec, n, float(t), quad_order, cache)

    gap = float(np.max(np.abs(coeffs - duhamel)))
    return ModifiedFlow(
        t_grid=t_grid,
        coeffs=coeffs,
        duhamel_coeffs=duhamel,
        basis=series.basis,
        phi=phi,
        cross_check=gap,
    )
