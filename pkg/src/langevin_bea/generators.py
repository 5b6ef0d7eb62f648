"""Exact polynomial calculus for the Kolmogorov operator of the Langevin
dynamics: the generator L, its flat adjoint, its Gibbs-adjoint via the
momentum-flip identity, Galerkin matrices on monomial bases, the matrix
exponential semigroup, Gibbs averages by quadrature, and the Poisson
solver on the mean-zero subspace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.integrate
import scipy.linalg

from .polynomials import Poly, monomial_basis

__all__ = [
    "apply_operator",
    "product_rule_defect",
    "OperatorMatrix",
    "build_operator_matrix",
    "flip_matrix",
    "adjoint_matrix",
    "SemigroupResult",
    "semigroup_apply",
    "GibbsMeasure",
    "QuadratureError",
    "IncompatibleRHS",
    "PoissonResult",
    "solve_poisson",
]


class QuadratureError(RuntimeError):
    """Quadrature failed to reach the requested tolerance."""


class IncompatibleRHS(ValueError):
    """Poisson right-hand side has a nonzero Gibbs average."""


def _embed_q_poly(poly_q, d):
    """Lift a Poly over q (nvars=d) into phase space (nvars=2d)."""
    return Poly(2 * d, {k + (0,) * d: c for k, c in poly_q.coeffs.items()})


def _require_poly_model(model):
    if model.poly is None:
        raise ValueError(
            f"operator calculus needs a polynomial potential; {model.name!r} has none"
        )


def apply_operator(which, model, phi, gamma, sigma):
    """Apply L, L^T (flat adjoint) or L^* (Gibbs adjoint) to a Poly.

    L phi = <p, d_q phi> - <grad V + gamma p, d_p phi> + (sigma^2/2) Lap_p phi.
    L^T adds the sign flips of the flat adjoint plus the d*gamma*phi term.
    L^* is evaluated through the momentum-flip identity: flip p in phi,
    apply L, flip back.
    """
    _require_poly_model(model)
    d = model.d
    if phi.nvars != 2 * d:
        raise ValueError("phi must be a phase-space polynomial (nvars = 2d)")
    if which == "L_star":
        return apply_operator("L", model, phi.flip_momentum(d), gamma, sigma).flip_momentum(d)
    grad_v = [_embed_q_poly(model.poly.diff(i), d) for i in range(d)]
    out = Poly.zero(2 * d)
    for i in range(d):
        q_i, p_i = i, d + i
        dq = phi.diff(q_i)
        dp = phi.diff(p_i)
        pvar = Poly.variable(2 * d, p_i)
        if which == "L":
            out = out + pvar * dq - (grad_v[i] + gamma * pvar) * dp
        elif which == "L_transpose":
            out = out - pvar * dq + grad_v[i] * dp + gamma * pvar * dp
        else:
            raise ValueError("which must be 'L', 'L_transpose' or 'L_star'")
        out = out + 0.5 * sigma**2 * dp.diff(p_i)
    if which == "L_transpose":
        out = out + d * gamma * phi
    return out


def product_rule_defect(model, phi, psi, gamma, sigma):
    """L(phi psi) - psi L phi - phi L psi - sigma^2 <d_p phi, d_p psi>.

    Identically the zero polynomial; returned so tests can assert it.
    """
    d = model.d
    lhs = apply_operator("L", model, phi * psi, gamma, sigma)
    rhs = psi * apply_operator("L", model, phi, gamma, sigma)
    rhs = rhs + phi * apply_operator("L", model, psi, gamma, sigma)
    cross = Poly.zero(2 * d)
    for i in range(d):
        cross = cross + phi.diff(d + i) * psi.diff(d + i)
    return lhs - rhs - sigma**2 * cross


@dataclass
class OperatorMatrix:
    """A linear operator in the ordered monomial basis of degree <= degree_cap.

    Column j holds the coefficients of the operator applied to basis
    element j, truncated back to the basis; the l1 mass of the dropped
    coefficients is recorded per column. exact_on_basis is True iff no
    column lost anything (e.g. L with a quadratic potential).
    """

    basis: list
    matrix: np.ndarray
    degree_cap: int
    d: int
    which: str = ""
    truncation_mass: np.ndarray | None = None
    provenance: str = "analytic"

    def __post_init__(self):
        self.index = {b: i for i, b in enumerate(self.basis)}

    @property
    def exact_on_basis(self):
        return self.truncation_mass is None or float(np.max(self.truncation_mass)) == 0.0

    @property
    def size(self):
        return len(self.basis)

    def poly_to_coeffs(self, poly):
        out = np.zeros(len(self.basis))
        for k, c in poly.coeffs.items():
            if k not in self.index:
                raise ValueError(f"monomial {k} exceeds degree cap {self.degree_cap}")
            out[self.index[k]] = c
        return out

    def coeffs_to_poly(self, coeffs):
        return Poly(2 * self.d, {b: c for b, c in zip(self.basis, coeffs) if c != 0.0})

    def apply_poly(self, poly):
        return self.coeffs_to_poly(self.matrix @ self.poly_to_coeffs(poly))


def build_operator_matrix(which, model, gamma, sigma, degree_cap):
    """Assemble the Galerkin matrix of L / L^T / L^* column by column."""
    _require_poly_model(model)
    d = model.d
    basis = monomial_basis(2 * d, degree_cap)
    n = len(basis)
    mat = np.zeros((n, n))
    mass = np.zeros(n)
    index = {b: i for i, b in enumerate(basis)}
    for j, b in enumerate(basis):
        img = apply_operator(which, model, Poly.monomial(2 * d, b), gamma, sigma)
        kept, dropped = img.truncate(degree_cap)
        mass[j] = dropped
        for k, c in kept.coeffs.items():
            mat[index[k], j] = c
    return OperatorMatrix(
        basis=basis,
        matrix=mat,
        degree_cap=degree_cap,
        d=d,
        which=which,
        truncation_mass=mass,
    )


def flip_matrix(basis, d):
    """Matrix of the basis involution p -> -p (diagonal of +/-1)."""
    signs = np.array([(-1.0) ** sum(b[d:]) for b in basis])
    return np.diag(signs)


def adjoint_matrix(opmat, gram):
    """Gibbs-adjoint matrix: G^{-1} M^T G in the same monomial basis.

    Exact when the operator maps the basis span into itself; otherwise a
    degree-capped approximation like the matrix it derives from.
    """
    return np.linalg.solve(gram, opmat.matrix.T @ gram)


@dataclass
class SemigroupResult:
    coeffs: np.ndarray
    t: float
    exact: bool  # True when the operator matrix is exact on the basis


def semigroup_apply(opmat, t, phi_coeffs):
    """Coefficients of exp(t * op) phi via scaling-and-squaring expm."""
    if t < 0:
        raise ValueError("t must be >= 0")
    phi_coeffs = np.asarray(phi_coeffs, dtype=float)
    if t == 0.0:
        return SemigroupResult(phi_coeffs.copy(), 0.0, opmat.exact_on_basis)
    out = scipy.linalg.expm(t * opmat.matrix) @ phi_coeffs
    return SemigroupResult(out, float(t), opmat.exact_on_basis)


# ---------------------------------------------------------------------- #
# Gibbs measure and quadrature


def _gaussian_moment(order, variance):
    """E X^order for X ~ N(0, variance)."""
    if order % 2:
        return 0.0
    m = order // 2
    return float(math.prod(range(1, order, 2))) * variance**m if order else 1.0


class GibbsMeasure:
    """The invariant law rho ~ exp(-(2 gamma / sigma^2) H), H = |p|^2/2 + V.

    The p-marginal is the centered Gaussian with variance sigma^2/(2 gamma)
    per coordinate, integrated exactly (Gauss-Hermite exactness). The
    q-marginal uses exact Gaussian moments when V is quadratic per
    coordinate and adaptive quadrature otherwise; a separable V factorizes
    into per-coordinate 1D integrals. Non-separable potentials fall back to
    nested adaptive quadrature (d <= 2).
    """

    def __init__(self, model, gamma, sigma, quad_tol=1e-12):
        _require_poly_model(model)
        self.model = model
        self.gamma = float(gamma)
        self.sigma = float(sigma)
        self.beta_temp = 2.0 * gamma / sigma**2
        self.quad_tol = quad_tol
        self.p_variance = sigma**2 / (2.0 * gamma)
        self.d = model.d
        self._q_moment_cache = {}
        self.quad_trace = []

        # split V into per-coordinate parts when possible
        self._coord_polys = None
        self._separable = all(
            sum(1 for e in k if e) <= 1 for k in model.poly.coeffs
        )
        if self._separable:
            parts = [dict() for _ in range(self.d)]
            for k, c in model.poly.coeffs.items():
                nz = [i for i, e in enumerate(k) if e]
                target = nz[0] if nz else 0
                key = (k[target],)
                parts[target][key] = parts[target].get(key, 0.0) + c
            self._coord_polys = [Poly(1, p) for p in parts]

    # -------------------------------------------------------------- #
    def _quad_1d(self, integrand, tag):
        val, err = scipy.integrate.quad(
            integrand, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400
        )
        self.quad_trace.append((tag, val, err))
        if err > max(self.quad_tol, self.quad_tol * abs(val)) * 100:
            raise QuadratureError(f"1d quadrature for {tag} only reached abserr {err:.2e}")
        return val

    @lru_cache(maxsize=None)
    def _coord_moment(self, coord, order):
        """Normalized moment int q^order w_coord(q) dq / int w_coord(q) dq."""
        v = self._coord_polys[coord]
        # pure c*q^2 weight: exact Gaussian moments
        terms = {k: c for k, c in v.coeffs.items() if k != (0,)}
        if set(terms) == {(2,)} and terms[(2,)] > 0:
            variance = 1.0 / (2.0 * self.beta_temp * terms[(2,)])
            return _gaussian_moment(order, variance)
        beta = self.beta_temp

        def weight(x):
            return math.exp(-beta * (v((x,)) - v((0.0,))))

        z = self._quad_1d(weight, f"Zq{coord}")
        if order == 0:
            return 1.0
        raw = self._quad_1d(lambda x: x**order * weight(x), f"q{coord}^{order}")
        return raw / z

    def _q_moment(self, alpha):
        """Normalized Gibbs moment of prod q_i^alpha_i."""
        alpha = tuple(alpha)
        if alpha in self._q_moment_cache:
            return self._q_moment_cache[alpha]
        if self._separable:
            val = 1.0
            for i, a in enumerate(alpha):
                val *= self._coord_moment(i, a)
        else:
            if self.d > 2:
                raise QuadratureError("non-separable quadrature implemented for d <= 2 only")
            beta = self.beta_temp
            v = self.model.poly
            v0 = v(np.zeros(self.d))

            def f(y, x, powx, powy):
                return x**powx * y**powy * math.exp(-beta * (v((x, y)) - v0))

            z, errz = scipy.integrate.dblquad(
                f, -np.inf, np.inf, -np.inf, np.inf, args=(0, 0), epsabs=1e-12
            )
            raw, err = scipy.integrate.dblquad(
                f, -np.inf, np.inf, -np.inf, np.inf, args=(alpha[0], alpha[1]), epsabs=1e-12
            )
            self.quad_trace.append((f"q^{alpha}", raw, err + errz))
            val = raw / z
        self._q_moment_cache[alpha] = val
        return val

    def average(self, phi):
        """int phi d rho for a phase-space Poly, by tensorized moments."""
        if phi.nvars != 2 * self.d:
            raise ValueError("phi must be a phase-space polynomial")
        total = 0.0
        for k, c in phi.coeffs.items():
            qpart = self._q_moment(k[: self.d])
            ppart = 1.0
            for e in k[self.d :]:
                ppart *= _gaussian_moment(e, self.p_variance)
            total += c * qpart * ppart
        return total

    def partition_constant(self):
        """Z = int exp(-beta H); informational (averages are normalized)."""
        zp = (2.0 * math.pi * self.p_variance) ** (self.d / 2.0)
        beta = self.beta_temp
        zq = 1.0
        if self._separable:
            for i in range(self.d):
                v = self._coord_polys[i]
                terms = {k: c for k, c in v.coeffs.items() if k != (0,)}
                if set(terms) == {(2,)} and terms[(2,)] > 0:
                    zq *= math.sqrt(math.pi / (beta * terms[(2,)]))
                else:
                    zq *= self._quad_1d(lambda x, v=v: math.exp(-beta * v((x,))), f"Z{i}")
        else:
            v = self.model.poly
            zq, _ = scipy.integrate.dblquad(
                lambda y, x: math.exp(-beta * v((x, y))), -np.inf, np.inf, -np.inf, np.inf
            )
        return zq * zp

    def gram_matrix(self, basis):
        """Gram matrix <b_i b_j>_rho over a monomial basis."""
        n = len(basis)
        G = np.empty((n, n))
        for i, bi in enumerate(basis):
            for j in range(i, n):
                k = tuple(a + b for a, b in zip(bi, basis[j]))
                qpart = self._q_moment(k[: self.d])
                ppart = 1.0
                for e in k[self.d :]:
                    ppart *= _gaussian_moment(e, self.p_variance)
                G[i, j] = G[j, i] = qpart * ppart
        return G


def rho_average(measure, phi):
    """Module-level alias for GibbsMeasure.average."""
    return measure.average(phi)


# ---------------------------------------------------------------------- #
# Poisson solver


@dataclass
class PoissonResult:
    mu: Poly
    residual: float
    rank_deficient: bool
    mean: float
    coeffs: np.ndarray = field(repr=False, default=None)


def solve_poisson(which, model, gamma, sigma, g, degree_cap, measure=None, rhs_tol=1e-8):
    """Solve op(mu) = g with <mu>_rho = 0 on the degree-capped subspace.

    which must be 'L' or 'L_star' (both annihilate constants, so the
    constant direction is fixed by the mean-zero condition alone). The
    least-squares residual is surfaced; rank deficiency of the truncated
    Galerkin matrix falls back to the minimum-norm solution.
    """
    if which not in ("L", "L_star"):
        raise ValueError("Poisson solve supports which in {'L', 'L_star'}")
    measure = measure or GibbsMeasure(model, gamma, sigma)
    mean_g = measure.average(g)
    scale_g = max(1.0, g.max_abs_coeff())
    if abs(mean_g) > rhs_tol * scale_g:
        raise IncompatibleRHS(f"<g>_rho = {mean_g:.3e} is not zero within tolerance")

    opmat = build_operator_matrix(which, model, gamma, sigma, degree_cap)
    gvec = opmat.poly_to_coeffs(g)
    # unknowns: non-constant basis coefficients (column 0 is identically zero)
    A = opmat.matrix[:, 1:]
    x, _, rank, _ = np.linalg.lstsq(A, gvec, rcond=None)
    coeffs = np.concatenate([[0.0], x])
    # enforce the mean-zero normalization through the constant coefficient
    mu = opmat.coeffs_to_poly(coeffs)
    coeffs[0] = -measure.average(mu)
    mu = opmat.coeffs_to_poly(coeffs)
    residual = float(np.linalg.norm(opmat.matrix @ coeffs - gvec))
    rank_deficient = rank < A.shape[1]
    return PoissonResult(
        mu=mu,
        residual=residual,
        rank_deficient=bool(rank_deficient),
        mean=measure.average(mu),
        coeffs=coeffs,
    )
