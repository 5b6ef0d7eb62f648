"""Confining potentials, derivative oracles, and grid audits of the
standing structural assumptions (semi-convexity, dissipativity, quadratic
lower bounds).

Audits are grid-based certificates over a user-chosen box, not proofs:
they report the tightest constants observed on the grid and flag the
inequalities that hold there.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .polynomials import Poly

__all__ = [
    "PotentialModel",
    "PotentialAudit",
    "AuditError",
    "quadratic",
    "quartic",
    "double_well",
    "make_potential",
    "POTENTIAL_LIBRARY",
    "audit_assumptions",
    "semiconvexity_constant",
    "grid_points",
]


class AuditError(RuntimeError):
    """Raised when an audit cannot be carried out (e.g. non-finite values)."""


class PotentialModel:
    """Potential V on R^d with analytic derivatives up to `k_max`.

    Either wraps a sparse polynomial (exact derivatives of any order) or a
    set of user callables for (value, gradient, Hessian). All callables are
    vectorized over a leading batch shape: value maps (..., d) -> (...),
    grad maps (..., d) -> (..., d), hess maps (..., d) -> (..., d, d).
    """

    def __init__(self, d, value, grad, hess, poly=None, higher=None, k_max=6, name="custom"):
        self.d = int(d)
        self.name = name
        self.k_max = int(k_max)
        self.poly = poly
        self._value = value
        self._grad = grad
        self._hess = hess
        self._higher = higher
        self._deriv_cache = {}

    # ------------------------------------------------------------------ #
    @classmethod
    def from_poly(cls, poly, name="poly", k_max=6):
        """Build a model from a Poly in the q variables (nvars == d)."""
        d = poly.nvars
        grad_polys = [poly.diff(i) for i in range(d)]
        hess_polys = [[grad_polys[i].diff(j) for j in range(d)] for i in range(d)]

        def value(q):
            return poly(q)

        def grad(q):
            q = np.asarray(q, dtype=float)
            return np.stack([g(q) for g in grad_polys], axis=-1)

        def hess(q):
            q = np.asarray(q, dtype=float)
            rows = [np.stack([h(q) for h in row], axis=-1) for row in hess_polys]
            return np.stack(rows, axis=-2)

        return cls(d, value, grad, hess, poly=poly, k_max=k_max, name=name)

    @classmethod
    def from_callables(cls, d, value, grad, hess, higher=None, k_max=2, name="custom"):
        return cls(d, value, grad, hess, higher=higher, k_max=k_max, name=name)

    # ------------------------------------------------------------------ #
    def value(self, q):
        return np.asarray(self._value(np.asarray(q, dtype=float)))

    def grad(self, q):
        return np.asarray(self._grad(np.asarray(q, dtype=float)))

    def hess(self, q):
        return np.asarray(self._hess(np.asarray(q, dtype=float)))

    def _deriv_polys(self, order):
        """Polynomials for the order-th derivative tensor (polynomial V only)."""
        if self.poly is None:
            raise AuditError(f"potential {self.name!r} has no polynomial form")
        if order not in self._deriv_cache:
            tensors = {(): self.poly}
            for _ in range(order):
                tensors = {
                    idx + (i,): p.diff(i)
                    for idx, p in tensors.items()
                    for i in range(self.d)
                }
            self._deriv_cache[order] = tensors
        return self._deriv_cache[order]

    def deriv_apply(self, order, q, vecs):
        """Contract the order-th derivative tensor of V with order-1 vectors.

        Returns the vector  T_{i j1..j_{order-1}} v1_{j1} ... v_{order-1},
        batched over the leading shape of q. Requires order <= k_max for
        polynomial models; callable models may supply a `higher` oracle with
        the same signature.
        """
        q = np.asarray(q, dtype=float)
        if order == 1 and not vecs:
            return self.grad(q)
        if self.poly is None:
            if self._higher is None:
                raise AuditError(
                    f"potential {self.name!r} has no derivative oracle of order {order}"
                )
            return self._higher(order, q, vecs)
        if order > self.k_max:
            raise AuditError(f"derivative order {order} exceeds k_max={self.k_max}")
        if len(vecs) != order - 1:
            raise ValueError("need order-1 contraction vectors")
        tensors = self._deriv_polys(order)
        out = np.zeros(q.shape)
        for idx, p in tensors.items():
            if p.is_zero():
                continue
            term = p(q)
            for v, j in zip(vecs, idx[1:]):
                term = term * np.asarray(v)[..., j]
            out[..., idx[0]] += term
        return out

    def deriv_apply_poly(self, order, vecs):
        """Symbolic version of deriv_apply: vecs are lists of Polys (length d).

        Returns a list of d Polys over the vecs' variable set.
        """
        tensors = self._deriv_polys(order)
        nv = vecs[0][0].nvars if vecs else 2 * self.d
        out = [Poly.zero(nv) for _ in range(self.d)]
        for idx, p in tensors.items():
            if p.is_zero():
                continue
            # embed the q-only polynomial into the target variable set
            term = Poly(nv, {k + (0,) * (nv - self.d): c for k, c in p.coeffs.items()})
            for v, j in zip(vecs, idx[1:]):
                term = term * v[j]
            out[idx[0]] = out[idx[0]] + term
        return out


# ---------------------------------------------------------------------- #
# shipped potential library


def quadratic(d=1):
    """V(q) = |q|^2 / 2, the exactly solvable case."""
    p = Poly.zero(d)
    for i in range(d):
        p = p + Poly.monomial(d, tuple(2 if j == i else 0 for j in range(d)), 0.5)
    return PotentialModel.from_poly(p, name="quadratic")


def quartic(d=1):
    """V(q) = sum_i q_i^4 + q_i^2, convex and non-globally-Lipschitz."""
    p = Poly.zero(d)
    for i in range(d):
        e4 = tuple(4 if j == i else 0 for j in range(d))
        e2 = tuple(2 if j == i else 0 for j in range(d))
        p = p + Poly.monomial(d, e4, 1.0) + Poly.monomial(d, e2, 1.0)
    return PotentialModel.from_poly(p, name="quartic")


def double_well(d=1):
    """V(q) = sum_i (q_i^2 - 1/2)^2: the q^4 - q^2 wells shifted to be >= 0.

    The +1/4 shift per coordinate leaves all forces unchanged while keeping
    V nonnegative, so the coercivity bound on the Lyapunov function holds
    exactly for this shipped model.
    """
    p = Poly.zero(d)
    for i in range(d):
        e4 = tuple(4 if j == i else 0 for j in range(d))
        e2 = tuple(2 if j == i else 0 for j in range(d))
        e0 = (0,) * d
        p = (
            p
            + Poly.monomial(d, e4, 1.0)
            + Poly.monomial(d, e2, -1.0)
            + Poly.monomial(d, e0, 0.25)
        )
    return PotentialModel.from_poly(p, name="double_well")


POTENTIAL_LIBRARY = {
    "quadratic": quadratic,
    "quartic": quartic,
    "double_well": double_well,
}


def make_potential(name, d=1, params=None):
    """Look up a shipped potential by name, or build a custom polynomial one.

    name == "custom" expects params["terms"] as a list of (multi-index,
    coefficient) pairs; the multi-index length fixes d.
    """
    params = params or {}
    if name == "custom":
        terms = params["terms"]
        d = len(terms[0][0])
        p = Poly(d, {tuple(int(e) for e in k): float(c) for k, c in terms})
        return PotentialModel.from_poly(p, name="custom")
    if name not in POTENTIAL_LIBRARY:
        raise ValueError(f"unknown potential {name!r}; choose from {sorted(POTENTIAL_LIBRARY)} or 'custom'")
    return POTENTIAL_LIBRARY[name](d=d)


# ---------------------------------------------------------------------- #
# grid audits


@dataclass
class PotentialAudit:
    """Tightest assumption constants observed on an audit grid.

    kappa is the slack constant of the B-2 inequality, kappa_diss the one
    of the dissipativity inequality; (kappa1, kappa2) are the quadratic
    lower-bound constants in the relaxed form V >= kappa1 |q|^2 - kappa2.
    """

    theta: float
    beta_b2: float
    kappa: float
    beta1: float
    kappa_diss: float
    kappa1: float
    kappa2: float
    strict_b4: bool
    passes: dict = field(default_factory=dict)
    box: tuple = ()
    resolution: int = 0
    gamma: float = 0.0

    @property
    def all_pass(self):
        return all(self.passes.values())


def grid_points(box, resolution):
    """Tensor grid over an axis-aligned box [(lo, hi), ...] -> (N, d)."""
    if resolution < 3:
        raise ValueError("resolution must be >= 3")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _refine_minimum(fn, pts, vals, box, n_starts=5):
    """Polish the grid minimum of a smooth function with bounded local descent.

    Grid extrema can sit between nodes; descending from the best few nodes
    makes reported constants stable under grid refinement (the audit's
    contract) instead of drifting with the node spacing.
    """
    import scipy.optimize

    order = np.argsort(vals)
    best = float(vals[order[0]])
    bounds = list(box)
    seen = []
    for idx in order[: 4 * n_starts]:
        x0 = pts[idx]
        if any(np.linalg.norm(x0 - s) < 1e-8 for s in seen):
            continue
        seen.append(x0)
        if len(seen) > n_starts:
            break
        res = scipy.optimize.minimize(
            fn, x0, method="L-BFGS-B", bounds=bounds,
            options={"ftol": 1e-16, "gtol": 1e-12, "maxiter": 200},
        )
        if res.success or np.isfinite(res.fun):
            best = min(best, float(res.fun))
    return best


def semiconvexity_constant(model, box, resolution):
    """theta = max(0, -inf of the smallest Hessian eigenvalue over the box).

    The grid minimum is polished by bounded local descent so the constant
    is monotone in the box and stable under refinement.
    """
    pts = grid_points(box, resolution)
    H = model.hess(pts)
    if not np.all(np.isfinite(H)):
        bad = pts[~np.all(np.isfinite(H.reshape(len(pts), -1)), axis=1)][0]
        raise AuditError(f"non-finite Hessian at grid node {bad}")
    if model.d == 1:
        vals = H[..., 0, 0]

        def lam_min(q):
            q = np.asarray(q, dtype=float).reshape(1, -1)
            return float(model.hess(q)[0, 0, 0])

    else:
        vals = np.linalg.eigvalsh(H)[..., 0]

        def lam_min(q):
            q = np.asarray(q, dtype=float).reshape(1, -1)
            return float(np.linalg.eigvalsh(model.hess(q))[0, 0])

    refined = _refine_minimum(lam_min, pts, vals, box)
    return float(max(0.0, -refined))


def audit_assumptions(model, box, resolution, gamma, candidate_beta, candidate_kappa1=1.0):
    """Audit the standing assumptions on a grid and report tightest constants.

    This is a necessary-condition check: constants certified on the grid
    only. candidate_beta must lie in (0, 1). The relaxed quadratic lower
    bound is used whenever the strict one (kappa2 = 0) fails, with
    candidate_kappa1 as its coefficient.
    """
    if not 0.0 < candidate_beta < 1.0:
        raise ValueError("candidate_beta must be in (0, 1)")
    pts = grid_points(box, resolution)
    V = model.value(pts)
    if not np.all(np.isfinite(V)):
        bad = pts[~np.isfinite(V)][0]
        raise AuditError(f"non-finite potential value at grid node {bad}")
    G = model.grad(pts)
    if not np.all(np.isfinite(G)):
        bad = pts[~np.all(np.isfinite(G), axis=-1)][0]
        raise AuditError(f"non-finite gradient at grid node {bad}")

    theta = semiconvexity_constant(model, box, resolution)

    qdotg = np.einsum("...i,...i->...", pts, G)
    q2 = np.einsum("...i,...i->...", pts, pts)

    # B-2:  (1/2) <grad V, q>  >=  beta V + gamma^2 beta(2-beta)/(8(1-beta)) |q|^2 - kappa
    # The additive constant is certified by polished maximization of the
    # violation, so it keeps holding when the grid is refined.
    b = candidate_beta
    c_b2 = gamma**2 * b * (2.0 - b) / (8.0 * (1.0 - b))

    def b2_residual_at(q):
        q = np.asarray(q, dtype=float).reshape(1, -1)
        val = (
            0.5 * np.einsum("...i,...i->...", q, model.grad(q))
            - b * model.value(q)
            - c_b2 * np.einsum("...i,...i->...", q, q)
        )
        return float(val[0])

    b2_residual = 0.5 * qdotg - b * V - c_b2 * q2
    kappa = float(max(0.0, -_refine_minimum(b2_residual_at, pts, b2_residual, box)))
    pass_b2 = math.isfinite(kappa)

    # dissipativity:  <q, grad V>  >=  beta1 |q|^2 - kappa_diss
    # beta1 read off the outer shell of the box (where quadratic growth
    # dominates); the additive constant again certified by maximization.
    r = np.sqrt(q2)
    shell = r >= 0.5 * r.max()
    ratios = qdotg[shell] / q2[shell]
    beta1 = float(ratios.min())
    pass_diss = beta1 > 0.0
    if pass_diss:

        def diss_residual_at(q):
            q = np.asarray(q, dtype=float).reshape(1, -1)
            val = (
                np.einsum("...i,...i->...", q, model.grad(q))
                - beta1 * np.einsum("...i,...i->...", q, q)
            )
            return float(val[0])

        kappa_diss = float(
            max(0.0, -_refine_minimum(diss_residual_at, pts, qdotg - beta1 * q2, box))
        )
    else:
        kappa_diss = math.inf

    # quadratic lower bound V >= kappa1 |q|^2 - kappa2. The coefficient comes
    # from the infimum of V/|q|^2 (including its q -> 0 limit through the
    # Hessian when V(0) = 0); when that infimum is not meaningfully positive
    # the relaxed form with the candidate coefficient is certified instead.
    nonzero = q2 > 1e-12
    vratio_vals = np.where(nonzero, V / np.where(nonzero, q2, 1.0), np.inf)

    def vratio(q):
        q = np.asarray(q, dtype=float).reshape(1, -1)
        qq = float(np.einsum("...i,...i->...", q, q)[0])
        if qq < 1e-10:
            return 1e30  # large finite sentinel keeps the optimizer smooth
        return float(model.value(q)[0]) / qq

    ratio_inf = _refine_minimum(vratio, pts, vratio_vals, box)
    if abs(float(model.value(np.zeros(model.d)))) < 1e-12:
        h0 = model.hess(np.zeros(model.d))
        lam0 = float(h0[0, 0]) if model.d == 1 else float(np.linalg.eigvalsh(h0)[0])
        ratio_inf = min(ratio_inf, 0.5 * lam0)
    strict_b4 = bool(ratio_inf > 1e-6) and bool(V.min() >= 0.0)
    kappa1 = float(ratio_inf) if strict_b4 else float(candidate_kappa1)

    def b4_residual_at(q):
        q = np.asarray(q, dtype=float).reshape(1, -1)
        val = model.value(q) - kappa1 * np.einsum("...i,...i->...", q, q)
        return float(val[0])

    kappa2 = float(max(0.0, -_refine_minimum(b4_residual_at, pts, V - kappa1 * q2, box)))
    if strict_b4 and kappa2 > 1e-9:
        strict_b4 = False
    pass_b4 = True

    passes = {
        "B1_semiconvex": True,  # theta reported; finite by construction
        "B2": pass_b2,
        "B3_polynomial_growth": np.all(np.isfinite(V)) and np.all(np.isfinite(G)),
        "B4_quadratic_lower": pass_b4,
        "dissipativity": pass_diss,
    }
    return PotentialAudit(
        theta=theta,
        beta_b2=float(candidate_beta),
        kappa=kappa,
        beta1=beta1,
        kappa_diss=kappa_diss,
        kappa1=kappa1,
        kappa2=kappa2,
        strict_b4=strict_b4,
        passes=passes,
        box=tuple(tuple(map(float, ab)) for ab in box),
        resolution=int(resolution),
        gamma=float(gamma),
    )
