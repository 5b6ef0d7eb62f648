"""Sparse multivariate polynomials with exact coefficient arithmetic.

Phase-space polynomials over (q, p) in R^d x R^d use the variable
convention: indices 0..d-1 are q_1..q_d, indices d..2d-1 are p_1..p_d.
Potentials use polynomials in the q variables only (nvars = d).
"""

from __future__ import annotations

import itertools
import re

import numpy as np

__all__ = [
    "Poly",
    "monomial_basis",
    "parse_poly",
    "format_poly",
]


class Poly:
    """Sparse polynomial: mapping from exponent tuples to float coefficients.

    Exact zero coefficients are never stored. Arithmetic (+, -, *, **) and
    differentiation are exact up to floating point rounding.
    """

    __slots__ = ("nvars", "coeffs")

    def __init__(self, nvars, coeffs=None):
        self.nvars = int(nvars)
        self.coeffs = {}
        if coeffs:
            for expt, c in coeffs.items():
                if c != 0.0:
                    key = tuple(int(e) for e in expt)
                    if len(key) != self.nvars:
                        raise ValueError(
                            f"exponent tuple {key} has wrong length for nvars={self.nvars}"
                        )
                    self.coeffs[key] = self.coeffs.get(key, 0.0) + float(c)
            # re-prune in case duplicate keys cancelled
            self.coeffs = {k: v for k, v in self.coeffs.items() if v != 0.0}

    # ------------------------------------------------------------------ #
    # constructors

    @classmethod
    def zero(cls, nvars):
        return cls(nvars)

    @classmethod
    def constant(cls, nvars, value):
        return cls(nvars, {(0,) * nvars: float(value)})

    @classmethod
    def variable(cls, nvars, index):
        expt = [0] * nvars
        expt[index] = 1
        return cls(nvars, {tuple(expt): 1.0})

    @classmethod
    def monomial(cls, nvars, expt, coeff=1.0):
        return cls(nvars, {tuple(expt): float(coeff)})

    # ------------------------------------------------------------------ #
    # basic queries

    @property
    def degree(self):
        """Total degree; the zero polynomial reports degree 0."""
        if not self.coeffs:
            return 0
        return max(sum(k) for k in self.coeffs)

    def is_zero(self):
        return not self.coeffs

    def max_abs_coeff(self):
        if not self.coeffs:
            return 0.0
        return max(abs(c) for c in self.coeffs.values())

    def coefficient(self, expt):
        return self.coeffs.get(tuple(expt), 0.0)

    # ------------------------------------------------------------------ #
    # arithmetic

    def _check_compat(self, other):
        if self.nvars != other.nvars:
            raise ValueError("polynomials over different variable sets")

    def __add__(self, other):
        if np.isscalar(other):
            other = Poly.constant(self.nvars, other)
        self._check_compat(other)
        out = dict(self.coeffs)
        for k, c in other.coeffs.items():
            s = out.get(k, 0.0) + c
            if s == 0.0:
                out.pop(k, None)
            else:
                out[k] = s
        return Poly(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return Poly(self.nvars, {k: -c for k, c in self.coeffs.items()})

    def __sub__(self, other):
        if np.isscalar(other):
            other = Poly.constant(self.nvars, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if np.isscalar(other):
            c = float(other)
            if c == 0.0:
                return Poly.zero(self.nvars)
            return Poly(self.nvars, {k: c * v for k, v in self.coeffs.items()})
        self._check_compat(other)
        out = {}
        for k1, c1 in self.coeffs.items():
            for k2, c2 in other.coeffs.items():
                k = tuple(a + b for a, b in zip(k1, k2))
                out[k] = out.get(k, 0.0) + c1 * c2
        return Poly(self.nvars, out)

    __rmul__ = __mul__

    def __pow__(self, n):
        if n < 0 or n != int(n):
            raise ValueError("only nonnegative integer powers")
        result = Poly.constant(self.nvars, 1.0)
        base = self
        n = int(n)
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    def diff(self, var):
        out = {}
        for k, c in self.coeffs.items():
            e = k[var]
            if e == 0:
                continue
            kk = list(k)
            kk[var] = e - 1
            out[tuple(kk)] = c * e
        return Poly(self.nvars, out)

    # ------------------------------------------------------------------ #
    # evaluation and substitution

    def __call__(self, points):
        """Evaluate at points of shape (..., nvars); returns shape (...)."""
        pts = np.asarray(points, dtype=float)
        if pts.shape[-1] != self.nvars:
            raise ValueError(f"points must have last axis {self.nvars}")
        out = np.zeros(pts.shape[:-1])
        for k, c in self.coeffs.items():
            term = np.full(pts.shape[:-1], c)
            for i, e in enumerate(k):
                if e:
                    term = term * pts[..., i] ** e
            out = out + term
        return out

    def subs(self, replacements):
        """Substitute each variable by a polynomial (list of length nvars).

        All replacement polynomials must share a common nvars, which becomes
        the nvars of the result.
        """
        if len(replacements) != self.nvars:
            raise ValueError("need one replacement per variable")
        nv = replacements[0].nvars
        out = Poly.zero(nv)
        # cache powers of replacements
        pow_cache = [{0: Poly.constant(nv, 1.0)} for _ in replacements]

        def p_pow(i, e):
            cache = pow_cache[i]
            if e not in cache:
                cache[e] = p_pow(i, e - 1) * replacements[i]
            return cache[e]

        for k, c in self.coeffs.items():
            term = Poly.constant(nv, c)
            for i, e in enumerate(k):
                if e:
                    term = term * p_pow(i, e)
            out = out + term
        return out

    def flip_momentum(self, d):
        """Apply p -> -p for a phase-space polynomial with nvars = 2d."""
        if self.nvars != 2 * d:
            raise ValueError("flip_momentum needs nvars == 2*d")
        out = {}
        for k, c in self.coeffs.items():
            sign = -1.0 if sum(k[d:]) % 2 else 1.0
            out[k] = sign * c
        return Poly(self.nvars, out)

    # ------------------------------------------------------------------ #
    # truncation / comparison

    def truncate(self, max_degree):
        """Split into (kept, dropped_mass) at the given total degree."""
        kept = {}
        dropped = 0.0
        for k, c in self.coeffs.items():
            if sum(k) <= max_degree:
                kept[k] = c
            else:
                dropped += abs(c)
        return Poly(self.nvars, kept), dropped

    def prune(self, tol):
        """Drop coefficients with magnitude at most tol."""
        return Poly(self.nvars, {k: c for k, c in self.coeffs.items() if abs(c) > tol})

    def allclose(self, other, tol=1e-12):
        diff = self - other
        return diff.max_abs_coeff() <= tol

    def __eq__(self, other):
        if not isinstance(other, Poly):
            return NotImplemented
        return self.nvars == other.nvars and self.coeffs == other.coeffs

    def __hash__(self):
        return hash((self.nvars, frozenset(self.coeffs.items())))

    def __repr__(self):
        return f"Poly({self.nvars}, {format_poly(self, self.nvars // 2 or None)})"


def monomial_basis(nvars, max_degree):
    """All exponent tuples of total degree <= max_degree in graded lex order."""
    basis = []
    for deg in range(max_degree + 1):
        for combo in itertools.product(range(deg + 1), repeat=nvars):
            if sum(combo) == deg:
                basis.append(combo)
    return basis


# ---------------------------------------------------------------------- #
# text form: sums of terms like "2.5 * q1^2 * p1" (and bare constants)

_FACTOR_RE = re.compile(r"^([qp])(\d+)(?:\^(\d+))?$")


def parse_poly(expr, d):
    """Parse a polynomial expression over q1..qd, p1..pd.

    Grammar: terms joined by + or -, each a '*'-separated product of an
    optional numeric coefficient and factors q<i>[^e] / p<i>[^e].
    """
    s = expr.replace(" ", "")
    if not s:
        raise ValueError("empty polynomial expression")
    # split on +/- that are not part of an exponent of a number (e.g. 1e-3)
    terms = []
    cur = ""
    for i, ch in enumerate(s):
        if ch in "+-" and i > 0 and s[i - 1] not in "eE*^+-":
            terms.append(cur)
            cur = ch
        else:
            cur += ch
    terms.append(cur)

    out = Poly.zero(2 * d)
    for term in terms:
        if not term or term in "+-":
            raise ValueError(f"malformed term in {expr!r}")
        sign = 1.0
        while term and term[0] in "+-":
            if term[0] == "-":
                sign = -sign
            term = term[1:]
        coeff = sign
        expt = [0] * (2 * d)
        for factor in term.split("*"):
            if not factor:
                raise ValueError(f"malformed term in {expr!r}")
            m = _FACTOR_RE.match(factor)
            if m:
                kind, idx, e = m.group(1), int(m.group(2)), m.group(3)
                if not 1 <= idx <= d:
                    raise ValueError(f"variable {factor!r} out of range for d={d}")
                var = (idx - 1) + (d if kind == "p" else 0)
                expt[var] += int(e) if e else 1
            else:
                coeff *= float(factor)
        out = out + Poly.monomial(2 * d, expt, coeff)
    return out


def format_poly(poly, d=None):
    """Render a phase-space polynomial in the parse_poly grammar."""
    if not poly.coeffs:
        return "0"
    if d is None:
        d = poly.nvars // 2
    parts = []
    for k in sorted(poly.coeffs, key=lambda k: (sum(k), k)):
        c = poly.coeffs[k]
        factors = [f"{c:.17g}"]
        for i, e in enumerate(k):
            if not e:
                continue
            name = f"q{i + 1}" if i < d else f"p{i + 1 - d}"
            factors.append(name if e == 1 else f"{name}^{e}")
        parts.append(" * ".join(factors))
    return " + ".join(parts)
