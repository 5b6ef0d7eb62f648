"""One-step maps and trajectory simulation for the Langevin schemes.

Three schemes share one nonlinear kernel: both implicit schemes reduce to
the same implicit position solve z = q + delta/(1+gamma*delta) *
(p_eff - delta * grad V(z)), differing only in the effective momentum
p_eff (p for split-step, p + sqrt(delta)*sigma*eta for implicit Euler)
and in how the new momentum is read off. The explicit Euler map is kept
as an instability baseline.

All state operations are vectorized over a leading batch axis, so many
chains step in lockstep with batched Newton solves.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .noise import NoiseSource

__all__ = [
    "PhaseState",
    "StepParams",
    "SolverConfig",
    "DeltaBounds",
    "NonUniquenessWarning",
    "MaxIterWarning",
    "SolveInfo",
    "SCHEMES",
    "delta_max",
    "solve_implicit_position",
    "step",
    "simulate",
    "TrajectorySummary",
]

SCHEMES = ("split_step", "implicit_euler", "explicit_euler")


class NonUniquenessWarning(UserWarning):
    """delta exceeds the solvability bound: the implicit solve may be non-unique."""


class MaxIterWarning(UserWarning):
    """The implicit solve hit max_iter; the best iterate was returned."""


@dataclass(frozen=True)
class PhaseState:
    """Position/momentum pair in R^d x R^d."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if q.shape != p.shape:
            raise ValueError("q and p must have the same shape")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("state entries must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def d(self):
        return self.q.shape[-1]


@dataclass(frozen=True)
class StepParams:
    delta: float
    gamma: float
    sigma: float
    scheme: str = "split_step"

    def __post_init__(self):
        if self.delta <= 0 or self.gamma <= 0 or self.sigma < 0:
            raise ValueError("need delta > 0, gamma > 0, sigma >= 0")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "newton"
    tol: float | None = None  # None -> 1e-12 * (1 + |q| + |p_eff|)
    max_iter: int = 100

    def __post_init__(self):
        if self.method not in ("newton", "fixed_point"):
            raise ValueError("method must be 'newton' or 'fixed_point'")
        if self.tol is not None and self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class DeltaBounds:
    """Admissibility bounds: steps below `solvability` have a unique implicit
    solve; below `moment` the schemes have uniformly bounded moments."""

    solvability: float
    moment: float


@dataclass
class SolveInfo:
    residual: float
    iterations: int
    converged: bool
    method: str


def delta_max(gamma, theta, beta_b2):
    """Admissible step bounds from (friction, semi-convexity, B-2 exponent).

    solvability = (gamma + sqrt(gamma^2 + 4 theta)) / (2 theta), with the
    convex limit theta -> 0 giving +inf; moment = min(1/gamma,
    gamma*beta/(4 theta)) with theta -> 0 giving 1/gamma. The moment bound
    never exceeds the solvability bound.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if theta < 0:
        raise ValueError("theta must be >= 0")
    if not 0.0 < beta_b2 < 1.0:
        raise ValueError("beta_b2 must be in (0, 1)")
    if theta == 0.0:
        return DeltaBounds(math.inf, 1.0 / gamma)
    solvability = (gamma + math.sqrt(gamma**2 + 4.0 * theta)) / (2.0 * theta)
    moment = min(1.0 / gamma, gamma * beta_b2 / (4.0 * theta))
    return DeltaBounds(solvability, moment)


def _solve_position_arrays(model, q, p_eff, delta, gamma, solver):
    """Batched implicit position solve; q, p_eff of shape (..., d)."""
    q = np.asarray(q, dtype=float)
    p_eff = np.asarray(p_eff, dtype=float)
    c = delta / (1.0 + gamma * delta)
    if solver.tol is None:
        scale = 1.0 + np.linalg.norm(q, axis=-1) + np.linalg.norm(p_eff, axis=-1)
        tol = 1e-12 * scale
    else:
        tol = np.asarray(solver.tol)

    def residual(z):
        return z - q - c * (p_eff - delta * model.grad(z))

    z = q.copy()
    method = solver.method
    n_iter = 0
    if method == "newton":
        eye = np.eye(q.shape[-1])
        for n_iter in range(1, solver.max_iter + 1):
            r = residual(z)
            if not np.all(np.isfinite(r)):
                break
            if np.all(np.linalg.norm(r, axis=-1) <= tol):
                break
            J = eye + (c * delta) * model.hess(z)
            if q.shape[-1] == 1:
                jj = J[..., 0, 0]
                if np.any(jj == 0.0):
                    method = "fixed_point"
                    break
                dz = r / jj[..., None]
            else:
                try:
                    dz = np.linalg.solve(J, r[..., None])[..., 0]
                except np.linalg.LinAlgError:
                    method = "fixed_point"  # singular Jacobian: damped fixed point
                    break
            z = z - dz
    if method == "fixed_point":
        damping = 0.5 if solver.method == "newton" else 1.0
        for n_iter in range(n_iter + 1, solver.max_iter + 1):
            r = residual(z)
            if not np.all(np.isfinite(r)):
                break
            if np.all(np.linalg.norm(r, axis=-1) <= tol):
                break
            z = z - damping * r

    r_final = np.linalg.norm(residual(z), axis=-1)
    res = float(np.max(r_final))
    converged = bool(np.all(np.isfinite(r_final)) and np.all(r_final <= tol))
    if not converged:
        warnings.warn(
            f"implicit solve stopped at residual {res:.3e} after {n_iter} iterations",
            MaxIterWarning,
            stacklevel=3,
        )
    return z, SolveInfo(residual=res, iterations=n_iter, converged=converged, method=method)


def solve_implicit_position(model, q, p_eff, delta, gamma, solver=None, theta=None):
    """Solve z = q + delta/(1+gamma*delta) (p_eff - delta grad V(z)).

    If theta (the semi-convexity constant) is given and delta exceeds the
    solvability bound, a NonUniquenessWarning is emitted and the found root
    is still returned.
    """
    solver = solver or SolverConfig()
    if theta is not None and theta > 0:
        if delta >= delta_max(gamma, theta, 0.5).solvability:
            warnings.warn(
                "delta exceeds the solvability bound: implicit solve may be non-unique",
                NonUniquenessWarning,
                stacklevel=2,
            )
    return _solve_position_arrays(model, q, p_eff, delta, gamma, solver)


def _step_arrays(q, p, model, params, eta, solver):
    """One scheme step on batched arrays; returns (q1, p1, SolveInfo | None)."""
    delta, gamma, sigma = params.delta, params.gamma, params.sigma
    eta = np.asarray(eta, dtype=float)
    kick = math.sqrt(delta) * sigma * eta
    if params.scheme == "explicit_euler":
        q1 = q + delta * p
        p1 = p - delta * model.grad(q) - gamma * delta * p + kick
        return q1, p1, None
    if params.scheme == "split_step":
        q1, info = _solve_position_arrays(model, q, p, delta, gamma, solver)
        p_star = (p - delta * model.grad(q1)) / (1.0 + gamma * delta)
        return q1, p_star + kick, info
    # implicit Euler through the same position kernel with shifted momentum
    p_eff = p + kick
    q1, info = _solve_position_arrays(model, q, p_eff, delta, gamma, solver)
    p1 = (q1 - q) / delta
    return q1, p1, info


def step(state, model, params, eta, solver=None):
    """Advance one step; deterministic given (state, eta)."""
    solver = solver or SolverConfig()
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if eta.shape != state.q.shape:
        raise ValueError("eta must match the state dimension")
    q1, p1, _ = _step_arrays(state.q, state.p, model, params, eta, solver)
    return PhaseState(q1, p1)


@dataclass
class TrajectorySummary:
    final_q: np.ndarray  # (chains, d)
    final_p: np.ndarray
    steps: np.ndarray  # logged step indices
    observations: dict  # name -> (n_logged, chains)
    solver_iterations: int = 0
    max_residual: float = 0.0
    n_steps: int = 0
    diverged: bool = False

    @property
    def times(self):
        return self.steps

    def final_state(self, chain=0):
        return PhaseState(self.final_q[chain], self.final_p[chain])


def simulate(
    state0,
    model,
    params,
    n_steps,
    noise=None,
    observers=None,
    stride=1,
    chains=1,
    seed=0,
    solver=None,
    noise_chunk=4096,
):
    """Run `chains` independent trajectories from a shared initial state.

    observers maps names to callables f(q, p) -> (chains,) evaluated every
    `stride` steps (including step 0 and the final step). Each chain uses
    its own counter-based noise stream, so results are independent of the
    number of chains run alongside.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    solver = solver or SolverConfig()
    observers = observers or {}
    if isinstance(state0, PhaseState):
        q = np.broadcast_to(state0.q, (chains, state0.d)).copy()
        p = np.broadcast_to(state0.p, (chains, state0.d)).copy()
    else:
        q0, p0 = state0
        q = np.array(q0, dtype=float, copy=True).reshape(chains, -1)
        p = np.array(p0, dtype=float, copy=True).reshape(chains, -1)
    d = q.shape[-1]
    if noise is None:
        noise = NoiseSource(seed, d)
    streams = [noise.for_chain(c) for c in range(chains)]

    logged_steps = []
    obs_series = {name: [] for name in observers}

    def log(k):
        logged_steps.append(k)
        for name, fn in observers.items():
            obs_series[name].append(np.asarray(fn(q, p), dtype=float))

    log(0)
    total_iters = 0
    max_res = 0.0
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while k < n_steps:
            chunk = min(noise_chunk, n_steps - k)
            etas = np.stack([s.block(k, chunk) for s in streams], axis=1)  # (chunk, chains, d)
            for j in range(chunk):
                try:
                    q, p, info = _step_arrays(q, p, model, params, etas[j], solver)
                except Exception as exc:
                    raise RuntimeError(f"step {k + j} failed: {exc}") from exc
                if info is not None:
                    total_iters += info.iterations
                    max_res = max(max_res, info.residual)
                if (k + j + 1) % stride == 0 or k + j + 1 == n_steps:
                    log(k + j + 1)
            k += chunk

    diverged = not (np.all(np.isfinite(q)) and np.all(np.isfinite(p)))
    return TrajectorySummary(
        final_q=q,
        final_p=p,
        steps=np.asarray(logged_steps),
        observations={k: np.asarray(v) for k, v in obs_series.items()},
        solver_iterations=total_iters,
        max_residual=max_res,
        n_steps=n_steps,
        diverged=diverged,
    )
