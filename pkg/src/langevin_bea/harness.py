"""Estimators and desk-scale verification harnesses.

Two backends everywhere: an exact affine recursion for the quadratic
(Ornstein-Uhlenbeck) case, where each scheme's one-step map is linear and
all Gaussian moments propagate in closed form, and Monte Carlo over
independent chains for general potentials. The exact backend makes the
slope fits sharp enough to assert tolerances; the Monte Carlo backend is
cross-checked against it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .generators import GibbsMeasure
from .integrators import PhaseState, StepParams, simulate
from .polynomials import Poly

__all__ = [
    "OUReference",
    "exact_ou_reference",
    "gaussian_expectation",
    "EstimateWithCI",
    "estimate_expectation",
    "OrderFit",
    "weak_error_order",
    "BiasResult",
    "invariant_bias",
    "MixingResult",
    "NotCenteredError",
    "mixing_rate",
]


class NotCenteredError(ValueError):
    """The observable has no decaying part: a decay rate is undefined."""


# ---------------------------------------------------------------------- #
# exact Ornstein-Uhlenbeck reference (V = |q|^2 / 2, d = 1)


@dataclass
class OUReference:
    """Closed-form propagators for the quadratic potential.

    Continuous side: drift matrix A = [[0, 1], [-1, -gamma]], noise
    intensity Qc = diag(0, sigma^2); mean exp(A t) m0 and covariance
    Sigma_inf + exp(A t)(Sigma_0 - Sigma_inf) exp(A^T t). Discrete side:
    the scheme's one-step affine map X1 = M X + xi, xi ~ N(0, Qd).
    """

    gamma: float
    sigma: float
    scheme: str
    delta: float
    A: np.ndarray
    Qc: np.ndarray
    M: np.ndarray
    Qd: np.ndarray

    def stationary_cov_continuous(self):
        return scipy.linalg.solve_continuous_lyapunov(self.A, -self.Qc)

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.M))))

    def stationary_cov_discrete(self):
        if self.spectral_radius() >= 1.0:
            raise ValueError(
                f"spectral radius {self.spectral_radius():.6f} >= 1: no stationary covariance"
            )
        return scipy.linalg.solve_discrete_lyapunov(self.M, self.Qd)

    def continuous_mean_cov(self, t, m0=None, S0=None):
        m0 = np.zeros(2) if m0 is None else np.asarray(m0, dtype=float)
        S0 = np.zeros((2, 2)) if S0 is None else np.asarray(S0, dtype=float)
        Sinf = self.stationary_cov_continuous()
        Phi = scipy.linalg.expm(self.A * t)
        return Phi @ m0, Sinf + Phi @ (S0 - Sinf) @ Phi.T

    def discrete_mean_cov(self, n, m0=None, S0=None):
        m0 = np.zeros(2) if m0 is None else np.asarray(m0, dtype=float)
        S0 = np.zeros((2, 2)) if S0 is None else np.asarray(S0, dtype=float)
        Sinf = self.stationary_cov_discrete()
        Mn = np.linalg.matrix_power(self.M, n)
        return Mn @ m0, Sinf + Mn @ (S0 - Sinf) @ Mn.T

    def mixing_rate_continuous(self):
        return float(-np.max(np.real(np.linalg.eigvals(self.A))))

    def mixing_rate_discrete(self):
        return float(-math.log(self.spectral_radius()) / self.delta)


def exact_ou_reference(gamma, sigma, scheme, delta):
    """Exact continuous and per-scheme discrete maps for V = q^2/2, d = 1."""
    A = np.array([[0.0, 1.0], [-1.0, -gamma]])
    Qc = np.array([[0.0, 0.0], [0.0, sigma**2]])
    D = 1.0 + gamma * delta + delta**2
    if scheme in ("split_step", "implicit_euler"):
        M = np.array(
            [[(1.0 + gamma * delta) / D, delta / D], [-delta / D, 1.0 / D]]
        )
        if scheme == "split_step":
            Qd = np.array([[0.0, 0.0], [0.0, delta * sigma**2]])
        else:
            b = math.sqrt(delta) * sigma * np.array([delta / D, 1.0 / D])
            Qd = np.outer(b, b)
    elif scheme == "explicit_euler":
        M = np.array([[1.0, delta], [-delta, 1.0 - gamma * delta]])
        Qd = np.array([[0.0, 0.0], [0.0, delta * sigma**2]])
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return OUReference(
        gamma=float(gamma), sigma=float(sigma), scheme=scheme, delta=float(delta),
        A=A, Qc=Qc, M=M, Qd=Qd,
    )


def gaussian_expectation(phi, mean, cov, nodes=None):
    """E phi(X) for X ~ N(mean, cov), exact for polynomials via Gauss-Hermite."""
    mean = np.asarray(mean, dtype=float)
    dim = len(mean)
    if nodes is None:
        nodes = max(phi.degree // 2 + 2, 4)
    x, w = np.polynomial.hermite.hermgauss(nodes)
    z1 = x * math.sqrt(2.0)
    w1 = w / math.sqrt(math.pi)
    grids = np.meshgrid(*([z1] * dim), indexing="ij")
    z = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.ones(len(z))
    idx = np.meshgrid(*([np.arange(nodes)] * dim), indexing="ij")
    for block in idx:
        weights = weights * w1[block.ravel()]
    # allow semidefinite covariances through eigen square root
    evals, evecs = np.linalg.eigh(np.asarray(cov, dtype=float))
    root = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))
    pts = mean + z @ root.T
    return float(phi(pts) @ weights)


# ---------------------------------------------------------------------- #
# Monte Carlo estimators


@dataclass
class EstimateWithCI:
    value: float
    stderr: float
    chains: int
    effective_samples: int
    seed: int


def _chunked_chain_values(fn, chains, threads=1, chunk=16):
    """Evaluate fn(chain_lo, chain_hi) -> array over fixed chunks.

    Chunk boundaries are independent of the thread count and results are
    concatenated in chunk order, so reductions are reproducible for any
    parallelism degree.
    """
    bounds = [(a, min(a + chunk, chains)) for a in range(0, chains, chunk)]
    if threads <= 1:
        parts = [fn(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), bounds))
    return np.concatenate(parts, axis=-1)


def estimate_expectation(scheme, model, params, phi, T, chains, seed, state0=None, threads=1):
    """Across-chain estimate of E phi(q_k, p_k) at T = k * delta."""
    k = T / params.delta
    if abs(k - round(k)) > 1e-9:
        raise ValueError("T must be an integer multiple of delta")
    k = int(round(k))
    if state0 is None:
        state0 = PhaseState(np.ones(model.d), np.zeros(model.d))

    def run(a, b):
        # chain streams are keyed by absolute index: simulate chains [a, b)
        # by shifting the stream ids through a custom noise source
        from .noise import NoiseSource

        class _Shifted(NoiseSource):
            def for_chain(self, chain):
                return NoiseSource(self.seed, self.d, stream=a + chain)

        summary = simulate(
            state0, model, params, k,
            noise=_Shifted(seed, model.d), chains=b - a, stride=max(k, 1),
        )
        return phi(np.concatenate([summary.final_q, summary.final_p], axis=-1))

    values = _chunked_chain_values(run, chains, threads=threads)
    value = float(math.fsum(values) / chains)
    sd = float(np.std(values, ddof=1)) if chains > 1 else 0.0
    return EstimateWithCI(
        value=value, stderr=sd / math.sqrt(chains), chains=chains,
        effective_samples=chains, seed=seed,
    )


# ---------------------------------------------------------------------- #
# order fits


@dataclass
class OrderFit:
    deltas: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    slope_stderr: float
    residual: float
    method: str
    excluded: list = field(default_factory=list)


def _loglog_fit(deltas, errors, method, floor_scale=1.0):
    deltas = np.asarray(deltas, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = errors > 1e-12 * floor_scale
    excluded = [float(d) for d in deltas[~keep]]
    if keep.sum() < 3:
        raise ValueError("order fit needs at least 3 usable (delta, error) points")
    x = np.log(deltas[keep])
    y = np.log(errors[keep])
    n = len(x)
    xbar, ybar = x.mean(), y.mean()
    sxx = np.sum((x - xbar) ** 2)
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    dof = max(n - 2, 1)
    slope_stderr = float(math.sqrt(np.sum(resid**2) / dof / sxx))
    return OrderFit(
        deltas=deltas[keep], errors=errors[keep], slope=slope, intercept=intercept,
        slope_stderr=slope_stderr, residual=float(np.sqrt(np.mean(resid**2))),
        method=method, excluded=excluded,
    )


def _require_quadratic(model):
    expected = {(2,): 0.5}
    if model.poly is None or model.d != 1 or model.poly.coeffs != expected:
        raise ValueError("the exact backend needs the quadratic potential V = q^2/2, d = 1")


def weak_error_order(
    scheme, model, params_base, phi, T, delta_ladder, reference="exact",
    state0=None, chains=1024, seed=0, threads=1,
):
    """Fit the weak error |E phi(X_{T/delta}) - E phi(X(T))| against delta.

    reference 'exact' uses the noise-free affine recursion (quadratic
    potential only); 'fine-step' compares against a Monte Carlo run at
    delta/64 with shared chain count. Errors below the numerical floor are
    excluded from the fit and reported.
    """
    if state0 is None:
        state0 = PhaseState(np.ones(model.d), np.zeros(model.d))
    m0 = np.concatenate([state0.q, state0.p])
    errors = []
    if reference == "exact":
        _require_quadratic(model)
        ref = exact_ou_reference(params_base.gamma, params_base.sigma, scheme, delta_ladder[0])
        m_T, S_T = ref.continuous_mean_cov(T, m0, np.zeros((2, 2)))
        target = gaussian_expectation(phi, m_T, S_T)
        for delta in delta_ladder:
            k = int(round(T / delta))
            r = exact_ou_reference(params_base.gamma, params_base.sigma, scheme, delta)
            m_k, S_k = r.discrete_mean_cov(k, m0, np.zeros((2, 2)))
            errors.append(abs(gaussian_expectation(phi, m_k, S_k) - target))
        scale = max(abs(target), 1.0)
        return _loglog_fit(delta_ladder, errors, "exact-recursion", floor_scale=scale)

    if reference != "fine-step":
        raise ValueError("reference must be 'exact' or 'fine-step'")
    fine = StepParams(
        delta=min(delta_ladder) / 64.0, gamma=params_base.gamma,
        sigma=params_base.sigma, scheme=scheme,
    )
    target = estimate_expectation(
        scheme, model, fine, phi, T, chains, seed + 1, state0=state0, threads=threads
    ).value
    for delta in delta_ladder:
        params = StepParams(delta=delta, gamma=params_base.gamma,
                            sigma=params_base.sigma, scheme=scheme)
        est = estimate_expectation(
            scheme, model, params, phi, T, chains, seed, state0=state0, threads=threads
        )
        errors.append(abs(est.value - target))
    return _loglog_fit(delta_ladder, errors, "MC", floor_scale=max(abs(target), 1.0))


# ---------------------------------------------------------------------- #
# invariant-measure bias


@dataclass
class BiasResult:
    fit: OrderFit
    biases: np.ndarray  # signed E_infty phi - <phi>_rho per delta
    deltas: np.ndarray
    gibbs_value: float
    first_order: float | None = None  # bias(delta)/delta extrapolated
    residual_fit: OrderFit | None = None
    burn_in_ok: bool | None = None


def invariant_bias(
    scheme, model, params, phi, delta_ladder, burn_in=None, horizon=None,
    chains=64, seed=0, method="exact", mu1_coefficient=None, threads=1,
):
    """Stationary bias of the scheme versus the Gibbs average, per delta.

    The exact backend reads E_infty phi off the scheme's stationary
    covariance (quadratic potential); the Monte Carlo backend uses long-run
    time averages after burn-in. When mu1_coefficient (the predicted
    first-order bias coefficient) is supplied, the residual
    bias - delta * mu1_coefficient is fit as well; it should be one order
    steeper.
    """
    deltas = np.asarray(delta_ladder, dtype=float)
    if method == "exact":
        _require_quadratic(model)
        var = params.sigma**2 / (2.0 * params.gamma)
        gibbs = gaussian_expectation(phi, np.zeros(2), var * np.eye(2))
        biases = []
        for delta in deltas:
            ref = exact_ou_reference(params.gamma, params.sigma, scheme, delta)
            S = ref.stationary_cov_discrete()
            biases.append(gaussian_expectation(phi, np.zeros(2), S) - gibbs)
        biases = np.asarray(biases)
        burn_ok = None
    elif method == "mc":
        measure = GibbsMeasure(model, params.gamma, params.sigma)
        gibbs = measure.average(phi)
        if burn_in is None or horizon is None:
            raise ValueError("mc bias needs burn_in and horizon step counts")
        biases = []
        burn_ok = True
        for delta in deltas:
            p = StepParams(delta=float(delta), gamma=params.gamma,
                           sigma=params.sigma, scheme=scheme)

            def run(a, b):
                from .noise import NoiseSource

                class _Shifted(NoiseSource):
                    def for_chain(self, chain):
                        return NoiseSource(self.seed, self.d, stream=a + chain)

                summary = simulate(
                    PhaseState(np.zeros(model.d), np.zeros(model.d)), model, p,
                    burn_in + horizon, noise=_Shifted(seed, model.d),
                    chains=b - a, stride=1,
                    observers={"phi": lambda q, pp: phi(np.concatenate([q, pp], axis=-1))},
                )
                series = summary.observations["phi"]  # (n_logged, chains)
                start = np.searchsorted(summary.steps, burn_in)
                return series[start:].mean(axis=0)

            vals = _chunked_chain_values(run, chains, threads=threads)
            biases.append(float(vals.mean()) - gibbs)
        biases = np.asarray(biases)
    else:
        raise ValueError("method must be 'exact' or 'mc'")

    fit = _loglog_fit(deltas, np.abs(biases), f"{method}-bias", floor_scale=max(abs(gibbs), 1.0))
    first_order = float(biases[np.argmin(deltas)] / deltas.min())
    residual_fit = None
    if mu1_coefficient is not None:
        residual = np.abs(biases - deltas * mu1_coefficient)
        try:
            residual_fit = _loglog_fit(
                deltas, residual, f"{method}-bias-residual", floor_scale=max(abs(gibbs), 1.0)
            )
        except ValueError:
            residual_fit = None
    return BiasResult(
        fit=fit, biases=biases, deltas=deltas, gibbs_value=float(gibbs),
        first_order=first_order, residual_fit=residual_fit, burn_in_ok=burn_ok,
    )


# ---------------------------------------------------------------------- #
# mixing


@dataclass
class MixingResult:
    rate: float
    fit_points: int
    envelope: bool
    k_grid: np.ndarray
    values: np.ndarray
    limit: float


def _envelope_fit(times, values):
    """Fit |values| ~ C exp(-rate t), using the oscillation envelope.

    Complex eigenvalues make the decay oscillatory; fitting on the local
    maxima of |values| (the envelope) is the documented policy. Falls back
    to a direct fit when fewer than three peaks exist (overdamped decay).
    """
    mags = np.abs(values)
    peaks = [
        i
        for i in range(1, len(mags) - 1)
        if mags[i] >= mags[i - 1] and mags[i] >= mags[i + 1] and mags[i] > 0
    ]
    envelope = len(peaks) >= 3
    idx = np.asarray(peaks) if envelope else np.arange(len(mags))
    keep = mags[idx] > 1e-13 * mags.max()
    idx = idx[keep]
    if len(idx) < 2:
        raise NotCenteredError("decay fit needs at least two usable points")
    coeffs = np.polyfit(times[idx], np.log(mags[idx]), 1)
    return float(-coeffs[0]), envelope, len(idx)


def mixing_rate(
    scheme, model, params, phi, k_grid, chains=64, seed=0, method="exact", state0=None,
):
    """Fitted decay rate of E phi(q_k, p_k) toward its stationary value."""
    k_grid = np.asarray(k_grid, dtype=int)
    if state0 is None:
        state0 = PhaseState(np.ones(model.d), np.zeros(model.d))
    m0 = np.concatenate([state0.q, state0.p])
    if method == "exact":
        _require_quadratic(model)
        ref = exact_ou_reference(params.gamma, params.sigma, scheme, params.delta)
        Sinf = ref.stationary_cov_discrete()
        limit = gaussian_expectation(phi, np.zeros(2), Sinf)
        values = np.array(
            [
                gaussian_expectation(phi, *ref.discrete_mean_cov(int(k), m0, np.zeros((2, 2))))
                for k in k_grid
            ]
        )
    elif method == "mc":
        measure = GibbsMeasure(model, params.gamma, params.sigma)
        limit = measure.average(phi)
        values = []
        for k in k_grid:
            est = estimate_expectation(
                scheme, model, params, phi, k * params.delta, chains, seed, state0=state0
            )
            values.append(est.value)
        values = np.asarray(values)
    else:
        raise ValueError("method must be 'exact' or 'mc'")

    centered = values - limit
    scale = max(abs(limit), np.abs(values).max(), 1e-30)
    if np.abs(centered).max() <= 1e-12 * scale:
        raise NotCenteredError("observable is constant at the stationary value; decay undefined")
    times = k_grid * params.delta
    rate, envelope, npts = _envelope_fit(times, centered)
    if rate <= 0:
        raise ValueError(f"fitted rate {rate:.3e} is not positive")
    return MixingResult(
        rate=rate, fit_points=npts, envelope=envelope,
        k_grid=k_grid, values=values, limit=float(limit),
    )
