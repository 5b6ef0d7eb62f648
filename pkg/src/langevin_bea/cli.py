"""Command-line entry point.

Subcommands: simulate, audit-potential, audit-lyapunov, moment-sweep,
poisson-solve, expansion, weak-error, invariant-bias, mixing.

Conventions: a JSON config file (--config) supplies defaults that flags
override; every run writes its fully resolved configuration next to the
results as a reproducibility manifest; outputs are written atomically
(temp file + rename); floats are serialized losslessly (17 significant
digits in CSV). Exit codes: 0 pass, 2 check failure, 1 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .generators import GibbsMeasure, IncompatibleRHS, build_operator_matrix, solve_poisson
from .expansion import build_A_series, measure_expansion, modified_operators
from .harness import invariant_bias, mixing_rate, weak_error_order
from .integrators import PhaseState, StepParams, simulate
from .lyapunov import check_drift_inequality, gamma as gamma_fn, moment_sweep
from .polynomials import Poly, format_poly, parse_poly
from .potentials import audit_assumptions, make_potential

CHECK_FAIL = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(f"{float(obj):.17g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path, payload):
    _atomic_write(path, json.dumps(_json_ready(payload), indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_manifest(out_base, args_ns, resolved):
    payload = {
        "tool": "langevin-bea",
        "version": __version__,
        "subcommand": resolved.get("subcommand"),
        "resolved_config": resolved,
    }
    _write_json(out_base + ".manifest.json", payload)


def _poly_terms(poly):
    return [[list(k), c] for k, c in sorted(poly.coeffs.items())]


def _parse_box(spec, axes):
    """'lo:hi' for all axes or comma-separated per-axis ranges."""
    parts = spec.split(",")
    if len(parts) == 1:
        lo, hi = (float(v) for v in parts[0].split(":"))
        return [(lo, hi)] * axes
    if len(parts) != axes:
        raise _UsageError(f"box needs 1 or {axes} ranges, got {len(parts)}")
    out = []
    for part in parts:
        lo, hi = (float(v) for v in part.split(":"))
        out.append((lo, hi))
    return out


def _resolve_potential(ns):
    params = {}
    if getattr(ns, "potential", None) == "custom":
        if not getattr(ns, "potential_terms", None):
            raise _UsageError("custom potential needs --potential-terms JSON")
        params["terms"] = json.loads(ns.potential_terms)
    return make_potential(ns.potential, d=ns.dim, params=params)


_OBSERVABLES = {
    "q2": lambda model, g: (lambda q, p: np.einsum("...i,...i->...", q, q)),
    "p2": lambda model, g: (lambda q, p: np.einsum("...i,...i->...", p, p)),
    "H": lambda model, g: (
        lambda q, p: 0.5 * np.einsum("...i,...i->...", p, p) + model.value(q)
    ),
    "Gamma": lambda model, g: (lambda q, p: gamma_fn(q, p, model, g)),
}


# ---------------------------------------------------------------------- #
# subcommand implementations (each returns an exit code)


def _cmd_simulate(ns, out_base):
    model = _resolve_potential(ns)
    params = StepParams(delta=ns.delta, gamma=ns.gamma, sigma=ns.sigma, scheme=ns.scheme)
    names = [s for s in ns.observe.split(",") if s]
    unknown = [s for s in names if s not in _OBSERVABLES]
    if unknown:
        raise _UsageError(f"unknown observables {unknown}; choose from {sorted(_OBSERVABLES)}")
    observers = {name: _OBSERVABLES[name](model, ns.gamma) for name in names}
    state0 = PhaseState(np.full(model.d, ns.q0), np.full(model.d, ns.p0))
    summary = simulate(
        state0, model, params, ns.steps, observers=observers,
        stride=ns.stride, chains=ns.chains, seed=ns.seed,
    )
    rows = []
    for chain in range(ns.chains):
        for i, k in enumerate(summary.steps):
            row = [chain, int(k), k * ns.delta]
            row.extend(float(summary.observations[name][i][chain]) for name in names)
            rows.append(row)
    _write_csv(out_base + ".csv", ["chain", "step", "time", *names], rows)
    return 0


def _cmd_audit_potential(ns, out_base):
    model = _resolve_potential(ns)
    box = _parse_box(ns.box, model.d)
    audit = audit_assumptions(model, box, ns.resolution, ns.gamma, ns.beta)
    payload = {
        "potential": model.name,
        "dim": model.d,
        "theta": audit.theta,
        "beta_b2": audit.beta_b2,
        "kappa": audit.kappa,
        "beta1": audit.beta1,
        "kappa_diss": audit.kappa_diss,
        "kappa1": audit.kappa1,
        "kappa2": audit.kappa2,
        "strict_b4": audit.strict_b4,
        "passes": audit.passes,
        "box": audit.box,
        "resolution": audit.resolution,
    }
    _write_json(out_base + ".json", payload)
    print(f"audit of {model.name} on box {audit.box}: "
          f"{'PASS' if audit.all_pass else 'FAIL'} (theta={audit.theta:.6g})")
    return 0 if audit.all_pass else CHECK_FAIL


def _cmd_audit_lyapunov(ns, out_base):
    model = _resolve_potential(ns)
    box = _parse_box(ns.box, 2 * model.d)
    audit = audit_assumptions(
        model, [(lo, hi) for lo, hi in box[: model.d]], ns.resolution, ns.gamma, ns.beta
    )
    reports = []
    ok = True
    for ell in ns.ell:
        rep = check_drift_inequality(model, ns.gamma, ns.sigma, audit, ell, box, ns.resolution)
        ok = ok and rep.passed
        reports.append(
            {
                "ell": rep.ell,
                "a_ell": rep.a_ell,
                "d_ell": rep.d_ell,
                "worst_violation": rep.worst_violation,
                "slack": rep.slack,
                "passed": rep.passed,
                "box": rep.box,
                "resolution": rep.resolution,
            }
        )
    payload = {"potential": model.name, "gamma": ns.gamma, "sigma": ns.sigma,
               "beta_b2": audit.beta_b2, "kappa": audit.kappa, "reports": reports}
    _write_json(out_base + ".json", payload)
    for rep in reports:
        print(f"ell={rep['ell']}: worst violation {rep['worst_violation']:.3e} "
              f"{'PASS' if rep['passed'] else 'FAIL'}")
    return 0 if ok else CHECK_FAIL


def _cmd_moment_sweep(ns, out_base):
    model = _resolve_potential(ns)
    params = StepParams(delta=ns.delta, gamma=ns.gamma, sigma=ns.sigma, scheme=ns.scheme)
    sweep = moment_sweep(model, params, ns.ell, ns.steps, ns.chains, ns.seed)
    rows = [
        [int(k), k * ns.delta, float(est), float(ci)]
        for k, est, ci in zip(sweep.steps, sweep.estimates, sweep.ci_halfwidth)
    ]
    _write_csv(out_base + ".csv", ["step", "time", "estimate", "ci_halfwidth"], rows)
    _write_json(out_base + ".json", {
        "diverged": sweep.diverged,
        "running_sup": sweep.running_sup,
        "threshold": sweep.divergence_threshold,
        "ell": sweep.ell,
        "delta": sweep.delta,
        "chains": sweep.chains,
    })
    print(f"moment sweep: running sup {sweep.running_sup:.6g}, "
          f"{'DIVERGED' if sweep.diverged else 'bounded'}")
    return 0


def _cmd_poisson_solve(ns, out_base):
    model = _resolve_potential(ns)
    g = parse_poly(ns.g, model.d)
    which = {"L": "L", "Lstar": "L_star", "L_star": "L_star"}.get(ns.operator)
    if which is None:
        raise _UsageError("--operator must be L or Lstar")
    try:
        result = solve_poisson(which, model, ns.gamma, ns.sigma, g, ns.degree)
    except IncompatibleRHS as exc:
        print(f"incompatible right-hand side: {exc}", file=sys.stderr)
        return CHECK_FAIL
    payload = {
        "operator": ns.operator,
        "g": format_poly(g, model.d),
        "mu_terms": _poly_terms(result.mu),
        "mu": format_poly(result.mu, model.d),
        "residual": result.residual,
        "mean": result.mean,
        "rank_deficient": result.rank_deficient,
        "degree": ns.degree,
    }
    _write_json(out_base + ".json", payload)
    print(f"mu = {format_poly(result.mu.prune(1e-12), model.d)} (residual {result.residual:.3e})")
    return 0


def _cmd_expansion(ns, out_base):
    model = _resolve_potential(ns)
    series = build_A_series(
        ns.scheme, model, ns.gamma, ns.sigma, ns.order + 1, ns.degree, method=ns.method
    )
    try:
        series = modified_operators(series, ns.order)
    except RuntimeError as exc:
        print(f"round-trip failure: {exc}", file=sys.stderr)
        return CHECK_FAIL
    measure = GibbsMeasure(model, ns.gamma, ns.sigma)
    mex = measure_expansion(series, model, ns.gamma, ns.sigma, ns.order, ns.degree, measure=measure)
    basis = [list(b) for b in series.basis]
    ln_one = [float(np.max(np.abs(Lk.matrix[:, 0]))) for Lk in series.L]
    payload = {
        "scheme": ns.scheme,
        "degree": ns.degree,
        "order": ns.order,
        "basis": basis,
        "A": [a.matrix.tolist() for a in series.A],
        "A_provenance": series.provenance,
        "L": [Lk.matrix.tolist() for Lk in series.L],
        "mu": [_poly_terms(mu) for mu in mex.mus],
        "mu_residuals": mex.residuals,
        "mu_means": mex.means,
        "Ln_applied_to_one": ln_one,
        "roundtrip": "passed",
    }
    _write_json(out_base + ".json", payload)
    print(f"expansion order {ns.order} ({ns.scheme}): round trip passed; "
          f"mu residuals {['%.2e' % r for r in mex.residuals]}")
    return 0


def _parse_deltas(spec):
    return [float(v) for v in spec.split(",") if v]


def _cmd_weak_error(ns, out_base):
    model = _resolve_potential(ns)
    params = StepParams(delta=1e-2, gamma=ns.gamma, sigma=ns.sigma, scheme=ns.scheme)
    phi = parse_poly(ns.observable, model.d)
    deltas = _parse_deltas(ns.deltas)
    fit = weak_error_order(
        ns.scheme, model, params, phi, ns.T, deltas,
        reference=ns.reference, chains=ns.chains, seed=ns.seed, threads=ns.threads,
    )
    rows = [[float(d), float(e)] for d, e in zip(fit.deltas, fit.errors)]
    _write_csv(out_base + ".csv", ["delta", "error"], rows)
    lo, hi = (float(v) for v in ns.slope_band.split(":"))
    ok = lo <= fit.slope <= hi
    _write_json(out_base + ".json", {
        "slope": fit.slope, "slope_stderr": fit.slope_stderr,
        "intercept": fit.intercept, "method": fit.method,
        "band": [lo, hi], "pass": ok, "excluded": fit.excluded,
    })
    print(f"weak error slope {fit.slope:.4f} ± {fit.slope_stderr:.4f} "
          f"({'PASS' if ok else 'FAIL'} band [{lo}, {hi}])")
    return 0 if ok else CHECK_FAIL


def _cmd_invariant_bias(ns, out_base):
    model = _resolve_potential(ns)
    params = StepParams(delta=1e-2, gamma=ns.gamma, sigma=ns.sigma, scheme=ns.scheme)
    phi = parse_poly(ns.observable, model.d)
    deltas = _parse_deltas(ns.deltas)
    result = invariant_bias(
        ns.scheme, model, params, phi, deltas,
        burn_in=ns.burn_in, horizon=ns.horizon, chains=ns.chains,
        seed=ns.seed, method=ns.method, threads=ns.threads,
    )
    rows = [[float(d), float(b)] for d, b in zip(result.deltas, result.biases)]
    _write_csv(out_base + ".csv", ["delta", "bias"], rows)
    lo, hi = (float(v) for v in ns.slope_band.split(":"))
    ok = lo <= result.fit.slope <= hi
    _write_json(out_base + ".json", {
        "slope": result.fit.slope, "slope_stderr": result.fit.slope_stderr,
        "first_order": result.first_order, "gibbs_value": result.gibbs_value,
        "band": [lo, hi], "pass": ok, "method": result.fit.method,
    })
    print(f"invariant bias slope {result.fit.slope:.4f}, first-order {result.first_order:.6g} "
          f"({'PASS' if ok else 'FAIL'})")
    return 0 if ok else CHECK_FAIL


def _cmd_mixing(ns, out_base):
    model = _resolve_potential(ns)
    params = StepParams(delta=ns.delta, gamma=ns.gamma, sigma=ns.sigma, scheme=ns.scheme)
    phi = parse_poly(ns.observable, model.d)
    k_grid = np.arange(0, ns.k_max, ns.k_stride)
    result = mixing_rate(ns.scheme, model, params, phi, k_grid,
                         chains=ns.chains, seed=ns.seed, method=ns.method)
    payload = {
        "rate": result.rate,
        "envelope": result.envelope,
        "fit_points": result.fit_points,
        "limit": result.limit,
        "delta": ns.delta,
    }
    ok = result.rate > 0
    _write_json(out_base + ".json", payload)
    rows = [[int(k), k * ns.delta, float(v)] for k, v in zip(result.k_grid, result.values)]
    _write_csv(out_base + ".csv", ["step", "time", "value"], rows)
    print(f"mixing rate {result.rate:.5f} (envelope fit: {result.envelope})")
    return 0 if ok else CHECK_FAIL


# ---------------------------------------------------------------------- #
# parser construction


def _add_common(p, *, potential=True, scheme=True, dynamics=True):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--config", default=None)
    if potential:
        p.add_argument("--potential", default=None,
                       help="quadratic | quartic | double_well | custom")
        p.add_argument("--potential-terms", default=None,
                       help="JSON [[multi_index, coeff], ...] for --potential custom")
        p.add_argument("--dim", type=int, default=None)
    if scheme:
        p.add_argument("--scheme", default=None,
                       help="split_step | implicit_euler | explicit_euler")
    if dynamics:
        p.add_argument("--gamma", type=float, default=None)
        p.add_argument("--sigma", type=float, default=None)


_DEFAULTS = {
    "seed": 0, "threads": 1, "out_dir": ".", "potential": None, "dim": 1,
    "scheme": None, "gamma": 1.0, "sigma": math.sqrt(2.0), "delta": 0.05,
    "steps": 1000, "chains": 1, "stride": 1, "observe": "q2,p2,H,Gamma",
    "q0": 1.0, "p0": 0.0, "box": "-5:5", "resolution": 101, "beta": 0.5,
    "ell": [1], "degree": 6, "order": 1, "method": None, "g": None,
    "operator": None, "observable": "q1^2", "T": 1.0,
    "deltas": "0.1,0.05,0.025,0.0125", "reference": "exact",
    "slope_band": "0.9:1.1", "burn_in": None, "horizon": None,
    "k_max": 2000, "k_stride": 5, "potential_terms": None,
}

_REQUIRED = {
    "simulate": ["potential", "scheme"],
    "audit-potential": ["potential"],
    "audit-lyapunov": ["potential"],
    "moment-sweep": ["potential", "scheme"],
    "poisson-solve": ["potential", "operator", "g"],
    "expansion": ["potential", "scheme"],
    "weak-error": ["potential", "scheme"],
    "invariant-bias": ["potential", "scheme"],
    "mixing": ["potential", "scheme"],
}


def build_parser():
    parser = _Parser(prog="langevin-bea", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate")
    _add_common(p)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--chains", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--observe", default=None)
    p.add_argument("--q0", type=float, default=None)
    p.add_argument("--p0", type=float, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("audit-potential")
    _add_common(p, scheme=False)
    p.add_argument("--box", default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)

    p = sub.add_parser("audit-lyapunov")
    _add_common(p, scheme=False)
    p.add_argument("--box", default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--ell", type=int, nargs="+", default=None)

    p = sub.add_parser("moment-sweep")
    _add_common(p)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--ell", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--chains", type=int, default=None)

    p = sub.add_parser("poisson-solve")
    _add_common(p, scheme=False)
    p.add_argument("--operator", default=None, help="L | Lstar")
    p.add_argument("--g", default=None, help="polynomial, e.g. '2*q1^2 - 1'")
    p.add_argument("--degree", type=int, default=None)

    p = sub.add_parser("expansion")
    _add_common(p)
    p.add_argument("--order", type=int, default=None)
    p.add_argument("--degree", type=int, default=None)
    p.add_argument("--method", default=None, help="analytic | extracted (default per scheme)")

    p = sub.add_parser("weak-error")
    _add_common(p)
    p.add_argument("--observable", default=None)
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--deltas", default=None)
    p.add_argument("--reference", default=None, help="exact | fine-step")
    p.add_argument("--chains", type=int, default=None)
    p.add_argument("--slope-band", default=None)

    p = sub.add_parser("invariant-bias")
    _add_common(p)
    p.add_argument("--observable", default=None)
    p.add_argument("--deltas", default=None)
    p.add_argument("--method", default=None, help="exact | mc")
    p.add_argument("--burn-in", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--chains", type=int, default=None)
    p.add_argument("--slope-band", default=None)

    p = sub.add_parser("mixing")
    _add_common(p)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--observable", default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--k-stride", type=int, default=None)
    p.add_argument("--method", default=None)
    p.add_argument("--chains", type=int, default=None)

    return parser


_COMMANDS = {
    "simulate": _cmd_simulate,
    "audit-potential": _cmd_audit_potential,
    "audit-lyapunov": _cmd_audit_lyapunov,
    "moment-sweep": _cmd_moment_sweep,
    "poisson-solve": _cmd_poisson_solve,
    "expansion": _cmd_expansion,
    "weak-error": _cmd_weak_error,
    "invariant-bias": _cmd_invariant_bias,
    "mixing": _cmd_mixing,
}

_METHOD_DEFAULTS = {"weak-error": "exact", "invariant-bias": "exact", "mixing": "exact"}


def _resolve(ns):
    """Layer values: flags > config[subcommand] > config top level > defaults."""
    config = {}
    if ns.config:
        with open(ns.config) as fh:
            config = json.load(fh)
    section = config.get(ns.subcommand, {})
    resolved = {"subcommand": ns.subcommand}
    for key, value in vars(ns).items():
        if key in ("config", "subcommand"):
            continue
        if value is None:
            value = section.get(key, config.get(key))
        if value is None:
            if key == "method" and ns.subcommand in _METHOD_DEFAULTS:
                value = _METHOD_DEFAULTS[ns.subcommand]
            else:
                value = _DEFAULTS.get(key)
        setattr(ns, key, value)
        resolved[key] = value
    missing = [k for k in _REQUIRED.get(ns.subcommand, []) if getattr(ns, k, None) is None]
    if missing:
        raise _UsageError(f"missing required option(s): {', '.join('--' + m for m in missing)}")
    return resolved


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        resolved = _resolve(ns)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print("valid subcommands: " + ", ".join(sorted(_COMMANDS)), file=sys.stderr)
        return 1
    out_base = os.path.join(ns.out_dir, getattr(ns, "out", None) or ns.subcommand)
    if out_base.endswith(".csv") or out_base.endswith(".json"):
        out_base = out_base.rsplit(".", 1)[0]
    try:
        code = _COMMANDS[ns.subcommand](ns, out_base)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    _write_manifest(out_base, ns, resolved)
    return code


if __name__ == "__main__":
    sys.exit(main())
