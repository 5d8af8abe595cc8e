"""Executable checks of the truncation bound, truncated-backprop equivalence,
descent, unbiasedness and convergence claims.

Every check returns a :class:`CheckReport` whose ``details`` rows each carry
an ``ok`` flag; ``passed`` is exactly ``all(row["ok"])`` so a report can be
re-audited from its table alone.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .estimators import ConfigError, EstimatorSpec, estimate
from .problems import (
    BilevelState,
    ContractError,
    QuadraticBilevel,
    ToySupernet,
    make_preset,
    quad_10d,
    sample_minibatch,
    theory_constants,
)
from .search import SearchConfig, run_search

CHECKS = ("theorem1", "corollary2", "descent", "unbiasedness", "convergence", "equivalences")

# slack for comparisons that should hold exactly up to rounding
_ROUND = 1e-12


@dataclass
class CheckReport:
    check_name: str
    passed: bool
    measured: list
    bound_or_threshold: float
    details: list = field(default_factory=list)
    notes: str = ""

    def recompute_passed(self):
        return bool(self.details) and all(bool(row["ok"]) for row in self.details)

    def to_dict(self):
        return _jsonable({
            "check_name": self.check_name,
            "passed": self.passed,
            "measured": [list(m) for m in self.measured],
            "bound_or_threshold": self.bound_or_threshold,
            "details": self.details,
            "notes": self.notes,
        })

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured)
        return f"{status} {self.check_name}: {parts} (threshold {_fmt(self.bound_or_threshold)})"


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _report(name, measured, threshold, details, notes=""):
    rep = CheckReport(name, False, measured, threshold, details, notes)
    rep.passed = rep.recompute_passed()
    return rep


def _require_quadratic(problem):
    if not isinstance(problem, QuadraticBilevel):
        raise ConfigError("this check needs a QuadraticBilevel (closed-form oracle)")


def _at_opt(problem, alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    return BilevelState(problem.inner_closed_form(alpha), alpha)


def _neumann(problem, state, K, gamma):
    return estimate(problem, state, EstimatorSpec("neumann_k", K=K, gamma=gamma)).grad_alpha


def check_theorem1_bound(problem, gamma, K_range=range(21), alpha_samples=None, rng=None):
    """Truncation error of the K-term Neumann estimator against its geometric bound.

    Evaluated at ``w*(alpha)`` only.  For a 1-d inner problem the log-error
    slope in K is also fitted and must be within 10% of ``log(1 - gamma mu)``.
    """
    _require_quadratic(problem)
    if alpha_samples is None:
        rng = np.random.default_rng(0) if rng is None else rng
        alpha_samples = [rng.standard_normal(problem.n_alpha) for _ in range(5)]
    K_range = list(K_range)
    rows, worst_ratio, max_err, max_bound = [], 0.0, 0.0, 0.0
    scalar_logs = []
    for ai, alpha in enumerate(alpha_samples):
        state = _at_opt(problem, alpha)
        try:
            tc = theory_constants(problem, [state.w], gamma)
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        exact = problem.oracle_exact_hypergradient(state.alpha)
        for K in K_range:
            err = float(np.linalg.norm(_neumann(problem, state, K, gamma) - exact))
            bound = tc.bound(K)
            ok = err <= bound * (1 + 1e-9) + _ROUND
            rows.append({"case": "bound", "alpha_index": ai, "K": K, "error": err, "bound": bound, "ok": ok})
            max_err, max_bound = max(max_err, err), max(max_bound, bound)
            if bound > 0:
                worst_ratio = max(worst_ratio, err / bound)
            if problem.n_w == 1 and err > 1e-13:
                scalar_logs.append((K, np.log(err), ai))

    rate = 1.0 - gamma * tc.mu
    measured = [("max_error", max_err), ("max_error_over_bound", worst_ratio)]
    # the bound is exercised unless it is identically zero (gamma*mu == 1)
    rows.append({"case": "non_vacuous", "max_error": max_err, "max_bound": max_bound,
                 "ok": max_bound <= _ROUND or max_err > _ROUND})
    if problem.n_w == 1 and rate > 0:
        slopes = []
        for ai in sorted({s[2] for s in scalar_logs}):
            pts = [(k, le) for k, le, a in scalar_logs if a == ai]
            if len(pts) >= 2:
                ks, les = np.array(pts).T
                slopes.append(np.polyfit(ks, les, 1)[0])
        expected = float(np.log(rate))
        slope = float(np.mean(slopes)) if slopes else float("nan")
        rows.append({"case": "decay_slope", "slope": slope, "expected": expected,
                     "ok": bool(slopes) and abs(slope - expected) <= 0.1 * abs(expected)})
        measured.append(("log_error_slope", slope))
    return _report("theorem1", measured, 1.0, rows)


def check_corollary2(problem, gamma, K_range=range(6), alpha_samples=None, rng=None, tol=1e-10):
    """Truncated reverse with ``K+1`` retained steps started at ``w*`` equals Neumann(K)."""
    _require_quadratic(problem)
    if alpha_samples is None:
        rng = np.random.default_rng(1) if rng is None else rng
        alpha_samples = [rng.standard_normal(problem.n_alpha) for _ in range(3)]
    rows, worst = [], 0.0
    for ai, alpha in enumerate(alpha_samples):
        state = _at_opt(problem, alpha)
        for K in K_range:
            neu = _neumann(problem, state, K, gamma)
            spec = EstimatorSpec("truncated_reverse", K=K + 1, T=K + 1, gamma=gamma)
            trunc = estimate(problem, state, spec).grad_alpha
            diff = float(np.max(np.abs(trunc - neu)))
            worst = max(worst, diff)
            rows.append({"alpha_index": ai, "K": K, "neumann": neu, "truncated": trunc,
                         "max_abs_diff": diff, "ok": diff <= tol})
    return _report("corollary2", [("max_abs_diff", worst)], tol, rows)


def check_descent(problem, gamma, K, n_samples=100, rng=None, zero_tol=1e-8):
    """``<neumann(K), exact> > 0`` at ``w*(alpha)`` for sampled alphas.

    Samples with ``|exact| <= zero_tol`` are skipped and counted.  The reported
    ``min_normalized`` is ``<approx, exact> / |exact|^2``.
    """
    _require_quadratic(problem)
    rng = np.random.default_rng(2) if rng is None else rng
    rows, skipped, ratios = [], 0, []
    for s in range(n_samples):
        alpha = rng.standard_normal(problem.n_alpha)
        state = _at_opt(problem, alpha)
        exact = problem.oracle_exact_hypergradient(state.alpha)
        nrm2 = float(exact @ exact)
        if np.sqrt(nrm2) <= zero_tol:
            skipped += 1
            continue
        d = float(_neumann(problem, state, K, gamma) @ exact)
        ratios.append(d / nrm2)
        rows.append({"sample": s, "dot": d, "normalized": d / nrm2, "ok": d > 0})
    lo = min(ratios) if ratios else float("nan")
    hi = max(ratios) if ratios else float("nan")
    return _report("descent", [("min_normalized", lo), ("max_normalized", hi), ("skipped", skipped)],
                   0.0, rows)


def check_unbiasedness(problem, spec, n_draws=200, rng=None, state=None, sigmas=3.0):
    """Monte-Carlo mean of the minibatch estimator against the full-batch Neumann estimate.

    Per coordinate ``|mean - full| <= sigmas * stderr``.  Coordinates whose
    draws are all identical must match the full-batch value to rounding.
    """
    if not spec.minibatch:
        raise ConfigError("check_unbiasedness needs a minibatch spec")
    rng = np.random.default_rng(3) if rng is None else rng
    if state is None:
        state = problem.initial_state(rng)
    full_spec = EstimatorSpec("neumann_k", K=spec.K or 0, gamma=spec.gamma, epsilon_scale=spec.epsilon_scale)
    full = estimate(problem, state, full_spec).grad_alpha
    draws = []
    for _ in range(n_draws):
        j = sample_minibatch(problem, "train", min(spec.batch_train, problem.n_train), rng)
        i = sample_minibatch(problem, "val", min(spec.batch_val, problem.n_val), rng)
        draws.append(estimate(problem, state, spec, (i, j)).grad_alpha)
    draws = np.array(draws)
    constant = np.all(draws == draws[0], axis=0)
    # averaging identical draws is not bit-exact, so constant columns are taken as-is
    mean = np.where(constant, draws[0], draws.mean(axis=0))
    stderr = draws.std(axis=0, ddof=1) / np.sqrt(n_draws) if n_draws > 1 else np.zeros_like(mean)
    stderr = np.where(constant, 0.0, stderr)
    gap = np.abs(mean - full)
    rows, worst = [], 0.0
    for c in range(mean.size):
        if stderr[c] > 0:
            z = float(gap[c] / stderr[c])
            ok = z <= sigmas
        else:
            z = 0.0 if gap[c] <= _ROUND * (1 + abs(full[c])) else float("inf")
            ok = z == 0.0
        worst = max(worst, z)
        rows.append({"coord": c, "mean": mean[c], "full": full[c], "stderr": stderr[c], "z": z, "ok": ok})
    notes = "" if spec.K in (None, 0) else (
        "for K >= 1 the minibatch estimator multiplies batch-dependent factors, so it is only "
        "approximately unbiased on nonlinear problems; this is an empirical check")
    return _report("unbiasedness", [("worst_z", worst), ("draws", n_draws)], sigmas, rows, notes)


def _window_means(values, window):
    c = np.cumsum(np.insert(values, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def check_convergence(trajectory, window=5, threshold=1e-4, problem=None):
    """Trailing ``window`` mean of ``hyper_norm`` below ``threshold`` and rolling
    window means nonincreasing over the second half of the run."""
    h = trajectory.hyper_norms()
    if window < 1 or len(h) < window:
        raise ConfigError(f"trajectory has {len(h)} rounds, fewer than window={window}")
    means = _window_means(h, window)
    tail = float(means[-1])
    start = len(means) // 2
    second = means[start:]
    rises = np.diff(second)
    worst_rise = float(rises.max()) if rises.size else 0.0
    rows = [
        {"case": "trailing_mean", "value": tail, "ok": bool(np.isfinite(tail) and tail < threshold)},
        {"case": "nonincreasing_second_half", "from_round": start, "worst_rise": worst_rise,
         "ok": bool(np.all(np.isfinite(second)) and worst_rise <= _ROUND)},
    ]
    notes = ""
    if isinstance(problem, ToySupernet):
        notes = "outside proof hypotheses: supernet inner loss is not strongly convex"
    return _report("convergence", [("trailing_mean", tail), ("worst_rise", worst_rise)], threshold, rows, notes)


def check_equivalences(seed=0):
    """Identities between estimators on the scalar and a 10-d quadratic."""
    rows = []

    def add(name, a, b, tol):
        diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
        rows.append({"case": name, "max_abs_diff": diff, "tol": tol, "ok": diff <= tol})

    rng = np.random.default_rng(seed)
    scalar = make_preset("quad-scalar")
    q10 = quad_10d(seed=seed)
    for label, p, gamma in (("scalar", scalar, 0.25), ("10d", q10, 0.3)):
        for _ in range(3):
            state = _at_opt(p, rng.standard_normal(p.n_alpha))
            off = BilevelState(state.w + 0.3 * rng.standard_normal(p.n_w), state.alpha)
            oracle = p.oracle_exact_hypergradient(state.alpha)
            one = estimate(p, off, EstimatorSpec("one_step_unrolled", gamma=gamma)).grad_alpha
            add(f"{label}: neumann(K=0) == one_step", _neumann(p, off, 0, gamma), one, 1e-12)
            exact = estimate(p, state, EstimatorSpec("exact_ift")).grad_alpha
            cg = estimate(p, state, EstimatorSpec("conjugate_gradient", S=p.n_w)).grad_alpha
            add(f"{label}: cg(S=dim) == exact_ift", cg, exact, 1e-8)
            add(f"{label}: exact_ift == oracle", exact, oracle, 1e-8)
            t1t2 = estimate(p, state, EstimatorSpec("t1t2")).grad_alpha
            add(f"{label}: t1t2 == one_step(gamma=1)", t1t2,
                estimate(p, state, EstimatorSpec("one_step_unrolled", gamma=1.0)).grad_alpha, 1e-8)
    s0 = BilevelState(np.zeros(1), np.array([1.0]))
    rev = estimate(scalar, s0, EstimatorSpec("reverse_mode", T=200, gamma=0.25)).grad_alpha
    add("scalar: reverse(T=200) == oracle", rev, scalar.oracle_exact_hypergradient([1.0]), 1e-8)
    worst = max(r["max_abs_diff"] for r in rows)
    return _report("equivalences", [("max_abs_diff", worst)], 1e-8, rows)


def default_convergence_trajectory(gamma_alpha=0.1):
    problem = make_preset("quad-scalar")
    cfg = SearchConfig(EstimatorSpec("neumann_k", K=3), T=10, gamma=0.25, gamma_alpha=gamma_alpha,
                       rounds=500, seed=0)
    return run_search(problem, cfg)


def run_default(name, seed=0):
    """Run check ``name`` on its documented default instance."""
    if name == "theorem1":
        scalar = check_theorem1_bound(make_preset("quad-scalar"), 0.25, range(4), [np.array([1.0])])
        q = quad_10d(seed=seed)
        gamma = 0.9 / float(np.linalg.eigvalsh(q.A)[-1])
        ten = check_theorem1_bound(q, gamma, range(21), rng=np.random.default_rng(seed))
        return _merge("theorem1", [scalar, ten])
    if name == "corollary2":
        a = check_corollary2(make_preset("quad-scalar"), 0.25, range(6), [np.array([1.0])])
        b = check_corollary2(quad_10d(seed=seed), 0.3, range(6), rng=np.random.default_rng(seed))
        return _merge("corollary2", [a, b])
    if name == "descent":
        q = quad_10d(seed=seed)
        gamma = 1.0 / float(np.linalg.eigvalsh(q.A)[-1])
        reps = [check_descent(q, gamma, K, 100, np.random.default_rng(seed + K)) for K in (0, 1, 3)]
        return _merge("descent", reps)
    if name == "unbiasedness":
        problem = ToySupernet()
        spec = EstimatorSpec("stochastic_neumann", K=2, gamma=0.1, batch_train=32, batch_val=32)
        return check_unbiasedness(problem, spec, 200, np.random.default_rng(seed))
    if name == "convergence":
        return check_convergence(default_convergence_trajectory(), 5, 1e-4)
    if name == "equivalences":
        return check_equivalences(seed)
    raise ConfigError(f"unknown check {name!r}; valid checks: {', '.join(CHECKS)}, all")


def _merge(name, reports):
    rows, measured = [], []
    for k, rep in enumerate(reports):
        rows.extend({"instance": k, **row} for row in rep.details)
        measured.extend((f"{label}[{k}]", value) for label, value in rep.measured)
    return _report(name, measured, reports[0].bound_or_threshold, rows)
