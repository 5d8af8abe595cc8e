"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in an "acceptance criteria" section at the end of the pytest report.
"""
import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from oracles import fd_gradient, fd_jacobian4
from bihyper.derivatives import finite_diff_mixed_product
from bihyper.estimators import EstimatorSpec, estimate
from bihyper.problems import BilevelState, ToySupernet, enumerate_and_rank, make_preset, quad_10d
from bihyper.search import run_search, toy_search_config
from bihyper.verify import (
    check_convergence,
    check_corollary2,
    check_equivalences,
    check_theorem1_bound,
    check_unbiasedness,
    default_convergence_trajectory,
)

OUT_DIR = os.environ.get("BIHYPER_ACCEPTANCE_OUT",
                         os.path.join(os.path.dirname(os.path.dirname(__file__)), "acceptance_results"))
N_STATES = 20


def _at_opt(p, alpha):
    alpha = np.asarray(alpha, dtype=float)
    return BilevelState(p.inner_closed_form(alpha), alpha)


def test_criterion1_truncation_bound(acceptance):
    t0 = time.perf_counter()
    scalar = make_preset("quad-scalar")
    state = _at_opt(scalar, [1.0])
    expected = {0: -0.125, 1: -0.1875, 2: -0.21875, 3: -0.234375}
    worst_val = 0.0
    for K, value in expected.items():
        est = estimate(scalar, state, EstimatorSpec("neumann_k", K=K, gamma=0.25)).grad_alpha[0]
        err = abs(est - (-0.25))
        worst_val = max(worst_val, abs(est - value), abs(err - 0.25 * 0.5 ** (K + 1)))
    reports = [check_theorem1_bound(quad_10d(seed=s), 0.3, range(21), rng=np.random.default_rng(s))
               for s in range(5)]
    ratio = max(dict(r.measured)["max_error_over_bound"] for r in reports)
    elapsed = time.perf_counter() - t0
    ok = worst_val <= 1e-10 and all(r.passed for r in reports) and elapsed < 1.0
    acceptance(1, "Neumann truncation bound", ok,
               f"scalar max deviation {worst_val:.2e} (tol 1e-10); 10-d max error/bound {ratio:.3f} "
               f"over 5 instances x 5 alphas x K=0..20; {elapsed:.2f}s (< 1s)")


def test_criterion2_truncated_backprop_equivalence(acceptance):
    t0 = time.perf_counter()
    a = check_corollary2(make_preset("quad-scalar"), 0.25, range(6), [np.array([1.0])])
    b = check_corollary2(quad_10d(seed=0), 0.3, range(6), rng=np.random.default_rng(0))
    worst = max(a.measured[0][1], b.measured[0][1])
    elapsed = time.perf_counter() - t0
    ok = a.passed and b.passed and worst <= 1e-10 and elapsed < 1.0
    acceptance(2, "truncated reverse (K+1 steps) == Neumann(K)", ok,
               f"max |diff| {worst:.2e} for K=0..5 on scalar and 10-d (tol 1e-10); {elapsed:.2f}s (< 1s)")


def test_criterion3_estimator_lattice(acceptance):
    t0 = time.perf_counter()
    rep = check_equivalences(seed=0)
    by_case = {}
    for row in rep.details:
        key = row["case"].split(": ", 1)[1]
        by_case[key] = max(by_case.get(key, 0.0), row["max_abs_diff"])
    elapsed = time.perf_counter() - t0
    ok = (rep.passed and by_case["neumann(K=0) == one_step"] <= 1e-12
          and by_case["cg(S=dim) == exact_ift"] <= 1e-8 and by_case["exact_ift == oracle"] <= 1e-8
          and by_case["reverse(T=200) == oracle"] <= 1e-8 and elapsed < 5.0)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in by_case.items())
    acceptance(3, "estimator lattice", ok, f"{detail}; {elapsed:.2f}s (< 5s)")


def test_criterion4_finite_difference_mixed_product(acceptance):
    rng = np.random.default_rng(4)
    quad_worst = 0.0
    for p in (make_preset("quad-scalar"), quad_10d(seed=1)):
        for _ in range(N_STATES):
            w, a, v = rng.standard_normal(p.n_w), rng.standard_normal(p.n_alpha), rng.standard_normal(p.n_w)
            ref = p.mixed_product_analytic(w, a, v)
            got = finite_diff_mixed_product(p, w, a, v)
            quad_worst = max(quad_worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    net = ToySupernet()
    net_worst = 0.0
    for _ in range(N_STATES):
        w = 0.3 * rng.standard_normal(net.n_w)
        a = rng.standard_normal(net.n_alpha)
        v = rng.standard_normal(net.n_w)
        J = fd_jacobian4(lambda x: net.inner_grads(w, x)[1], a)  # d(dL1/dw)/d(alpha)
        ref = v @ J
        got = finite_diff_mixed_product(net, w, a, v)
        net_worst = max(net_worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    ok = quad_worst <= 1e-12 and net_worst <= 5e-4
    acceptance(4, "finite-difference mixed product", ok,
               f"quadratic max rel err {quad_worst:.1e} (tol 1e-12); supernet max rel err {net_worst:.1e} "
               f"(tol 5e-4); {N_STATES} states each")


def _close(analytic, numeric, tol=1e-6):
    return np.max(np.abs(analytic - numeric)) <= tol + tol * np.linalg.norm(analytic)


def test_criterion5_gradient_hygiene(acceptance):
    rng = np.random.default_rng(5)
    problems = {"quad-scalar": make_preset("quad-scalar"), "quad-10d": make_preset("quad-10d"),
                "ridge-20f": make_preset("ridge-20f"), "toynas": ToySupernet()}
    failures, checks = [], 0
    for name, p in problems.items():
        for _ in range(N_STATES):
            scale = 0.3 if name == "toynas" else 1.0
            w, a = scale * rng.standard_normal(p.n_w), rng.standard_normal(p.n_alpha)
            for which, fn in (("inner", p.inner_grads), ("outer", p.outer_grads)):
                _, gw, ga = fn(w, a)
                checks += 2
                if not _close(gw, fd_gradient(lambda x: fn(x, a)[0], w)):
                    failures.append(f"{name} {which} d/dw")
                if not _close(ga, fd_gradient(lambda x: fn(w, x)[0], a)):
                    failures.append(f"{name} {which} d/dalpha")
            if name != "toynas":  # analytic second-order products
                v = rng.standard_normal(p.n_w)
                hv = p.hvp_inner_ww(w, a, v)
                checks += 2
                if not _close(hv, fd_gradient(lambda x: p.inner_grads(x, a)[1] @ v, w)):
                    failures.append(f"{name} hvp")
                mixed = p.mixed_product_analytic(w, a, v)
                if not _close(mixed, fd_gradient(lambda x: p.inner_grads(w, x)[1] @ v, a)):
                    failures.append(f"{name} mixed")
    ok = not failures
    acceptance(5, "gradient hygiene", ok,
               f"{checks} gradient/HVP comparisons over {N_STATES} states per problem; "
               f"failures: {sorted(set(failures)) or 'none'}")


def test_criterion6_search_convergence(acceptance):
    t0 = time.perf_counter()
    good = default_convergence_trajectory(gamma_alpha=0.1)
    again = default_convergence_trajectory(gamma_alpha=0.1)
    bad = default_convergence_trajectory(gamma_alpha=10.0)
    elapsed = time.perf_counter() - t0
    alpha_err = abs(good.alpha[0] - 2.0)
    tail = float(np.mean(good.hyper_norms()[-5:]))
    deterministic = [r.alpha_hash for r in good.records] == [r.alpha_hash for r in again.records]
    conv_good = check_convergence(good, 5, 1e-4).passed
    conv_bad = check_convergence(bad, 5, 1e-4).passed
    ok = (alpha_err <= 1e-3 and tail < 1e-4 and deterministic and conv_good and good.converged
          and not conv_bad and not bad.converged and elapsed < 10.0)
    acceptance(6, "outer-loop convergence", ok,
               f"|alpha-2| {alpha_err:.1e} (tol 1e-3), trailing hyper_norm {tail:.1e} (< 1e-4), "
               f"deterministic={deterministic}, gamma_alpha=10 flagged non-convergent={not bad.converged}; "
               f"{elapsed:.2f}s for 3 runs (< 10s)")


def test_criterion7_cost_accounting(acceptance):
    p = quad_10d(seed=0)
    state = _at_opt(p, np.ones(5))
    neu, trunc = {}, {}
    for n in (1, 2, 4, 8):
        e = estimate(p, state, EstimatorSpec("neumann_k", K=n, gamma=0.3))
        neu[n] = (e.hvp_count, e.stored_vector_peak)
        e = estimate(p, state, EstimatorSpec("truncated_reverse", K=n, T=8, gamma=0.3))
        trunc[n] = (e.hvp_count, e.stored_vector_peak)
    ok_neu = all(neu[n] == (n, 4) for n in neu)
    ok_trunc = all(trunc[n] == (n - 1, n + 3) for n in trunc)
    acceptance(7, "cost accounting", ok_neu and ok_trunc,
               f"neumann K->(hvp, peak) {neu} (expect (K, 4)); truncated r->(hvp, peak) {trunc} "
               f"(expect (r-1, r+3))")


def _toy_run(method, seed):
    return run_search(ToySupernet(), toy_search_config(method, seed=seed)).architecture


def test_criterion8_toy_search_quality(acceptance):
    t0 = time.perf_counter()
    net = ToySupernet()
    best = enumerate_and_rank(net)[0].arch
    seeds = list(range(20))
    jobs = [(m, s) for m in ("idarts", "darts") for s in seeds]
    workers = min(4, os.cpu_count() or 1)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        found = list(pool.map(_toy_run, *zip(*jobs)))
    arch = {job: a for job, a in zip(jobs, found)}
    rates = {m: sum(arch[(m, s)] == best for s in seeds) / len(seeds) for m in ("idarts", "darts")}
    elapsed = time.perf_counter() - t0

    os.makedirs(OUT_DIR, exist_ok=True)
    with open(os.path.join(OUT_DIR, "toy_recovery.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "seed", "architecture", "recovered"])
        for (m, s), a in arch.items():
            w.writerow([m, s, "-".join(map(str, a)), int(a == best)])
        w.writerow([])
        w.writerow(["method", "recovery_rate", "best_architecture"])
        for m, r in rates.items():
            w.writerow([m, r, "-".join(map(str, best))])

    ok = rates["idarts"] >= 0.8 and rates["idarts"] > rates["darts"] and elapsed < 300
    acceptance(8, "toy search quality", ok,
               f"brute-force best {best}; iDARTS (T=4, K=2) {rates['idarts']:.0%} vs DARTS (T=1, K=0) "
               f"{rates['darts']:.0%} over 20 seeds (need >= 80% and strictly more); {elapsed:.0f}s (< 300s); "
               f"CSV: {os.path.join(OUT_DIR, 'toy_recovery.csv')}")


def test_criterion9_stochastic_unbiasedness(acceptance):
    t0 = time.perf_counter()
    net = ToySupernet()
    spec = EstimatorSpec("stochastic_neumann", K=2, gamma=0.1, batch_train=32, batch_val=32)
    rep = check_unbiasedness(net, spec, 200, np.random.default_rng(0))
    full_spec = EstimatorSpec("stochastic_neumann", K=2, gamma=0.1, batch_train=net.n_train, batch_val=net.n_val)
    full = check_unbiasedness(net, full_spec, 5, np.random.default_rng(1))
    exact_zero = all(r["z"] == 0.0 and r["mean"] == r["full"] for r in full.details)
    elapsed = time.perf_counter() - t0
    worst = dict(rep.measured)["worst_z"]
    ok = rep.passed and full.passed and exact_zero and elapsed < 60
    acceptance(9, "stochastic unbiasedness", ok,
               f"worst |z| {worst:.2f} over 12 coordinates, 200 draws, batch 32 (<= 3); full batches give "
               f"exact equality={exact_zero}; {elapsed:.1f}s (< 60s)")
