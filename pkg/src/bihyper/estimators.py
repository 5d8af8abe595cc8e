"""Hypergradient estimators.

Each estimator returns an approximation of ``d/dalpha L2(w*(alpha), alpha)``
together with cost counters:

* ``hvp_count``: inner Hessian-vector products,
* ``grad_eval_count``: first-order gradient evaluations (inner or outer),
* ``stored_vector_peak``: peak number of simultaneously held ``w``-sized vectors,
  the current iterate included.  A dense ``n x n`` Hessian counts as ``n``.

Mixed second derivatives ``v . d2L1/dalpha dw`` are always taken by central
finite differences of ``dL1/dalpha``, except in ``exact_ift`` which prefers the
problem's analytic product when one exists.
"""
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .derivatives import DivergenceError, epsilon_rule_for
from .numerics import dense_solve
from .problems import BilevelState, ContractError, NotAvailableError, QuadraticBilevel

KINDS = (
    "exact_ift",
    "one_step_unrolled",
    "t1t2",
    "reverse_mode",
    "truncated_reverse",
    "neumann_k",
    "conjugate_gradient",
    "stochastic_neumann",
)

_USES_K = {"neumann_k", "stochastic_neumann", "truncated_reverse"}
_USES_T = {"reverse_mode", "truncated_reverse"}
_USES_S = {"conjugate_gradient"}
REVERSE_KINDS = _USES_T


class ConfigError(ValueError):
    pass


class CGBreakdownError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EstimatorSpec:
    """Which estimator to run and its hyperparameters.

    ``K`` is the number of extra Neumann terms for ``neumann_k`` and
    ``stochastic_neumann`` and the number of retained unrolled steps for
    ``truncated_reverse``.  ``batch_train``/``batch_val`` switch on minibatch
    mode (both ``None`` means full batch).
    """

    kind: str
    K: Optional[int] = None
    T: Optional[int] = None
    S: Optional[int] = None
    gamma: float = 0.01
    epsilon_scale: float = 0.01
    batch_train: Optional[int] = None
    batch_val: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown estimator kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        for name, users in (("K", _USES_K), ("T", _USES_T), ("S", _USES_S)):
            value = getattr(self, name)
            if self.kind in users and value is None:
                raise ConfigError(f"{self.kind} requires {name}")
            if self.kind not in users and value is not None:
                raise ConfigError(f"{name} does not apply to {self.kind}")
        if self.K is not None and self.K < (1 if self.kind == "truncated_reverse" else 0):
            raise ConfigError(f"K={self.K} out of range for {self.kind}")
        if self.T is not None and self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.kind == "truncated_reverse" and self.K > self.T:
            raise ConfigError("truncated_reverse needs 1 <= K (retained steps) <= T")
        if self.S is not None and self.S < 1:
            raise ConfigError("S must be >= 1")
        if not np.isfinite(self.gamma) or self.gamma < 0 or (
            self.gamma == 0 and self.kind != "one_step_unrolled"
        ):
            raise ConfigError("gamma must be > 0")
        if not self.epsilon_scale > 0:
            raise ConfigError("epsilon_scale must be > 0")
        if (self.batch_train is None) != (self.batch_val is None):
            raise ConfigError("set both batch_train and batch_val, or neither")
        if self.batch_train is not None and min(self.batch_train, self.batch_val) < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.kind == "stochastic_neumann" and self.batch_train is None:
            raise ConfigError("stochastic_neumann needs minibatch mode (batch_train, batch_val)")

    @property
    def minibatch(self):
        return self.batch_train is not None

    @property
    def epsilon_rule(self):
        return epsilon_rule_for(self.epsilon_scale)

    def check_problem(self, problem):
        """Reject a Neumann step size that cannot contract on a known quadratic."""
        if self.kind in ("neumann_k", "stochastic_neumann") and isinstance(problem, QuadraticBilevel):
            lam_max = float(np.linalg.eigvalsh(problem.A)[-1])
            if self.gamma * lam_max > 1.0 + 1e-12:
                raise ConfigError(
                    f"gamma*lambda_max(A) = {self.gamma * lam_max:.4g} > 1; the Neumann series "
                    "needs a smaller gamma"
                )


@dataclass
class HypergradientEstimate:
    grad_alpha: np.ndarray
    hvp_count: int
    grad_eval_count: int
    stored_vector_peak: int
    wall_ns: int
    w_final: Optional[np.ndarray] = field(default=None, repr=False)


class _Meter:
    """Counts the work an estimator does against ``problem``."""

    def __init__(self, problem, batch_train, eps_rule):
        self.problem = problem
        self.batch = batch_train
        self.eps_rule = eps_rule
        self.hvps = 0
        self.grads = 0
        self.live = 0
        self.peak = 0

    def hold(self, k=1):
        self.live += k
        self.peak = max(self.peak, self.live)

    def drop(self, k=1):
        self.live -= k

    def inner(self, w, alpha):
        self.grads += 1
        return self.problem.inner_grads(w, alpha, self.batch)

    def hvp(self, w, alpha, v):
        self.hvps += 1
        return self.problem.hvp_inner_ww(w, alpha, v, self.batch)

    def mixed(self, w, alpha, a):
        """``a . d2L1/dalpha dw`` by central differences; holds one perturbed copy of w."""
        if not np.any(a):
            return np.zeros(self.problem.n_alpha)
        eps = self.eps_rule(a)
        self.hold()
        _, _, g_plus = self.inner(w + eps * a, alpha)
        _, _, g_minus = self.inner(w - eps * a, alpha)
        self.drop()
        out = (g_plus - g_minus) / (2.0 * eps)
        if not np.all(np.isfinite(out)):
            raise DivergenceError("non-finite mixed product")
        return out

    def result(self, grad_alpha, t0, w_final=None):
        grad_alpha = np.asarray(grad_alpha, dtype=np.float64)
        if not np.all(np.isfinite(grad_alpha)):
            raise DivergenceError("hypergradient estimate is non-finite")
        return HypergradientEstimate(
            grad_alpha=grad_alpha,
            hvp_count=self.hvps,
            grad_eval_count=self.grads,
            stored_vector_peak=self.peak,
            wall_ns=time.perf_counter_ns() - t0,
            w_final=w_final,
        )


def _split_batches(batches):
    if batches is None:
        return None, None
    val_batch, train_batch = batches
    return val_batch, train_batch


def _start(problem, state, spec, batches, kinds):
    if spec.kind not in kinds:
        raise ConfigError(f"estimator expects kind in {kinds}, got {spec.kind!r}")
    spec.check_problem(problem)
    val_batch, train_batch = _split_batches(batches)
    meter = _Meter(problem, train_batch, spec.epsilon_rule)
    meter.hold()  # the iterate w
    meter.grads += 1
    _, g_w, g_a = problem.outer_grads(state.w, state.alpha, val_batch)
    meter.hold()  # dL2/dw
    return meter, g_w, g_a


def estimate_one_step_unrolled(problem, state, spec, batches=None):
    """``dL2/dalpha - gamma * (dL2/dw . d2L1/dalpha dw)`` at the given state."""
    t0 = time.perf_counter_ns()
    meter, g_w, g_a = _start(problem, state, spec, batches, ("one_step_unrolled",))
    corr = meter.mixed(state.w, state.alpha, g_w) if spec.gamma else np.zeros_like(g_a)
    return meter.result(g_a - spec.gamma * corr, t0)


def estimate_t1t2(problem, state, spec, batches=None):
    """Identity in place of the inverse Hessian."""
    t0 = time.perf_counter_ns()
    meter, g_w, g_a = _start(problem, state, spec, batches, ("t1t2",))
    return meter.result(g_a - meter.mixed(state.w, state.alpha, g_w), t0)


def _neumann(problem, state, spec, batches, kinds):
    t0 = time.perf_counter_ns()
    meter, g_w, g_a = _start(problem, state, spec, batches, kinds)
    w, alpha, gamma = state.w, state.alpha, spec.gamma
    v = g_w
    total = g_w.copy()
    meter.hold()
    for k in range(1, spec.K + 1):
        meter.hold()
        hv = meter.hvp(w, alpha, v)
        v = v - gamma * hv
        meter.drop()
        if not np.all(np.isfinite(v)):
            raise DivergenceError(
                f"Neumann term V_{k} is non-finite; gamma={gamma} is too large", step=k)
        total = total + v
    return meter.result(g_a - gamma * meter.mixed(w, alpha, total), t0)


def estimate_neumann_k(problem, state, spec, batches=None):
    """Neumann series truncated after ``K`` extra terms (``K`` HVPs)."""
    return _neumann(problem, state, spec, batches, ("neumann_k",))


def estimate_stochastic_neumann(problem, state, spec, batches):
    """Neumann estimator on a validation minibatch ``i`` and a training minibatch ``j``.

    ``batches`` is ``(i, j)``; the same ``j`` feeds every HVP and both mixed
    product evaluations.
    """
    if batches is None or any(b is None for b in batches):
        raise ContractError("stochastic_neumann needs explicit (val, train) batches")
    return _neumann(problem, state, spec, batches, ("stochastic_neumann",))


def estimate_exact_ift(problem, state, spec, batches=None):
    """Dense inverse-Hessian hypergradient; the in-library oracle."""
    t0 = time.perf_counter_ns()
    meter, g_w, g_a = _start(problem, state, spec, batches, ("exact_ift",))
    H = problem.hessian_ww(state.w, state.alpha, meter.batch)
    meter.hold(problem.n_w)
    x = dense_solve(H.T, g_w)
    meter.hold()
    try:
        corr = problem.mixed_product_analytic(state.w, state.alpha, x, meter.batch)
    except NotAvailableError:
        corr = meter.mixed(state.w, state.alpha, x)
    return meter.result(g_a - corr, t0)


def estimate_cg(problem, state, spec, batches=None):
    """Conjugate gradient on ``H x = dL2/dw`` from ``x = 0`` (at most ``S`` HVPs)."""
    t0 = time.perf_counter_ns()
    meter, g_w, g_a = _start(problem, state, spec, batches, ("conjugate_gradient",))
    w, alpha = state.w, state.alpha
    x = np.zeros_like(g_w)
    r = g_w.copy()
    p = r.copy()
    meter.hold(4)  # x, r, p, Hp
    rs = r @ r
    tol = (1e-14 * np.linalg.norm(g_w)) ** 2
    for _ in range(spec.S):
        if rs <= tol:
            break
        Hp = meter.hvp(w, alpha, p)
        curv = p @ Hp
        if curv <= 1e-14 * (p @ p):
            raise CGBreakdownError(f"non-positive curvature p'Hp = {curv:.3e}")
        step = rs / curv
        x = x + step * p
        r = r - step * Hp
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    meter.drop(3)
    return meter.result(g_a - meter.mixed(w, alpha, x), t0)


def _unrolled(problem, state, spec, batches, retained, kinds):
    """Run ``T`` inner steps keeping the last ``retained`` iterates, then backpropagate.

    With ``Phi(w) = w - gamma dL1/dw``: ``A_t = I - gamma H(w_{t-1})`` and
    ``g . B_t = -gamma g . d2L1/dalpha dw (w_{t-1})``.  Initial weights are
    treated as independent of alpha.
    """
    t0 = time.perf_counter_ns()
    if spec.kind not in kinds:
        raise ConfigError(f"estimator expects kind in {kinds}, got {spec.kind!r}")
    val_batch, train_batch = _split_batches(batches)
    meter = _Meter(problem, train_batch, spec.epsilon_rule)
    alpha, gamma, T = state.alpha, spec.gamma, spec.T
    w = state.w.copy()
    meter.hold()
    tape = []
    for t in range(1, T + 1):
        if T - t < retained:
            tape.append(w)
            meter.hold()
        _, g, _ = meter.inner(w, alpha)
        w = w - gamma * g
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"inner iterate w_{t} is non-finite", step=t)
    meter.grads += 1
    _, g_w, g_a = problem.outer_grads(w, alpha, val_batch)
    meter.hold()
    hyper = g_a.copy()
    v = g_w
    for back, w_prev in enumerate(reversed(tape)):
        hyper = hyper - gamma * meter.mixed(w_prev, alpha, v)
        if back + 1 < len(tape):
            meter.hold()
            v = v - gamma * meter.hvp(w_prev, alpha, v)
            meter.drop()
    return meter.result(hyper, t0, w_final=w)


def estimate_reverse_mode(problem, state, spec, batches=None):
    """Differentiate through all ``T`` inner gradient steps from ``state.w``."""
    return _unrolled(problem, state, spec, batches, spec.T, ("reverse_mode",))


def estimate_truncated_reverse(problem, state, spec, batches=None):
    """Like reverse mode but only the last ``K`` steps contribute."""
    return _unrolled(problem, state, spec, batches, spec.K, ("truncated_reverse",))


ESTIMATORS = {
    "exact_ift": estimate_exact_ift,
    "one_step_unrolled": estimate_one_step_unrolled,
    "t1t2": estimate_t1t2,
    "reverse_mode": estimate_reverse_mode,
    "truncated_reverse": estimate_truncated_reverse,
    "neumann_k": estimate_neumann_k,
    "conjugate_gradient": estimate_cg,
    "stochastic_neumann": estimate_stochastic_neumann,
}


def estimate(problem, state, spec, batches=None):
    if not isinstance(state, BilevelState):
        raise ContractError("state must be a BilevelState")
    return ESTIMATORS[spec.kind](problem, state, spec, batches)
