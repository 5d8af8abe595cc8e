"""Second-order products built from first-order gradients.

* ``neumann_sum_vector``: ``V_0 + ... + V_K`` with ``V_k = V_{k-1}(I - gamma H)``,
  one Hessian-vector product per term.
* ``finite_diff_mixed_product``: ``a . d2L1/dalpha dw`` from two evaluations of
  ``dL1/dalpha`` at ``w +/- eps a``.
* ``hvp_numeric``: the same two-sided trick on ``dL1/dw``, for problems that
  have no analytic Hessian.
"""
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, NonFiniteError


class DivergenceError(ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def default_epsilon(a, scale=0.01):
    """Perturbation size ``scale / |a|``, so the displacement has norm ``scale``."""
    return scale / np.linalg.norm(a)


def epsilon_rule_for(scale):
    def rule(a):
        return default_epsilon(a, scale)

    return rule


@dataclass
class NeumannAccumulator:
    v_current: np.ndarray
    v_sum: np.ndarray
    k: int
    gamma: float
    hvp_count: int = 0


def neumann_sum_vector(problem, w, alpha, v0, K, gamma, batch=None):
    """Return ``(sum_{k<=K} V_k, accumulator)`` using exactly ``K`` HVPs."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    if K < 0:
        raise ValueError("K must be >= 0")
    v0 = np.asarray(v0, dtype=np.float64)
    if v0.shape != (problem.n_w,):
        raise DimensionError(f"v0 has shape {v0.shape}, expected ({problem.n_w},)")
    acc = NeumannAccumulator(v0.copy(), v0.copy(), 0, float(gamma))
    for k in range(1, K + 1):
        hv = problem.hvp_inner_ww(w, alpha, acc.v_current, batch)
        acc.hvp_count += 1
        acc.v_current = acc.v_current - gamma * hv
        if not np.all(np.isfinite(acc.v_current)):
            raise DivergenceError(
                f"Neumann term V_{k} is non-finite; gamma={gamma} is too large "
                "for the inner curvature", step=k)
        acc.v_sum = acc.v_sum + acc.v_current
        acc.k = k
    return acc.v_sum, acc


def finite_diff_mixed_product(problem, w, alpha, a_vec, batch=None, epsilon_rule=default_epsilon):
    """Central-difference estimate of ``a . d2L1/dalpha dw`` (length ``n_alpha``).

    Both perturbed gradients use the same ``batch``.  ``w`` is never modified.
    """
    a_vec = np.asarray(a_vec, dtype=np.float64)
    if a_vec.shape != (problem.n_w,):
        raise DimensionError(f"a_vec has shape {a_vec.shape}, expected ({problem.n_w},)")
    if not np.any(a_vec):
        return np.zeros(problem.n_alpha)
    eps = epsilon_rule(a_vec)
    _, _, g_plus = problem.inner_grads(w + eps * a_vec, alpha, batch)
    _, _, g_minus = problem.inner_grads(w - eps * a_vec, alpha, batch)
    out = (g_plus - g_minus) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite gradient in mixed-product finite difference")
    return out


def hvp_numeric(problem, w, alpha, v, batch=None, epsilon_rule=default_epsilon):
    """Central difference of ``dL1/dw`` along ``v``; exact on quadratics."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (problem.n_w,):
        raise DimensionError(f"v has shape {v.shape}, expected ({problem.n_w},)")
    if not np.any(v):
        return np.zeros(problem.n_w)
    eps = epsilon_rule(v)
    _, g_plus, _ = problem.inner_grads(w + eps * v, alpha, batch)
    _, g_minus, _ = problem.inner_grads(w - eps * v, alpha, batch)
    out = (g_plus - g_minus) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite gradient in HVP finite difference")
    return out
