# %% [markdown]
# # Hypergradient estimators on a one-dimensional problem
#
# Inner loss L1(w, a) = w^2 - a*w, outer loss L2(w) = (w - 1)^2 / 2.
# The inner optimum is w*(a) = a/2, so the reduced objective is (a/2 - 1)^2 / 2
# and its exact gradient at a = 1 is -0.25.  Every estimator below is a
# different approximation of that number.

# %%
import numpy as np

from bihyper.estimators import EstimatorSpec, estimate
from bihyper.problems import BilevelState, make_preset

problem = make_preset("quad-scalar")
at_opt = BilevelState(np.array([0.5]), np.array([1.0]))
print("exact:", problem.oracle_exact_hypergradient([1.0]))

# %%
specs = [
    EstimatorSpec("one_step_unrolled", gamma=0.25),
    EstimatorSpec("t1t2"),
    EstimatorSpec("neumann_k", K=1, gamma=0.25),
    EstimatorSpec("neumann_k", K=3, gamma=0.25),
    EstimatorSpec("conjugate_gradient", S=1),
    EstimatorSpec("exact_ift"),
]
for spec in specs:
    est = estimate(problem, at_opt, spec)
    print(f"{spec.kind:<20} K={spec.K!s:<5} -> {est.grad_alpha[0]: .6f}  "
          f"hvps={est.hvp_count} peak vectors={est.stored_vector_peak}")

# %% [markdown]
# The Neumann error halves with every extra term here because 1 - gamma*mu = 0.5.

# %%
for K in range(8):
    g = estimate(problem, at_opt, EstimatorSpec("neumann_k", K=K, gamma=0.25)).grad_alpha[0]
    print(K, abs(g + 0.25), 0.25 * 0.5 ** (K + 1))

# %% [markdown]
# Unrolled differentiation from w0 = 0 approaches the same value as the
# horizon grows, at a memory cost linear in the retained steps.

# %%
start = BilevelState(np.zeros(1), np.array([1.0]))
for T in (1, 2, 5, 20, 200):
    est = estimate(problem, start, EstimatorSpec("reverse_mode", T=T, gamma=0.25))
    print(f"T={T:<4} {est.grad_alpha[0]: .10f}  peak vectors={est.stored_vector_peak}")
