# %% [markdown]
# # How fast does the Neumann truncation error decay?
#
# On a random 10-d strongly convex quadratic we compare the measured error
# of the K-term estimator, at the exact inner optimum, with the bound
# |B| |dL2/dw| / mu * (1 - gamma mu)^(K+1).

# %%
import numpy as np

from bihyper.estimators import EstimatorSpec, estimate
from bihyper.problems import BilevelState, quad_10d, theory_constants

problem = quad_10d(seed=0)
eig = np.linalg.eigvalsh(problem.A)
gamma = 1.0 / eig[-1]
alpha = np.random.default_rng(0).standard_normal(problem.n_alpha)
w_star = problem.inner_closed_form(alpha)
tc = theory_constants(problem, [w_star], gamma)
exact = problem.oracle_exact_hypergradient(alpha)
print(f"mu={tc.mu:.3f} lambda_max={eig[-1]:.3f} gamma={gamma:.3f} rate={1 - gamma * tc.mu:.3f}")

# %%
print(" K      error        bound")
for K in range(0, 21, 2):
    g = estimate(problem, BilevelState(w_star, alpha), EstimatorSpec("neumann_k", K=K, gamma=gamma)).grad_alpha
    print(f"{K:2d}  {np.linalg.norm(g - exact):.3e}  {tc.bound(K):.3e}")

# %% [markdown]
# The same numbers through the verification module, with the pass/fail table.

# %%
from bihyper.verify import check_corollary2, check_theorem1_bound

report = check_theorem1_bound(problem, gamma, range(21), rng=np.random.default_rng(1))
print(report.summary())
print(check_corollary2(problem, gamma, range(6)).summary())
