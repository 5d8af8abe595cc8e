"""Alternating bilevel search: T inner SGD steps, then one hypergradient step on alpha."""
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .derivatives import DivergenceError
from .estimators import REVERSE_KINDS, ConfigError, EstimatorSpec, estimate
from .problems import BilevelState, QuadraticBilevel, ToySupernet, sample_minibatch

CONVERGENCE_THRESHOLD = 1e-5
CONVERGENCE_WINDOW = 5


class SearchError(RuntimeError):
    """A round failed; ``trajectory`` holds every completed round."""

    def __init__(self, message, round_index, trajectory):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index
        self.trajectory = trajectory


@dataclass(frozen=True)
class SearchConfig:
    estimator: EstimatorSpec
    T: int = 1
    gamma: float = 0.01
    gamma_alpha: float = 0.01
    rounds: int = 100
    seed: int = 0
    record_oracle_error: bool = False
    gamma_alpha_schedule: str = "constant"
    gamma_alpha_floor: float = 0.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if not (np.isfinite(self.gamma_alpha) and self.gamma_alpha >= 0):
            raise ConfigError("gamma_alpha must be >= 0")
        if self.gamma_alpha_schedule not in ("constant", "cosine"):
            raise ConfigError("gamma_alpha_schedule must be 'constant' or 'cosine'")
        if not 0 <= self.gamma_alpha_floor <= self.gamma_alpha:
            raise ConfigError("gamma_alpha_floor must lie in [0, gamma_alpha]")
        self.round_spec()

    def round_spec(self):
        """Estimator spec with the search's inner step size (and T for unrolled kinds)."""
        changes = {"gamma": self.gamma}
        if self.estimator.kind in REVERSE_KINDS:
            changes["T"] = self.T
        return replace(self.estimator, **changes)

    def outer_lr(self, round_index):
        if self.gamma_alpha_schedule == "constant":
            return self.gamma_alpha
        frac = round_index / self.rounds
        lo = self.gamma_alpha_floor
        return lo + 0.5 * (self.gamma_alpha - lo) * (1.0 + math.cos(math.pi * frac))


@dataclass
class RoundRecord:
    round: int
    inner_loss: float
    outer_loss: float
    hyper_norm: float
    hyper_oracle_err: Optional[float]
    alpha_hash: str
    wall_ns: int
    hvp_count_cum: int
    stored_vector_peak: int


@dataclass
class SearchTrajectory:
    problem: str
    config: SearchConfig
    records: list = field(default_factory=list)
    alpha: Optional[np.ndarray] = None
    architecture: Optional[tuple] = None
    converged: bool = False
    final_state: Optional[BilevelState] = field(default=None, repr=False)

    def hyper_norms(self):
        return np.array([r.hyper_norm for r in self.records])

    def to_json(self):
        doc = {
            "problem": self.problem,
            "config": asdict(self.config),
            "rounds": [asdict(r) for r in self.records],
            "final": {
                "alpha": None if self.alpha is None else self.alpha.tolist(),
                "architecture": None if self.architecture is None else list(self.architecture),
                "converged": self.converged,
            },
        }
        return json.dumps(doc, indent=1)


def discretize_argmax(alpha, layout):
    """Per-edge argmax of the logits; ties go to the lowest op index."""
    n_edges, n_ops = layout
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size != n_edges * n_ops:
        raise ConfigError(f"alpha of length {alpha.size} does not fit layout {layout}")
    return tuple(int(i) for i in np.argmax(alpha.reshape(n_edges, n_ops), axis=1))


def inner_descend(problem, state, T, gamma, rng=None, batch_size=None):
    """``T`` plain gradient steps on L1; a fresh train minibatch per step when ``batch_size`` is set."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    w = state.w
    for t in range(T):
        batch = None if batch_size is None else sample_minibatch(problem, "train", batch_size, rng)
        _, g, _ = problem.inner_grads(w, state.alpha, batch)
        w = w - gamma * g
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"inner weights non-finite after step {t + 1}", step=t + 1)
    return BilevelState(w, state.alpha.copy(), state.inner_step_count + T, state.outer_step_count)


def _estimator_batches(problem, spec, rng):
    if not spec.minibatch:
        return None
    j = sample_minibatch(problem, "train", min(spec.batch_train, problem.n_train), rng)
    i = sample_minibatch(problem, "val", min(spec.batch_val, problem.n_val), rng)
    return i, j


def algorithm1_round(problem, state, config, rng, round_index=0, hvp_count_cum=0):
    """One round: inner descent, hypergradient on fresh batches, alpha step.

    Returns ``(new_state, record)``.  For reverse-mode estimators the unrolled
    inner steps are the inner descent, so they are not run twice.
    """
    t0 = time.perf_counter_ns()
    spec = config.round_spec()
    if spec.kind in REVERSE_KINDS:
        batches = _estimator_batches(problem, spec, rng)
        est = estimate(problem, state, spec, batches)
        inner = BilevelState(est.w_final, state.alpha.copy(),
                             state.inner_step_count + config.T, state.outer_step_count)
    else:
        inner = inner_descend(problem, state, config.T, config.gamma, rng, spec.batch_train)
        batches = _estimator_batches(problem, spec, rng)
        est = estimate(problem, inner, spec, batches)

    g = est.grad_alpha
    oracle_err = None
    if config.record_oracle_error and isinstance(problem, QuadraticBilevel):
        oracle_err = float(np.linalg.norm(g - problem.oracle_exact_hypergradient(inner.alpha)))
    inner_loss = problem.inner_loss(inner.w, inner.alpha)
    outer_loss = problem.outer_loss(inner.w, inner.alpha)

    alpha = inner.alpha - config.outer_lr(round_index) * g
    if not np.all(np.isfinite(alpha)):
        raise DivergenceError("alpha became non-finite")
    new_state = BilevelState(inner.w, alpha, inner.inner_step_count, inner.outer_step_count + 1)
    record = RoundRecord(
        round=round_index,
        inner_loss=inner_loss,
        outer_loss=outer_loss,
        hyper_norm=float(np.linalg.norm(g)),
        hyper_oracle_err=oracle_err,
        alpha_hash=hashlib.sha256(alpha.tobytes()).hexdigest()[:16],
        wall_ns=time.perf_counter_ns() - t0,
        hvp_count_cum=hvp_count_cum + est.hvp_count,
        stored_vector_peak=est.stored_vector_peak,
    )
    return new_state, record


def run_search(problem, config, initial_state=None):
    rng = np.random.default_rng(config.seed)
    state = problem.initial_state(rng) if initial_state is None else initial_state.copy()
    traj = SearchTrajectory(problem=problem.name, config=config)
    hvp_cum = 0
    for r in range(config.rounds):
        try:
            state, rec = algorithm1_round(problem, state, config, rng, r, hvp_cum)
        except (ArithmeticError, ValueError) as exc:
            traj.alpha = state.alpha
            raise SearchError(str(exc), r, traj) from exc
        hvp_cum = rec.hvp_count_cum
        traj.records.append(rec)
    traj.alpha = state.alpha
    traj.final_state = state
    if isinstance(problem, ToySupernet):
        traj.architecture = discretize_argmax(state.alpha, (problem.n_edges, problem.n_ops))
    tail = traj.hyper_norms()[-CONVERGENCE_WINDOW:]
    traj.converged = bool(len(tail) == CONVERGENCE_WINDOW and np.all(tail < CONVERGENCE_THRESHOLD))
    return traj


def recovery_rate(problem, config, seeds, target):
    """Fraction of seeds whose discretized architecture equals ``target``."""
    found = []
    for s in seeds:
        traj = run_search(problem, replace(config, seed=int(s)))
        found.append(traj.architecture)
    hits = sum(a == tuple(target) for a in found)
    return hits / len(found), found


TOY_ROUNDS = 1000
TOY_BATCH = 32


def toy_search_config(method="idarts", seed=0, rounds=TOY_ROUNDS):
    """Search settings used for the supernet comparison.

    ``idarts`` is stochastic Neumann with K=2 after T=4 inner steps; ``darts``
    is the one-step unrolled estimator after a single step.  Everything else
    (step sizes, batch sizes, rounds) is shared.
    """
    if method == "idarts":
        spec, T = EstimatorSpec("stochastic_neumann", K=2, batch_train=TOY_BATCH, batch_val=TOY_BATCH), 4
    elif method == "darts":
        spec, T = EstimatorSpec("one_step_unrolled", batch_train=TOY_BATCH, batch_val=TOY_BATCH), 1
    else:
        raise ConfigError(f"unknown toy method {method!r}; use 'idarts' or 'darts'")
    return SearchConfig(spec, T=T, gamma=0.1, gamma_alpha=0.05, rounds=rounds, seed=seed)
