"""Bilevel problem definitions.

Every problem exposes an inner (training) loss ``L1(w, alpha)`` and an outer
(validation) loss ``L2(w, alpha)`` together with their partial gradients and
the inner Hessian-vector product.  Three families are provided:

* ``QuadraticBilevel``: ``L1 = 1/2 w'Aw - w'B alpha``,
  ``L2 = 1/2 |w - c|^2 + lambda/2 |alpha|^2``.  Closed-form inner solution and
  exact hypergradient.
* ``RidgeHyperopt``: per-feature log ridge strengths tuned on a validation set.
* ``ToySupernet``: a 3-node DARTS-style cell whose 64 discrete architectures
  can be enumerated and trained one by one.
"""
import itertools
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DimensionError,
    NonFiniteError,
    as_matrix,
    as_vector,
    dense_solve,
    is_spd,
)


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class NotAvailableError(NotImplementedError):
    """The problem offers no analytic path for the requested quantity."""


@dataclass
class BilevelState:
    w: np.ndarray
    alpha: np.ndarray
    inner_step_count: int = 0
    outer_step_count: int = 0

    def copy(self):
        return BilevelState(self.w.copy(), self.alpha.copy(),
                            self.inner_step_count, self.outer_step_count)


@dataclass(frozen=True, eq=False)
class Batch:
    """Sorted, unique sample indices drawn from one split."""

    indices: np.ndarray
    source: str

    def __post_init__(self):
        if self.source not in ("train", "val"):
            raise ContractError(f"batch source must be 'train' or 'val', got {self.source!r}")
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ContractError("batch needs at least one index")
        if np.any(np.diff(idx) <= 0):
            raise ContractError("batch indices must be sorted and unique")
        if idx[0] < 0:
            raise ContractError("negative batch index")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)


def sample_minibatch(problem, source, size, rng):
    """Uniform sample without replacement from the ``source`` split."""
    n = problem.split_size(source)
    if size < 1 or size > n:
        raise ContractError(f"batch size {size} outside [1, {n}] for split {source!r}")
    idx = np.sort(rng.choice(n, size=size, replace=False))
    return Batch(idx, source)


class BilevelProblem:
    """Common interface; subclasses implement the loss/gradient methods."""

    name = "problem"
    n_w = 0
    n_alpha = 0
    n_train = 1
    n_val = 1

    def split_size(self, source):
        if source == "train":
            return self.n_train
        if source == "val":
            return self.n_val
        raise ContractError(f"unknown split {source!r}")

    def _check_batch(self, batch, source):
        if batch is None:
            return
        if batch.source != source:
            loss = "L1" if source == "train" else "L2"
            raise ContractError(f"{loss} needs a {source} batch, got a {batch.source} batch")
        if batch.indices[-1] >= self.split_size(source):
            raise ContractError("batch index out of range")

    def _check_dims(self, w, alpha):
        if w.shape != (self.n_w,) or alpha.shape != (self.n_alpha,):
            raise DimensionError(
                f"expected w[{self.n_w}], alpha[{self.n_alpha}]; got {w.shape}, {alpha.shape}"
            )

    def inner_grads(self, w, alpha, batch=None):
        """Return ``(L1, dL1/dw, dL1/dalpha)`` averaged over ``batch`` (None = full split)."""
        raise NotImplementedError

    def outer_grads(self, w, alpha, batch=None):
        """Return ``(L2, dL2/dw, dL2/dalpha)``."""
        raise NotImplementedError

    def inner_loss(self, w, alpha, batch=None):
        return self.inner_grads(w, alpha, batch)[0]

    def outer_loss(self, w, alpha, batch=None):
        return self.outer_grads(w, alpha, batch)[0]

    def hvp_inner_ww(self, w, alpha, v, batch=None):
        """``v . d2L1/dw dw``; numeric fallback via central differences of grad_w."""
        from .derivatives import hvp_numeric

        return hvp_numeric(self, w, alpha, v, batch)

    def hessian_ww(self, w, alpha, batch=None):
        """Dense inner Hessian, assembled column by column from HVPs."""
        n = self.n_w
        if n >= 2000:
            raise ContractError(f"refusing to assemble a {n}x{n} Hessian")
        eye = np.eye(n)
        cols = [self.hvp_inner_ww(w, alpha, eye[k], batch) for k in range(n)]
        H = np.column_stack(cols)
        return 0.5 * (H + H.T)

    def mixed_product_analytic(self, w, alpha, v, batch=None):
        raise NotAvailableError(f"{self.name} has no analytic mixed product")

    def initial_state(self, rng):
        w = 0.1 * rng.standard_normal(self.n_w)
        return BilevelState(w, np.zeros(self.n_alpha))


@dataclass(frozen=True)
class TheoryConstants:
    mu: float
    c_l1_wa: float
    c_l2_w: float
    gamma: float

    def __post_init__(self):
        vals = (self.mu, self.c_l1_wa, self.c_l2_w, self.gamma)
        if not all(np.isfinite(vals)):
            raise NonFiniteError(f"non-finite theory constants {vals}")
        if self.mu <= 0:
            raise ContractError(f"mu must be > 0, got {self.mu}")
        if self.gamma * self.mu > 1.0 + 1e-12:
            raise ContractError(f"gamma*mu = {self.gamma * self.mu} exceeds 1")

    def bound(self, K):
        """Neumann truncation bound for ``K`` extra terms."""
        return self.c_l1_wa * self.c_l2_w / self.mu * (1.0 - self.gamma * self.mu) ** (K + 1)


class QuadraticBilevel(BilevelProblem):
    """``L1 = 1/2 w'Aw - w'B alpha``, ``L2 = 1/2 |w - c|^2 + lambda_reg/2 |alpha|^2``."""

    def __init__(self, A, B, c, lambda_reg=0.0, name="quadratic"):
        self.A = as_matrix(A, "A")
        self.B = as_matrix(B, "B")
        self.c = as_vector(c, "c")
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.c.shape != (n,):
            raise DimensionError(
                f"inconsistent dims A{self.A.shape} B{self.B.shape} c{self.c.shape}"
            )
        if not is_spd(self.A):
            raise ContractError("A must be symmetric positive definite")
        if lambda_reg < 0 or not np.isfinite(lambda_reg):
            raise ContractError("lambda_reg must be finite and >= 0")
        self.lambda_reg = float(lambda_reg)
        self.n_w = n
        self.n_alpha = self.B.shape[1]
        self.name = name

    def inner_grads(self, w, alpha, batch=None):
        self._check_batch(batch, "train")
        self._check_dims(w, alpha)
        Aw = self.A @ w
        Ba = self.B @ alpha
        loss = 0.5 * w @ Aw - w @ Ba
        return float(loss), Aw - Ba, -(self.B.T @ w)

    def outer_grads(self, w, alpha, batch=None):
        self._check_batch(batch, "val")
        self._check_dims(w, alpha)
        r = w - self.c
        loss = 0.5 * r @ r + 0.5 * self.lambda_reg * alpha @ alpha
        return float(loss), r, self.lambda_reg * alpha

    def hvp_inner_ww(self, w, alpha, v, batch=None):
        self._check_batch(batch, "train")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_w,):
            raise DimensionError(f"v has shape {v.shape}, expected ({self.n_w},)")
        return self.A @ v

    def hessian_ww(self, w, alpha, batch=None):
        self._check_batch(batch, "train")
        return self.A.copy()

    def mixed_product_analytic(self, w, alpha, v, batch=None):
        """``v' d2L1/dalpha dw = -B'v``."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_w,):
            raise DimensionError(f"v has shape {v.shape}, expected ({self.n_w},)")
        return -(self.B.T @ v)

    def inner_closed_form(self, alpha):
        """``w*(alpha) = A^-1 B alpha``."""
        return dense_solve(self.A, self.B @ np.asarray(alpha, dtype=np.float64))

    def reduced_outer_loss(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        return self.outer_loss(self.inner_closed_form(alpha), alpha)

    def oracle_exact_hypergradient(self, alpha):
        """Exact ``d/dalpha L2(w*(alpha), alpha) = lambda alpha + B' A^-1 (w* - c)``."""
        alpha = np.asarray(alpha, dtype=np.float64)
        w_star = self.inner_closed_form(alpha)
        _, g_w, g_a = self.outer_grads(w_star, alpha)
        return g_a + self.B.T @ dense_solve(self.A, g_w)

    def optimal_alpha(self):
        """Minimizer of the reduced objective (least squares for ``lambda_reg = 0``)."""
        M = dense_solve_columns(self.A, self.B)
        lhs = M.T @ M + self.lambda_reg * np.eye(self.n_alpha)
        return np.linalg.solve(lhs, M.T @ self.c)


def dense_solve_columns(m, rhs):
    return np.column_stack([dense_solve(m, rhs[:, k]) for k in range(rhs.shape[1])])


def theory_constants(problem, region, gamma):
    """Constants of the Neumann truncation bound for a quadratic problem.

    ``region`` is an iterable of inner iterates over which ``|dL2/dw|`` is bounded.
    """
    if not isinstance(problem, QuadraticBilevel):
        raise ContractError("theory constants are only computed for QuadraticBilevel")
    mu = float(np.linalg.eigvalsh(problem.A)[0])
    c_l1_wa = float(np.linalg.norm(problem.B, 2))
    pts = [np.asarray(p, dtype=np.float64) for p in region]
    if not pts:
        raise ContractError("empty region")
    c_l2_w = max(float(np.linalg.norm(p - problem.c)) for p in pts)
    return TheoryConstants(mu=mu, c_l1_wa=c_l1_wa, c_l2_w=c_l2_w, gamma=float(gamma))


class RidgeHyperopt(BilevelProblem):
    """Ridge regression with one log-regularization strength per feature.

    ``L1 = |X_tr w - y_tr|^2 / (2 N_tr) + 1/2 sum_f exp(alpha_f) w_f^2`` and
    ``L2 = |X_val w - y_val|^2 / (2 N_val)``.  ``alpha`` is clamped to [-20, 20]
    before exponentiation; the gradient is zero outside that range.
    """

    ALPHA_CLAMP = 20.0

    def __init__(self, X_train, y_train, X_val, y_val, name="ridge"):
        self.X_train = as_matrix(X_train, "X_train")
        self.X_val = as_matrix(X_val, "X_val")
        self.y_train = as_vector(y_train, "y_train")
        self.y_val = as_vector(y_val, "y_val")
        if self.X_train.shape[0] != self.y_train.shape[0]:
            raise DimensionError("X_train rows != len(y_train)")
        if self.X_val.shape[0] != self.y_val.shape[0]:
            raise DimensionError("X_val rows != len(y_val)")
        if self.X_train.shape[1] != self.X_val.shape[1]:
            raise DimensionError("train/val feature counts differ")
        self.n_w = self.n_alpha = self.X_train.shape[1]
        self.n_train = self.X_train.shape[0]
        self.n_val = self.X_val.shape[0]
        self.name = name

    @classmethod
    def synthetic(cls, n_features=20, n_train=60, n_val=60, noise=0.5, seed=0, name="ridge"):
        rng = np.random.default_rng(seed)
        w_true = rng.standard_normal(n_features) * (rng.random(n_features) < 0.5)
        X_tr = rng.standard_normal((n_train, n_features))
        X_va = rng.standard_normal((n_val, n_features))
        y_tr = X_tr @ w_true + noise * rng.standard_normal(n_train)
        y_va = X_va @ w_true + noise * rng.standard_normal(n_val)
        return cls(X_tr, y_tr, X_va, y_va, name=name)

    def _strength(self, alpha):
        a = np.clip(alpha, -self.ALPHA_CLAMP, self.ALPHA_CLAMP)
        inside = (alpha > -self.ALPHA_CLAMP) & (alpha < self.ALPHA_CLAMP)
        return np.exp(a), inside

    def _rows(self, batch, source):
        self._check_batch(batch, source)
        X, y = (self.X_train, self.y_train) if source == "train" else (self.X_val, self.y_val)
        if batch is None or len(batch) == X.shape[0]:
            return X, y
        return X[batch.indices], y[batch.indices]

    def inner_grads(self, w, alpha, batch=None):
        self._check_dims(w, alpha)
        X, y = self._rows(batch, "train")
        e, inside = self._strength(alpha)
        r = X @ w - y
        n = X.shape[0]
        loss = 0.5 * r @ r / n + 0.5 * np.sum(e * w * w)
        g_w = X.T @ r / n + e * w
        g_a = 0.5 * e * w * w * inside
        return float(loss), g_w, g_a

    def outer_grads(self, w, alpha, batch=None):
        self._check_dims(w, alpha)
        X, y = self._rows(batch, "val")
        r = X @ w - y
        n = X.shape[0]
        return float(0.5 * r @ r / n), X.T @ r / n, np.zeros(self.n_alpha)

    def hvp_inner_ww(self, w, alpha, v, batch=None):
        X, _ = self._rows(batch, "train")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_w,):
            raise DimensionError(f"v has shape {v.shape}, expected ({self.n_w},)")
        e, _ = self._strength(alpha)
        return X.T @ (X @ v) / X.shape[0] + e * v

    def hessian_ww(self, w, alpha, batch=None):
        X, _ = self._rows(batch, "train")
        e, _ = self._strength(alpha)
        return X.T @ X / X.shape[0] + np.diag(e)

    def mixed_product_analytic(self, w, alpha, v, batch=None):
        """``v' d2L1/dalpha dw = v * exp(alpha) * w`` (elementwise)."""
        self._check_batch(batch, "train")
        e, inside = self._strength(alpha)
        return np.asarray(v, dtype=np.float64) * e * w * inside

    def initial_state(self, rng):
        return BilevelState(0.1 * rng.standard_normal(self.n_w), np.zeros(self.n_alpha))


OPS = ("zero", "identity", "linear", "tanh_linear")
EDGES = ((0, 1), (0, 2), (1, 2))


def softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ToySupernet(BilevelProblem):
    """Three-node cell X0 -> X1 -> X2 with a direct X0 -> X2 edge.

    Each edge mixes ``zero``, ``identity``, ``linear`` (``X W``) and
    ``tanh_linear`` (``tanh(X W)``) with softmax weights of its 4 logits.
    Losses are half mean squared error of X2 against the targets.  Weights
    are laid out as ``w.reshape(3, 2, d, d)``: edge, (linear, tanh), matrix.
    Targets come from a teacher network with fixed ops plus Gaussian noise;
    samples ``[0, n/2)`` form the training split and the rest the validation
    split.
    """

    n_edges = len(EDGES)
    n_ops = len(OPS)

    def __init__(self, seed=0, n_samples=512, feature_dim=4, noise=0.01,
                 teacher_ops=(3, 3, 3), teacher_scale=1.5, alpha_reg=0.0, name="toynas"):
        if len(teacher_ops) != self.n_edges or not all(0 <= o < self.n_ops for o in teacher_ops):
            raise ContractError(f"teacher_ops must hold {self.n_edges} op indices in [0, 4)")
        if n_samples < 4 or n_samples % 2:
            raise ContractError("n_samples must be an even number >= 4")
        self.seed = seed
        self.d = feature_dim
        self.noise = noise
        self.teacher_ops = tuple(int(o) for o in teacher_ops)
        self.alpha_reg = float(alpha_reg)
        self.name = name
        self.n_w = self.n_edges * 2 * feature_dim * feature_dim
        self.n_alpha = self.n_edges * self.n_ops

        rng = np.random.default_rng(seed)
        self.teacher_w = teacher_scale / np.sqrt(feature_dim) * rng.standard_normal(self.n_w)
        X = rng.standard_normal((n_samples, feature_dim))
        Y = self.predict(self.teacher_w, self.one_hot(self.teacher_ops), X)
        Y = Y + noise * rng.standard_normal(Y.shape)
        half = n_samples // 2
        self.X_train, self.Y_train = X[:half], Y[:half]
        self.X_val, self.Y_val = X[half:], Y[half:]
        self.n_train = half
        self.n_val = n_samples - half

    # --- architecture helpers -------------------------------------------------

    def op_weights(self, alpha):
        return softmax_rows(np.asarray(alpha, dtype=np.float64).reshape(self.n_edges, self.n_ops))

    def one_hot(self, arch):
        P = np.zeros((self.n_edges, self.n_ops))
        P[np.arange(self.n_edges), list(arch)] = 1.0
        return P

    def architectures(self):
        return list(itertools.product(range(self.n_ops), repeat=self.n_edges))

    # --- forward / backward -----------------------------------------------------

    def _edge_forward(self, U, Wl, Wt, p):
        lin = U @ Wl
        th = np.tanh(U @ Wt)
        out = p[1] * U + p[2] * lin + p[3] * th
        return out, (U, lin, th)

    def predict(self, w, P, X):
        W = w.reshape(self.n_edges, 2, self.d, self.d)
        X1, _ = self._edge_forward(X, W[0, 0], W[0, 1], P[0])
        o02, _ = self._edge_forward(X, W[1, 0], W[1, 1], P[1])
        o12, _ = self._edge_forward(X1, W[2, 0], W[2, 1], P[2])
        return o02 + o12

    def loss_and_grads(self, w, P, X, Y):
        """Half-MSE loss with gradients w.r.t. flat weights and op weights ``P``."""
        W = w.reshape(self.n_edges, 2, self.d, self.d)
        X1, c01 = self._edge_forward(X, W[0, 0], W[0, 1], P[0])
        o02, c02 = self._edge_forward(X, W[1, 0], W[1, 1], P[1])
        o12, c12 = self._edge_forward(X1, W[2, 0], W[2, 1], P[2])
        R = o02 + o12 - Y
        n = X.shape[0]
        loss = 0.5 * np.sum(R * R) / n
        G2 = R / n

        dW = np.zeros_like(W)
        dP = np.zeros_like(P)

        def back(e, G, cache):
            U, lin, th = cache
            p = P[e]
            Gt = G * (1.0 - th * th)
            dW[e, 0] = p[2] * (U.T @ G)
            dW[e, 1] = p[3] * (U.T @ Gt)
            dP[e, 1] = np.sum(G * U)
            dP[e, 2] = np.sum(G * lin)
            dP[e, 3] = np.sum(G * th)
            return p[1] * G + p[2] * (G @ W[e, 0].T) + p[3] * (Gt @ W[e, 1].T)

        back(1, G2, c02)
        G1 = back(2, G2, c12)
        back(0, G1, c01)
        return float(loss), dW.reshape(-1), dP

    def _alpha_grad(self, P, dP):
        # softmax Jacobian-transpose, row by row
        return (P * (dP - np.sum(P * dP, axis=1, keepdims=True))).reshape(-1)

    def _data(self, batch, source):
        self._check_batch(batch, source)
        X, Y = (self.X_train, self.Y_train) if source == "train" else (self.X_val, self.Y_val)
        if batch is None or len(batch) == X.shape[0]:
            return X, Y
        return X[batch.indices], Y[batch.indices]

    def inner_grads(self, w, alpha, batch=None):
        self._check_dims(w, alpha)
        X, Y = self._data(batch, "train")
        P = self.op_weights(alpha)
        loss, g_w, dP = self.loss_and_grads(w, P, X, Y)
        return loss, g_w, self._alpha_grad(P, dP)

    def outer_grads(self, w, alpha, batch=None):
        self._check_dims(w, alpha)
        X, Y = self._data(batch, "val")
        P = self.op_weights(alpha)
        loss, g_w, dP = self.loss_and_grads(w, P, X, Y)
        g_a = self._alpha_grad(P, dP)
        if self.alpha_reg:
            loss += 0.5 * self.alpha_reg * float(alpha @ alpha)
            g_a = g_a + self.alpha_reg * alpha
        return loss, g_w, g_a

    def init_weights(self, seed):
        return 0.1 * np.random.default_rng(seed).standard_normal(self.n_w)

    def arch_val_loss(self, w, arch):
        P = self.one_hot(arch)
        return self.loss_and_grads(w, P, self.X_val, self.Y_val)[0]

    def train_architecture(self, arch, steps, lr, seed=0):
        """Full-batch gradient descent on the training split for one discrete cell."""
        P = self.one_hot(arch)
        w = self.init_weights(seed)
        for _ in range(steps):
            _, g, _ = self.loss_and_grads(w, P, self.X_train, self.Y_train)
            w = w - lr * g
        if not np.all(np.isfinite(w)):
            raise NonFiniteError(f"training diverged for architecture {arch}")
        return w


@dataclass
class RankedArchitecture:
    arch: tuple
    val_loss: float
    weights: np.ndarray = field(repr=False, default=None)


def enumerate_and_rank(problem, train_budget=1000, lr=0.2, seed=0):
    """Train every discrete architecture standalone and sort by validation loss."""
    if not isinstance(problem, ToySupernet):
        raise ContractError("enumerate_and_rank needs a ToySupernet")
    if train_budget < 500:
        raise ContractError("train_budget must be >= 500 steps")
    ranked = []
    for arch in problem.architectures():
        w = problem.train_architecture(arch, train_budget, lr, seed)
        ranked.append(RankedArchitecture(arch, problem.arch_val_loss(w, arch), w))
    ranked.sort(key=lambda r: (r.val_loss, r.arch))
    return ranked


PRESETS = ("quad-scalar", "quad-10d", "ridge-20f", "toynas")


def quad_10d(seed=0, n=10, m=5, eig_range=(1.0, 3.0), lambda_reg=0.1):
    """Seeded well-conditioned quadratic with spectrum of A inside ``eig_range``."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.linspace(eig_range[0], eig_range[1], n)
    A = (Q * eig) @ Q.T
    A = 0.5 * (A + A.T)
    B = rng.standard_normal((n, m)) / np.sqrt(m)
    c = rng.standard_normal(n)
    return QuadraticBilevel(A, B, c, lambda_reg=lambda_reg, name="quad-10d")


def make_preset(name, seed=0):
    if name == "quad-scalar":
        return QuadraticBilevel([[2.0]], [[1.0]], [1.0], name="quad-scalar")
    if name == "quad-10d":
        return quad_10d(seed)
    if name == "ridge-20f":
        return RidgeHyperopt.synthetic(n_features=20, seed=seed, name="ridge-20f")
    if name == "toynas":
        return ToySupernet(seed=seed)
    raise ContractError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
