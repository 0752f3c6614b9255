"""Sparse Learning Iterative Minimization (SLIM) for non-negative abundances.

The MAP objective for whitened data (y, V) and sparsity exponent q is

    g_q(a) = 0.5 * ||y - V a||^2 + sum_i (a_i**q - 1) / q,

minimized by the cyclic update a <- P V^T (V P V^T + I)^{-1} y with
P = diag(a**(2 - q)), clipping negative entries to zero after every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg as splin

from .preprocess import NoiseModel

logger = logging.getLogger(__name__)

COND_LIMIT = 1e14
BIC_FORMULA = "2*||y - V a||^2 + h*ln(L)"
DEFAULT_Q_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))


class SlimError(RuntimeError):
    pass


@dataclass(frozen=True)
class SlimConfig:
    """Solver hyperparameters.

    ``q`` fixes the sparsity exponent; when it is None, :func:`select_q`
    chooses one from ``q_grid`` by BIC.

    ``init_weights`` controls the first weight vector when no explicit init
    is given: "clipped" uses the non-negative ML estimate (a negative ML
    entry starts, and therefore stays, at zero); "magnitude" uses
    |ML estimate|**(2 - q), so an endmember whose lone-column correlation is
    negative only because of cross-talk can still enter the joint fit.
    """

    q: float | None = None
    delta: float = 1e-4
    max_iter: int = 500
    q_grid: tuple[float, ...] = DEFAULT_Q_GRID
    support_epsilon: float = 1e-3
    init_weights: str = "clipped"

    def __post_init__(self):
        object.__setattr__(self, "q_grid", tuple(float(v) for v in self.q_grid))
        for q in ([self.q] if self.q is not None else []) + list(self.q_grid):
            _check_q(q)
        if not self.q_grid:
            raise ValueError("q_grid must not be empty")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 <= self.support_epsilon < 1:
            raise ValueError("support_epsilon must lie in [0, 1)")
        if self.init_weights not in ("clipped", "magnitude"):
            raise ValueError(f"init_weights must be 'clipped' or 'magnitude', got {self.init_weights!r}")

    def with_q(self, q: float) -> "SlimConfig":
        return replace(self, q=float(q))

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "delta": self.delta,
            "max_iter": self.max_iter,
            "q_grid": list(self.q_grid),
            "support_epsilon": self.support_epsilon,
            "init_weights": self.init_weights,
            "bic_formula": BIC_FORMULA,
        }


def _check_q(q: float) -> None:
    if not (0.0 < q <= 1.0):
        raise ValueError(f"q must lie in (0, 1], got {q}")


@dataclass(frozen=True)
class SlimState:
    alpha: np.ndarray
    weights: np.ndarray
    iteration: int
    objective: float

    @classmethod
    def start(cls, alpha, y, V, q: float) -> "SlimState":
        a = np.clip(np.asarray(alpha, dtype=float), 0.0, None)
        return cls(a, a ** (2.0 - q), 0, objective(a, y, V, q))


@dataclass(frozen=True)
class AbundanceEstimate:
    alpha: np.ndarray
    init_alpha: np.ndarray
    iterations_used: int
    converged: bool
    q_used: float
    objective: float
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def model_order(self) -> int:
        return int(self.support.size)


@dataclass(frozen=True)
class BicScore:
    q: float
    residual_norm_sq: float
    h: int
    score: float


def support_of(alpha: np.ndarray, epsilon: float) -> np.ndarray:
    """Indices whose value exceeds ``epsilon * max(alpha)`` (and zero)."""
    alpha = np.asarray(alpha)
    top = alpha.max(initial=0.0)
    if top <= 0:
        return np.zeros(0, dtype=int)
    return np.flatnonzero(alpha > epsilon * top)


def init_estimate(z, S, noise: NoiseModel | None = None) -> np.ndarray:
    """Per-column maximum-likelihood amplitude, clipped at zero.

    a0_n = (s_n^T M^-1 z) / (s_n^T M^-1 s_n), computed on the unwhitened z.
    """
    z = np.asarray(z, dtype=float)
    S = np.asarray(getattr(S, "matrix", S), dtype=float)
    MinvS = S if noise is None else noise.apply_inv(S)
    denom = np.einsum("ij,ij->j", S, MinvS)
    if np.any(denom <= 0):
        raise SlimError(f"zero-norm dictionary column(s) {np.flatnonzero(denom <= 0).tolist()}")
    return np.clip(MinvS.T @ z / denom, 0.0, None)


def objective(alpha, y, V, q: float) -> float:
    alpha = np.asarray(alpha, dtype=float)
    r = np.asarray(y, dtype=float) - np.asarray(V, dtype=float) @ alpha
    return float(0.5 * (r @ r) + np.sum((alpha ** q - 1.0) / q))


def has_converged(prev, curr, delta: float) -> bool:
    prev = np.asarray(prev, dtype=float)
    curr = np.asarray(curr, dtype=float)
    if prev.shape != curr.shape:
        raise ValueError("iterates must have equal length")
    denom = np.linalg.norm(curr)
    if denom == 0:
        return bool(np.linalg.norm(prev) == 0)
    return bool(np.linalg.norm(curr - prev) / denom < delta)


def _guarded_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    # A = X + I with X PSD, so lambda_min >= 1 and cond(A) <= trace(A)
    if not np.isfinite(A).all():
        raise SlimError("non-finite entries in the SLIM system matrix")
    if np.trace(A) > COND_LIMIT:
        cond = np.linalg.cond(A)
        if cond > COND_LIMIT:
            raise SlimError(f"SLIM system is ill-conditioned (cond={cond:.3g})")
    return splin.solve(A, b, assume_a="pos", check_finite=False)


def slim_step(state: SlimState, y, V, q: float) -> SlimState:
    """One SLIM update using the L x L system (V P V^T + I)."""
    y = np.asarray(y, dtype=float)
    V = np.asarray(V, dtype=float)
    p = state.weights
    A = (V * p) @ V.T
    A[np.diag_indices_from(A)] += 1.0
    x = _guarded_solve(A, y)
    alpha = np.clip(p * (V.T @ x), 0.0, None)
    return SlimState(alpha, alpha ** (2.0 - q), state.iteration + 1, objective(alpha, y, V, q))


class _Problem:
    """Cached products of one (y, V) pair for repeated SLIM updates.

    The update is evaluated through whichever of the equivalent L x L form
    or the N x N form P^1/2 (P^1/2 V^T V P^1/2 + I)^-1 P^1/2 V^T y is smaller.
    """

    def __init__(self, y, V):
        self.y = np.asarray(y, dtype=float)
        self.V = np.asarray(V, dtype=float)
        L, N = self.V.shape
        if self.y.shape != (L,):
            raise ValueError(f"observation length {self.y.shape} does not match dictionary {self.V.shape}")
        self.wide = N > L
        self.yy = float(self.y @ self.y)
        self.Vty = self.V.T @ self.y
        self.G = None if self.wide else self.V.T @ self.V

    def step(self, p: np.ndarray) -> np.ndarray:
        if self.wide:
            A = (self.V * p) @ self.V.T
            A[np.diag_indices_from(A)] += 1.0
            alpha = p * (self.V.T @ _guarded_solve(A, self.y))
        else:
            s = np.sqrt(p)
            B = s[:, None] * self.G * s[None, :]
            B[np.diag_indices_from(B)] += 1.0
            alpha = s * _guarded_solve(B, s * self.Vty)
        return np.clip(alpha, 0.0, None)

    def objective(self, alpha: np.ndarray, q: float) -> float:
        r = self.y - self.V @ alpha
        return float(0.5 * (r @ r) + np.sum((alpha ** q - 1.0) / q))

    def ml_init(self) -> np.ndarray:
        """Unclipped per-column ML amplitudes."""
        denom = np.einsum("ij,ij->j", self.V, self.V)
        if np.any(denom <= 0):
            raise SlimError(f"zero-norm dictionary column(s) {np.flatnonzero(denom <= 0).tolist()}")
        return self.Vty / denom


def solve_slim(y, V, config: SlimConfig, init=None, q: float | None = None) -> AbundanceEstimate:
    """Run SLIM at a fixed q until the relative-change test passes or
    ``config.max_iter`` updates have been made."""
    q = config.q if q is None else float(q)
    if q is None:
        raise ValueError("solve_slim needs a fixed q (set config.q or pass q)")
    _check_q(q)
    prob = _Problem(y, V)
    if init is None:
        ml = prob.ml_init()
        alpha = np.clip(ml, 0.0, None)
        weights = (np.abs(ml) if config.init_weights == "magnitude" else alpha) ** (2.0 - q)
    else:
        alpha = np.clip(np.asarray(init, dtype=float), 0.0, None)
        weights = alpha ** (2.0 - q)
    if alpha.shape != (prob.V.shape[1],):
        raise ValueError("init length does not match dictionary width")
    init_alpha = alpha.copy()

    converged = False
    it = 0
    while it < config.max_iter:
        prev = alpha
        alpha = prob.step(weights)
        weights = alpha ** (2.0 - q)
        it += 1
        if has_converged(prev, alpha, config.delta):
            converged = True
            break

    return AbundanceEstimate(
        alpha=alpha,
        init_alpha=init_alpha,
        iterations_used=it,
        converged=converged,
        q_used=q,
        objective=prob.objective(alpha, q),
        support=support_of(alpha, config.support_epsilon),
    )


def compute_bic(y, V, estimate: AbundanceEstimate) -> BicScore:
    y = np.asarray(y, dtype=float)
    r = y - np.asarray(V, dtype=float) @ estimate.alpha
    rss = float(r @ r)
    h = estimate.model_order
    return BicScore(estimate.q_used, rss, h, 2.0 * rss + h * math.log(y.size))


def select_q(y, V, config: SlimConfig) -> tuple[AbundanceEstimate, list[BicScore]]:
    """Solve on every q in the grid and keep the BIC minimizer.

    Ties go to the smaller q. Each grid point starts from the ML initializer.
    """
    best, best_score = None, None
    scores = []
    for q in sorted(config.q_grid):
        est = solve_slim(y, V, config, q=q)
        sc = compute_bic(y, V, est)
        scores.append(sc)
        if best_score is None or sc.score < best_score.score:
            best, best_score = est, sc
    return best, scores


def estimate(y, V, config: SlimConfig) -> tuple[AbundanceEstimate, list[BicScore]]:
    """Fixed-q solve when ``config.q`` is set, BIC selection otherwise."""
    if config.q is not None:
        est = solve_slim(y, V, config)
        return est, [compute_bic(y, V, est)]
    return select_q(y, V, config)


def stationarity_residual(alpha, y, V, q: float, support: Sequence[int] | None = None) -> float:
    """Relative norm of the gradient of g_q restricted to the support.

    ||[V^T V a - V^T y + a^(q-1)]_support|| / ||V^T y||
    """
    alpha = np.asarray(alpha, dtype=float)
    V = np.asarray(V, dtype=float)
    y = np.asarray(y, dtype=float)
    idx = np.flatnonzero(alpha > 0) if support is None else np.asarray(support, dtype=int)
    if idx.size == 0:
        return 0.0
    Vty = V.T @ y
    grad = V.T @ (V @ alpha) - Vty
    g = grad[idx] + alpha[idx] ** (q - 1.0)
    denom = np.linalg.norm(Vty)
    return float(np.linalg.norm(g) / denom) if denom > 0 else float(np.linalg.norm(g))
