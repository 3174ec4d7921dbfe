"""Epsilon-insensitive support vector regression with a Gaussian kernel.

The dual is solved in the net-coefficient form: minimize
``0.5*b'Kb - y'b + epsilon*||b||_1`` subject to ``sum(b) = 0`` and
``|b_i| <= C``, by pairwise coordinate descent on the most violating
pair.  Each pairwise subproblem is a piecewise quadratic in one scalar
and is solved exactly, so the dual objective never increases.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class SolverNotConverged(RuntimeError):
    """Raised when the pairwise descent exhausts its iteration budget."""


@dataclass(frozen=True)
class SvrParams:
    """Hyperparameters: box bound ``c``, tube half-width ``epsilon``,
    Gaussian kernel scale, and the KKT stopping tolerance."""

    c: float = 10.0
    epsilon: float = 0.01
    kernel_scale: float = 1.0
    tol: float = 1e-3
    max_iter: int | None = None

    def __post_init__(self):
        if self.c <= 0 or self.epsilon < 0 or self.kernel_scale <= 0:
            raise ValueError("c and kernel_scale must be positive, "
                             "epsilon non-negative")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


def gaussian_gram(a, b, scale) -> np.ndarray:
    """k(x, y) = exp(-||x - y||^2 / (2 scale^2)) for rows of a against b."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * scale * scale))


@dataclass
class SvrModel:
    """Trained regressor: kernel expansion over the support vectors."""

    support_vectors: np.ndarray
    coefficients: np.ndarray
    bias: float
    params: SvrParams
    iterations: int = 0
    kkt_gap: float = 0.0
    train_residual_mae: float = 0.0

    @property
    def n_support(self) -> int:
        return len(self.coefficients)

    def predict(self, features) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if self.n_support == 0:
            return np.full(len(features), self.bias)
        gram = gaussian_gram(features, self.support_vectors,
                             self.params.kernel_scale)
        return gram @ self.coefficients + self.bias


def _pair_step(beta_p, beta_q, grad_diff, curvature, epsilon, c):
    """Exact minimizer of the pairwise move beta_p += t, beta_q -= t.

    The objective change is 0.5*curvature*t^2 + grad_diff*t plus the two
    l1 kinks; candidates are the box ends, the kinks, and each segment's
    interior stationary point.
    """
    lo = max(-c - beta_p, beta_q - c)
    hi = min(c - beta_p, beta_q + c)
    if hi <= lo:
        return 0.0

    def value(t):
        return (0.5 * curvature * t * t + grad_diff * t
                + epsilon * (abs(beta_p + t) - abs(beta_p))
                + epsilon * (abs(beta_q - t) - abs(beta_q)))

    points = sorted({lo, hi,
                     min(max(-beta_p, lo), hi),
                     min(max(beta_q, lo), hi)})
    candidates = list(points)
    if curvature > 0:
        for left, right in zip(points[:-1], points[1:]):
            mid = 0.5 * (left + right)
            sign_p = 1.0 if beta_p + mid >= 0 else -1.0
            sign_q = 1.0 if beta_q - mid > 0 else -1.0
            t = -(grad_diff + epsilon * (sign_p - sign_q)) / curvature
            if left < t < right:
                candidates.append(t)
    best = min(candidates, key=value)
    return best if value(best) < 0.0 else 0.0


def _kkt_ends(beta, grad, epsilon, c):
    """Most violating pair under the shifted-gradient optimality test.

    ``up[i]`` is the right derivative along +e_i (valid while beta_i can
    grow), ``down[i]`` the left derivative (valid while it can shrink);
    optimality is min(up) >= max(down) up to tolerance.
    """
    up = grad + np.where(beta >= 0, epsilon, -epsilon)
    down = grad + np.where(beta > 0, epsilon, -epsilon)
    up[beta >= c] = np.inf
    down[beta <= -c] = -np.inf
    return up, down


def _select_pair(up, down):
    p = int(np.argmin(up))
    q = int(np.argmax(down))
    if p != q:
        return p, q, float(down[q] - up[p])
    # same index tops both lists: the best distinct pair swaps one end
    up_masked = up.copy()
    up_masked[p] = np.inf
    down_masked = down.copy()
    down_masked[q] = -np.inf
    alt_p = int(np.argmin(up_masked))
    alt_q = int(np.argmax(down_masked))
    first = float(down[alt_q] - up[p])
    second = float(down[q] - up[alt_p])
    if first >= second:
        return p, alt_q, first
    return alt_p, q, second


def fit_svr(features, targets, params: SvrParams | None = None) -> SvrModel:
    """Train on (n, d) features and length-n targets.

    Constant targets yield a bias-only model with a warning; running out
    of iterations raises :class:`SolverNotConverged`.
    """
    params = params or SvrParams()
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.asarray(targets, dtype=float)
    n = len(features)
    if n < 2:
        raise ValueError("need at least two training samples")
    if len(targets) != n:
        raise ValueError("feature/target length mismatch")
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
        raise ValueError("features and targets must be finite")
    if np.ptp(targets) == 0:
        warnings.warn("all training targets identical; "
                      "returning a constant predictor")
        return SvrModel(features[:0], np.zeros(0), float(targets[0]), params)

    gram = gaussian_gram(features, features, params.kernel_scale)
    beta = np.zeros(n)
    grad = -targets.copy()          # gradient of the smooth part, K beta - y
    limit = params.max_iter or max(20000, 100 * n)
    gap = math.inf
    iteration = 0
    for iteration in range(1, limit + 1):
        up, down = _kkt_ends(beta, grad, params.epsilon, params.c)
        p, q, gap = _select_pair(up, down)
        if gap <= params.tol:
            break
        curvature = gram[p, p] + gram[q, q] - 2.0 * gram[p, q]
        step = _pair_step(beta[p], beta[q], float(grad[p] - grad[q]),
                          float(curvature), params.epsilon, params.c)
        if step == 0.0:
            break
        beta[p] += step
        beta[q] -= step
        grad += step * (gram[:, p] - gram[:, q])
    else:
        raise SolverNotConverged(
            f"KKT gap {gap:.3e} after {limit} iterations")
    if gap > params.tol:
        raise SolverNotConverged(
            f"pairwise step stalled at KKT gap {gap:.3e}")

    up, down = _kkt_ends(beta, grad, params.epsilon, params.c)
    bias = -0.5 * (float(np.min(up)) + float(np.max(down)))
    keep = np.abs(beta) > 1e-12 * params.c
    residuals = targets - (gram @ beta + bias)
    return SvrModel(
        support_vectors=features[keep].copy(),
        coefficients=beta[keep].copy(),
        bias=float(bias),
        params=params,
        iterations=iteration,
        kkt_gap=float(max(gap, 0.0)),
        train_residual_mae=float(np.mean(np.abs(residuals))),
    )


def dual_objective(model_beta, gram, targets, epsilon) -> float:
    """0.5*b'Kb - y'b + epsilon*||b||_1, for solver comparisons."""
    model_beta = np.asarray(model_beta, dtype=float)
    return float(0.5 * model_beta @ gram @ model_beta
                 - targets @ model_beta
                 + epsilon * np.sum(np.abs(model_beta)))
