"""Pareto-seeking combination of per-task gradients.

The task weights are the min-norm point of the convex hull of the task
gradients: ``argmin_delta || sum_t delta_t g_t ||`` over the simplex. The
solver works on the Gram matrix ``M = G G^T`` so its cost is independent of
the gradient dimension once ``M`` is formed.

In MGDA-UB mode the gradients are taken with respect to the shared
representation instead of the shared parameters; a single encoder forward
serves every task and the encoder Jacobian factor drops out of the argmin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .nn_core import (REPRESENTATION, GradientSet, ModelParams, TaskGradients, apply_update,
                      encoder_vjp, task_gradients)
from .score_dist import EmdConfig

SIMPLEX_TOL = 1e-9
CLAMP_BELOW = 1e-9
DEFAULT_MAX_ITER = 250
DEFAULT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class TaskWeights:
    delta: np.ndarray

    def __post_init__(self):
        d = np.array(self.delta, dtype=float).ravel()
        if d.size == 0 or not np.all(np.isfinite(d)):
            raise InvalidInputError("task weights must be a non-empty finite vector")
        if np.any(d < 0) or abs(d.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidInputError(f"task weights {d.tolist()} are not on the simplex")
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)

    def __len__(self):
        return self.delta.size

    def __iter__(self):
        return iter(self.delta.tolist())

    def __repr__(self):
        return f"TaskWeights({self.delta.tolist()})"

    @classmethod
    def uniform(cls, T: int) -> "TaskWeights":
        return cls(np.full(T, 1.0 / T))

    @classmethod
    def one_hot(cls, T: int, t: int) -> "TaskWeights":
        d = np.zeros(T)
        d[t] = 1.0
        return cls(d)


@dataclass(frozen=True)
class SolverReport:
    delta: TaskWeights
    combined_norm: float
    iterations: int
    converged: bool
    gap: float = 0.0   # Frank-Wolfe duality gap ||d||^2 - min_t g_t.d at the returned point


def _as_matrix(grads) -> np.ndarray:
    G = grads.vectors if isinstance(grads, GradientSet) else np.atleast_2d(np.asarray(grads, dtype=float))
    if G.ndim != 2 or G.shape[0] == 0:
        raise InvalidInputError("gradient set is empty")
    if not np.all(np.isfinite(G)):
        raise InvalidInputError("gradient set has non-finite entries")
    return G


def _segment_min(aa: float, ab: float, bb: float, den: float | None = None) -> float:
    """gamma in [0, 1] minimising ||gamma a + (1 - gamma) b||; 1 when a == b."""
    if den is None:
        den = aa - 2.0 * ab + bb
    if den <= 0.0:
        return 1.0
    return float(min(max((bb - ab) / den, 0.0), 1.0))


def min_norm_2(g1, g2) -> TaskWeights:
    g1 = np.asarray(g1, dtype=float).ravel()
    g2 = np.asarray(g2, dtype=float).ravel()
    if g1.shape != g2.shape:
        raise InvalidInputError(f"dimension mismatch: {g1.shape} vs {g2.shape}")
    if not (np.all(np.isfinite(g1)) and np.all(np.isfinite(g2))):
        raise InvalidInputError("gradients must be finite")
    diff = g1 - g2
    gamma = _segment_min(g1 @ g1, g1 @ g2, g2 @ g2, den=float(diff @ diff))
    return TaskWeights(np.array([gamma, 1.0 - gamma]))


def _affine_min(M: np.ndarray, S: np.ndarray) -> np.ndarray | None:
    """Weights (summing to 1) of the min-norm point on the affine hull of vertices ``S``."""
    k = S.size
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = M[np.ix_(S, S)]
    K[:k, k] = K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    if not np.allclose(K @ sol, rhs, atol=1e-10):
        return None
    return sol[:k]


def _polish(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Wolfe minor cycle: slide toward the affine-hull minimizer of the support,
    dropping vertices whose weight reaches zero, until the minimizer is feasible."""
    x = x.copy()
    while True:
        S = np.flatnonzero(x > 0)
        if S.size < 2:
            return x
        w = _affine_min(M, S)
        if w is None:
            return x
        if np.all(w >= 0):
            out = np.zeros_like(x)
            out[S] = w / w.sum()
            return out if out @ M @ out <= x @ M @ x else x
        xs = x[S]
        neg = w < 0
        ratio = np.full(S.size, np.inf)
        ratio[neg] = xs[neg] / (xs[neg] - w[neg])
        j = int(np.argmin(ratio))
        xs = xs + ratio[j] * (w - xs)
        xs[j] = 0.0
        xs[xs < 0] = 0.0
        x = np.zeros_like(x)
        x[S] = xs / xs.sum()


def _gap(M, x):
    Mx = M @ x
    return float(x @ Mx - Mx.min())


def frank_wolfe_min_norm(grads, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
                         away_steps: bool = True) -> SolverReport:
    """Min-norm point of the convex hull of the rows of ``grads``.

    Each iteration takes the vertex ``t* = argmin_t g_t . d`` (lowest index on
    ties) and line-searches the segment between ``d`` and ``g_t*``. With
    ``away_steps`` the solver may instead move weight off the worst active
    vertex, and after every step re-solves exactly on the active vertex set
    (Wolfe's minor cycle). Plain Frank-Wolfe zig-zags sublinearly when the
    optimum lies on a face; this variant finishes in a few steps. Convergence is declared when the duality gap
    ``||d||^2 - min_t g_t . d`` drops to ``tol``; hitting ``max_iter`` first is
    reported through ``converged=False``.
    """
    G = _as_matrix(grads)
    T = G.shape[0]
    M = G @ G.T
    x = np.zeros(T)
    x[int(np.argmin(np.diag(M)))] = 1.0

    it = 0
    converged = False
    while True:
        Mx = M @ x
        dd = float(x @ Mx)
        t = int(np.argmin(Mx))
        gap = dd - Mx[t]
        if gap <= tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1

        if away_steps:
            S = np.flatnonzero(x > 0)
            a = int(S[np.argmax(Mx[S])])
            if Mx[a] - dd > gap and x[a] < 1.0:
                # move along d - g_a, step capped where delta_a hits zero
                s_max = x[a] / (1.0 - x[a])
                den = dd - 2.0 * Mx[a] + M[a, a]
                s = s_max if den <= 0 else min(max((Mx[a] - dd) / den, 0.0), s_max)
                x = (1.0 + s) * x
                x[a] -= s
                if s == s_max:
                    x[a] = 0.0
                x[x < 0] = 0.0
                x /= x.sum()
                x = _polish(M, x)
                continue

        gamma = _segment_min(dd, Mx[t], M[t, t])
        x = gamma * x
        x[t] += 1.0 - gamma

        if away_steps:
            x = _polish(M, x)

    x[x < CLAMP_BELOW] = 0.0
    x /= x.sum()
    gap = _gap(M, x)
    return SolverReport(
        delta=TaskWeights(x),
        combined_norm=float(np.linalg.norm(x @ G)),
        iterations=it,
        converged=bool(converged and gap <= tol),
        gap=gap,
    )


def representation_gradients(tg: TaskGradients) -> GradientSet:
    return GradientSet(np.stack([g.ravel() for g in tg.rep_grads]), REPRESENTATION)


def mgda_ub_weights(params: ModelParams, batch, cfg: EmdConfig = EmdConfig(),
                    max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL) -> SolverReport:
    tg = task_gradients(params, batch, cfg)
    return frank_wolfe_min_norm(representation_gradients(tg), max_iter=max_iter, tol=tol)


def combined_direction(params: ModelParams, tg: TaskGradients, delta: TaskWeights,
                       head_weights=None) -> np.ndarray:
    """Full flat descent direction for one step.

    The shared part is ``sum_t delta_t grad_shared L^t``, obtained by pulling
    the delta-weighted representation gradient back through the encoder in
    one pass. Head ``t`` gets its own gradient, scaled by ``head_weights[t]``
    when given (the weighted-sum objective) and unscaled otherwise.
    """
    d = np.asarray(delta.delta if isinstance(delta, TaskWeights) else delta, dtype=float)
    if d.size != len(tg.rep_grads):
        raise InvalidInputError(f"{d.size} weights for {len(tg.rep_grads)} tasks")
    d_rep = d[0] * tg.rep_grads[0]
    for w, g in zip(d[1:], tg.rep_grads[1:]):
        d_rep = d_rep + w * g
    shared = encoder_vjp(params, tg.cache, d_rep)
    if head_weights is None:
        heads = tg.head_grads
    else:
        heads = [w * g for w, g in zip(head_weights, tg.head_grads)]
    return np.concatenate([shared, *heads])


def combine_and_descend(params: ModelParams, batch, delta: TaskWeights, cfg: EmdConfig, lr: float,
                        state: np.ndarray, momentum: float, head_weights=None, tg: TaskGradients | None = None):
    """Momentum step along :func:`combined_direction`. Returns ``(params, state)``."""
    if tg is None:
        tg = task_gradients(params, batch, cfg)
    direction = combined_direction(params, tg, delta, head_weights)
    return apply_update(params, direction, lr, state, momentum)
