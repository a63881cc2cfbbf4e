"""Ordinal score distributions over five aesthetic levels and the r-norm EMD loss.

The loss between a target ``y`` and a prediction ``p`` is

    EMD(y, p) = ( mean_c |CDF_y(c) - CDF_p(c)| ** r ) ** (1 / r)

Predictions are produced by a softmax over unconstrained logits, so the
gradient helpers here are taken with respect to the logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

N_LEVELS = 5
LEVELS = np.arange(1, N_LEVELS + 1, dtype=float)

NORM_TOL = 1e-9
RENORM_TOL = 1e-6
# CDF differences this small are rounding noise; they take the zero subgradient.
KINK_TOL = 1e-12


@dataclass(frozen=True)
class EmdConfig:
    r: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.r) or self.r < 1:
            raise InvalidInputError(f"EMD exponent r must be a finite real >= 1, got {self.r!r}")


def check_probs(probs, *, what="distribution") -> np.ndarray:
    """Validate a probability vector and return it as a float array.

    Vectors whose sum is off by at most ``RENORM_TOL`` are renormalized;
    anything further from 1 is rejected.
    """
    p = np.array(probs, dtype=float)
    if p.ndim != 1 or p.shape[0] != N_LEVELS:
        raise InvalidInputError(f"{what} must have {N_LEVELS} entries, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError(f"{what} has non-finite entries")
    if np.any(p < 0):
        raise InvalidInputError(f"{what} has negative entries: {p.tolist()}")
    total = p.sum()
    if abs(total - 1.0) > RENORM_TOL:
        raise InvalidInputError(f"{what} sums to {total:.9g}, expected 1")
    if abs(total - 1.0) > NORM_TOL:
        p = p / total
    return p


@dataclass(frozen=True, eq=False)
class ScoreDistribution:
    """Probability vector over the ordinal levels 1..5."""

    probs: np.ndarray

    def __post_init__(self):
        p = check_probs(self.probs)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def levels(self) -> int:
        return N_LEVELS

    @classmethod
    def from_logits(cls, logits) -> "ScoreDistribution":
        return cls(softmax(np.asarray(logits, dtype=float)))

    def __eq__(self, other):
        if not isinstance(other, ScoreDistribution):
            return NotImplemented
        return bool(np.array_equal(self.probs, other.probs))

    def __hash__(self):
        return hash(self.probs.tobytes())

    def __repr__(self):
        return f"ScoreDistribution({np.round(self.probs, 6).tolist()})"


def _probs(d) -> np.ndarray:
    if isinstance(d, ScoreDistribution):
        return d.probs
    return check_probs(d)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis."""
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cdf(d) -> np.ndarray:
    return np.cumsum(_probs(d))


def mean_score(d) -> float:
    return float(_probs(d) @ LEVELS)


def emd_loss(y, yhat, cfg: EmdConfig = EmdConfig()) -> float:
    diff = np.abs(cdf(y) - cdf(yhat))
    return float(np.mean(diff ** cfg.r) ** (1.0 / cfg.r))


def emd_grad_logits(y, logits, cfg: EmdConfig = EmdConfig()) -> np.ndarray:
    """Gradient of ``emd_loss(y, softmax(logits))`` with respect to ``logits``."""
    z = np.array(logits, dtype=float)
    if z.shape != (N_LEVELS,):
        raise InvalidInputError(f"logits must have shape ({N_LEVELS},), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    _, grad = emd_loss_and_grad(_probs(y)[None, :], z[None, :], cfg.r)
    return grad[0]


# Batched kernels used by the training code. Inputs are trusted: targets are
# validated at load time and predictions come out of softmax.

def emd_loss_batch(targets: np.ndarray, probs: np.ndarray, r: float) -> np.ndarray:
    diff = np.abs(np.cumsum(targets, axis=1) - np.cumsum(probs, axis=1))
    return np.mean(diff ** r, axis=1) ** (1.0 / r)


def emd_loss_and_grad(targets: np.ndarray, logits: np.ndarray, r: float):
    """Per-row EMD losses and their gradients with respect to the logits.

    Returns ``(loss, grad)`` with shapes ``(B,)`` and ``(B, N_LEVELS)``.
    A zero CDF difference contributes a zero subgradient.
    """
    p = softmax(logits)
    diff = np.cumsum(p, axis=1) - np.cumsum(targets, axis=1)
    diff[np.abs(diff) <= KINK_TOL] = 0.0
    a = np.abs(diff)
    s = np.mean(a ** r, axis=1)
    loss = s ** (1.0 / r)

    # dE/d diff_c = (1/N) E^(1-r) |diff_c|^(r-1) sign(diff_c)
    if r == 1.0:
        d_diff = np.sign(diff) / N_LEVELS
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(loss > 0, loss ** (1.0 - r), 0.0)
        d_diff = scale[:, None] * a ** (r - 1.0) * np.sign(diff) / N_LEVELS

    # CDF_p(c) = sum_{k<=c} p_k, so dE/dp_k = sum_{c>=k} dE/d diff_c
    d_p = np.cumsum(d_diff[:, ::-1], axis=1)[:, ::-1]
    # softmax Jacobian-vector product
    d_z = p * (d_p - np.sum(p * d_p, axis=1, keepdims=True))
    return loss, d_z
