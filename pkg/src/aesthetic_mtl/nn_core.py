"""Shared encoder plus per-task heads, with exact reverse-mode gradients.

Parameters live in flat float64 vectors (one for the shared encoder, one per
task head); layer weights are reshaped views into them. Weights are stored
``(fan_in, fan_out)`` so a layer computes ``x @ W + b`` on row batches.

Every gradient here is of the batch-mean EMD loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError, NumericFailure
from .score_dist import N_LEVELS, EmdConfig, emd_loss_and_grad, emd_loss_batch, softmax

SHARED = "shared"
REPRESENTATION = "representation"
HEAD = "head"
SPACES = (SHARED, REPRESENTATION, HEAD)

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    encoder_sizes: tuple = (64, 64, 32)
    head_sizes: tuple = ()
    activation: str = "relu"
    activate_latent: bool = True
    n_tasks: int = 4
    n_levels: int = N_LEVELS

    def __post_init__(self):
        object.__setattr__(self, "encoder_sizes", tuple(int(s) for s in self.encoder_sizes))
        object.__setattr__(self, "head_sizes", tuple(int(s) for s in self.head_sizes))
        if self.input_dim < 1 or not self.encoder_sizes or min(self.encoder_sizes) < 1:
            raise InvalidInputError(f"bad layer sizes in {self}")
        if self.head_sizes and min(self.head_sizes) < 1:
            raise InvalidInputError(f"bad head sizes in {self}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.n_tasks < 1:
            raise InvalidInputError("need at least one task")

    @property
    def latent_dim(self) -> int:
        return self.encoder_sizes[-1]

    @property
    def encoder_dims(self) -> list:
        return [self.input_dim, *self.encoder_sizes]

    @property
    def head_dims(self) -> list:
        return [self.latent_dim, *self.head_sizes, self.n_levels]

    @property
    def n_shared(self) -> int:
        return _n_params(self.encoder_dims)

    @property
    def n_head(self) -> int:
        return _n_params(self.head_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_sizes"] = list(self.encoder_sizes)
        d["head_sizes"] = list(self.head_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


def _n_params(dims) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def _layers(flat: np.ndarray, dims) -> list:
    out, k = [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        W = flat[k:k + a * b].reshape(a, b)
        k += a * b
        out.append((W, flat[k:k + b]))
        k += b
    return out


@dataclass
class ModelParams:
    arch: Architecture
    shared: np.ndarray
    heads: list = field(default_factory=list)

    def __post_init__(self):
        self.shared = np.asarray(self.shared, dtype=float)
        self.heads = [np.asarray(h, dtype=float) for h in self.heads]
        if self.shared.shape != (self.arch.n_shared,):
            raise InvalidInputError(f"shared vector has {self.shared.size} entries, expected {self.arch.n_shared}")
        if len(self.heads) != self.arch.n_tasks:
            raise InvalidInputError(f"{len(self.heads)} heads for {self.arch.n_tasks} tasks")
        for h in self.heads:
            if h.shape != (self.arch.n_head,):
                raise InvalidInputError(f"head vector has {h.size} entries, expected {self.arch.n_head}")

    @property
    def size(self) -> int:
        return self.arch.n_shared + self.arch.n_tasks * self.arch.n_head

    def flat(self) -> np.ndarray:
        return np.concatenate([self.shared, *self.heads])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise InvalidInputError(f"flat vector has shape {vec.shape}, expected ({self.size},)")
        ns, nh = self.arch.n_shared, self.arch.n_head
        heads = [vec[ns + t * nh: ns + (t + 1) * nh].copy() for t in range(self.arch.n_tasks)]
        return ModelParams(self.arch, vec[:ns].copy(), heads)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.shared.copy(), [h.copy() for h in self.heads])

    def encoder_layers(self) -> list:
        return _layers(self.shared, self.arch.encoder_dims)

    def head_layers(self, t: int) -> list:
        return _layers(self.heads[t], self.arch.head_dims)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.shared)) and all(np.all(np.isfinite(h)) for h in self.heads))


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights and zero biases, drawn encoder first then heads in task order."""

    def draw(dims):
        parts = []
        for a, b in zip(dims[:-1], dims[1:]):
            s = np.sqrt(6.0 / (a + b))
            parts.append(rng.uniform(-s, s, size=a * b))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    shared = draw(arch.encoder_dims)
    heads = [draw(arch.head_dims) for _ in range(arch.n_tasks)]
    return ModelParams(arch, shared, heads)


def zero_params(arch: Architecture) -> ModelParams:
    return ModelParams(arch, np.zeros(arch.n_shared), [np.zeros(arch.n_head) for _ in range(arch.n_tasks)])


# ---------------------------------------------------------------------------
# MLP kernels

def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _dact(name, z, a, g):
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericFailure(f"non-finite values in {where}", layer=where)


@np.errstate(over="ignore", invalid="ignore")
def _mlp_forward(layers, x, act, act_last, name):
    # overflow is reported by _check with the layer name, not as a warning
    cache = []
    n = len(layers)
    for i, (W, b) in enumerate(layers):
        z = x @ W + b
        a = _act(act, z) if (i < n - 1 or act_last) else z
        _check(a, f"{name} layer {i}")
        cache.append((x, z, a))
        x = a
    return x, cache


@np.errstate(over="ignore", invalid="ignore")
def _mlp_backward(layers, cache, g, act, act_last, name):
    """Returns (flat parameter gradient, gradient w.r.t. the MLP input)."""
    n = len(layers)
    grads = [None] * n
    for i in range(n - 1, -1, -1):
        W, _ = layers[i]
        x, z, a = cache[i]
        if i < n - 1 or act_last:
            g = _dact(act, z, a, g)
        grads[i] = np.concatenate([(x.T @ g).ravel(), g.sum(axis=0)])
        g = g @ W.T
        _check(g, f"{name} layer {i} (backward)")
    return np.concatenate(grads), g


# ---------------------------------------------------------------------------
# public operations

def _features(batch) -> np.ndarray:
    x = batch.features if hasattr(batch, "features") else batch
    return np.asarray(x, dtype=float)


def _check_input(params: ModelParams, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise InvalidInputError(
            f"feature matrix has shape {x.shape}, expected (batch, {params.arch.input_dim})")


def encode_with_cache(params: ModelParams, batch):
    x = _features(batch)
    _check_input(params, x)
    a = params.arch
    return _mlp_forward(params.encoder_layers(), x, a.activation, a.activate_latent, "encoder")


def encode(params: ModelParams, batch) -> np.ndarray:
    return encode_with_cache(params, batch)[0]


def _check_task(params, t):
    if not (isinstance(t, (int, np.integer)) and 0 <= t < params.arch.n_tasks):
        raise InvalidInputError(f"task index {t!r} out of range for {params.arch.n_tasks} tasks")


def head_forward(params: ModelParams, t: int, reps: np.ndarray) -> np.ndarray:
    _check_task(params, t)
    reps = np.asarray(reps, dtype=float)
    if reps.ndim != 2 or reps.shape[1] != params.arch.latent_dim:
        raise InvalidInputError(f"representation has shape {reps.shape}, expected (batch, {params.arch.latent_dim})")
    return _mlp_forward(params.head_layers(t), reps, params.arch.activation, False, f"head {t}")[0]


def encoder_vjp(params: ModelParams, cache, d_reps: np.ndarray) -> np.ndarray:
    """Pull a representation-space gradient back to the shared parameters."""
    a = params.arch
    return _mlp_backward(params.encoder_layers(), cache, d_reps, a.activation, a.activate_latent, "encoder")[0]


@dataclass(frozen=True)
class GradientSet:
    """Per-task gradients stacked as rows of a ``(T, dim)`` matrix."""

    vectors: np.ndarray
    space: str = SHARED

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        if v.ndim != 2:
            raise InvalidInputError(f"gradient set must be 2-D, got shape {v.shape}")
        if self.space not in SPACES:
            raise InvalidInputError(f"unknown gradient space {self.space!r}")
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.vectors.shape[0]


class TaskGradients(NamedTuple):
    losses: np.ndarray       # (T,) batch-mean EMD per task
    rep_grads: list          # per task, (B, latent) gradient of the task loss w.r.t. the representation
    head_grads: list         # per task, flat gradient w.r.t. that task's head
    reps: np.ndarray
    cache: list              # encoder activations, for encoder_vjp


def task_gradients(params: ModelParams, batch, cfg: EmdConfig = EmdConfig(), tasks: Sequence[int] | None = None) -> TaskGradients:
    """One encoder forward, then loss and gradients for each task head.

    ``batch.targets[t]`` holds the (B, levels) target matrix of task ``t``.
    """
    reps, cache = encode_with_cache(params, batch)
    targets = np.asarray(batch.targets, dtype=float)
    B = reps.shape[0]
    tasks = range(params.arch.n_tasks) if tasks is None else tasks
    losses, rep_grads, head_grads = [], [], []
    for t in tasks:
        _check_task(params, t)
        layers = params.head_layers(t)
        logits, hcache = _mlp_forward(layers, reps, params.arch.activation, False, f"head {t}")
        loss, d_logits = emd_loss_and_grad(targets[t], logits, cfg.r)
        _check(d_logits, f"head {t} loss gradient")
        d_head, d_rep = _mlp_backward(layers, hcache, d_logits / B, params.arch.activation, False, f"head {t}")
        losses.append(loss.mean())
        rep_grads.append(d_rep)
        head_grads.append(d_head)
    return TaskGradients(np.array(losses), rep_grads, head_grads, reps, cache)


def backward_task(params: ModelParams, batch, t: int, cfg: EmdConfig = EmdConfig(), wrt: str = SHARED) -> np.ndarray:
    """Flat gradient of the task-``t`` batch-mean loss in the requested space."""
    if wrt not in SPACES:
        raise InvalidInputError(f"unknown gradient space {wrt!r}")
    _check_task(params, t)
    tg = task_gradients(params, batch, cfg, tasks=[t])
    if wrt == REPRESENTATION:
        return tg.rep_grads[0].ravel()
    if wrt == HEAD:
        return tg.head_grads[0]
    return encoder_vjp(params, tg.cache, tg.rep_grads[0])


def task_losses(params: ModelParams, batch, cfg: EmdConfig = EmdConfig()) -> np.ndarray:
    """(T,) batch-mean EMD per task, forward only."""
    reps = encode(params, batch)
    targets = np.asarray(batch.targets, dtype=float)
    return np.array([emd_loss_batch(targets[t], softmax(head_forward(params, t, reps)), cfg.r).mean()
                     for t in range(params.arch.n_tasks)])


def apply_update(params: ModelParams, direction: np.ndarray, lr: float, state: np.ndarray, momentum: float):
    """Classical momentum step on the full flat parameter vector.

    ``v <- momentum * v + direction``; ``p <- p - lr * v``. Returns ``(params, v)``.
    """
    direction = np.asarray(direction, dtype=float)
    state = np.asarray(state, dtype=float)
    if direction.shape != (params.size,) or state.shape != (params.size,):
        raise InvalidInputError(
            f"direction {direction.shape} and state {state.shape} must both be ({params.size},)")
    v = momentum * state + direction
    return params.with_flat(params.flat() - lr * v), v
