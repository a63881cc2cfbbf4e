"""Training loop for the weighted-sum baseline and MGDA-UB modes, plus prediction."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .config import TrainConfig
from .data import DIMENSIONS, STREAM_INIT, STREAM_SHUFFLE, FeatureResolver, SampleBatch
from .errors import InvalidInputError, NumericFailure
from .moo import TaskWeights, combined_direction, frank_wolfe_min_norm, representation_gradients
from .preprocess import preprocess
from .nn_core import Architecture, ModelParams, apply_update, encode, head_forward, init_params, task_gradients
from .score_dist import EmdConfig, ScoreDistribution, emd_loss_batch, softmax

log = logging.getLogger(__name__)


def lr_at(epoch: int, lr0: float, halve_every: int) -> float:
    """Learning rate for 1-based ``epoch``: halved after every ``halve_every`` epochs."""
    return lr0 * 0.5 ** ((epoch - 1) // halve_every)


def architecture_for(cfg: TrainConfig, input_dim: int) -> Architecture:
    return Architecture(input_dim=input_dim, encoder_sizes=cfg.encoder_sizes, head_sizes=cfg.head_sizes,
                        activation=cfg.activation, n_tasks=len(cfg.tasks))


class _Rows(NamedTuple):
    features: np.ndarray
    targets: np.ndarray


@dataclass
class TrainLog:
    mode: str
    tasks: tuple
    epochs: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def lr_trace(self) -> list:
        return [row["lr"] for row in self.epochs]

    def epoch_columns(self) -> list:
        return (["mode", "epoch", "lr"] + [f"train_{t}" for t in self.tasks] + [f"val_{t}" for t in self.tasks]
                + ["train_mean", "val_mean"])

    def delta_columns(self) -> list:
        return ["epoch", "step"] + [f"delta_{t}" for t in self.tasks] + ["combined_norm", "iterations", "converged", "gap"]

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        paths = {"train_log": out / "train_log.csv", "delta_log": out / "delta_log.csv"}
        for key, rows, cols in (("train_log", self.epochs, self.epoch_columns()),
                                ("delta_log", self.deltas, self.delta_columns())):
            with paths[key].open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                for row in rows:
                    w.writerow([_cell(row[c]) for c in cols])
        return paths

    @classmethod
    def read(cls, out_dir, tasks=DIMENSIONS) -> "TrainLog":
        out = Path(out_dir)
        tasks = tuple(tasks)
        lg = cls(mode="", tasks=tasks)
        with (out / "train_log.csv").open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                lg.mode = row.pop("mode")
                lg.epochs.append({"mode": lg.mode, **{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}})
        dpath = out / "delta_log.csv"
        if dpath.is_file():
            with dpath.open(newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    lg.deltas.append({k: _parse(k, v) for k, v in row.items()})
        if lg.epochs:
            lg.best_epoch = min(lg.epochs, key=lambda r: r["val_mean"])["epoch"]
        return lg


def _cell(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(k, v):
    if k in ("epoch", "step", "iterations"):
        return int(v)
    if k == "converged":
        return v == "1"
    return float(v)


class TrainingAborted(RuntimeError):
    """Raised on a numeric failure; carries the last finite parameters and the log so far."""

    def __init__(self, message, last_good: ModelParams, best: ModelParams, log: TrainLog, epoch: int):
        super().__init__(message)
        self.last_good = last_good
        self.best = best
        self.log = log
        self.epoch = epoch


@dataclass
class ResumeState:
    params: ModelParams
    momentum: np.ndarray
    epoch: int                       # last completed epoch
    best_params: ModelParams | None = None
    best_val: float = float("inf")
    log: TrainLog | None = None


@dataclass
class TrainResult:
    params: ModelParams              # best-validation parameters
    log: TrainLog
    final_params: ModelParams
    momentum: np.ndarray
    epoch: int
    best_val: float

    def __iter__(self):
        return iter((self.params, self.log))


def _mean_losses(params, rows, r):
    if rows is None or rows.features.shape[0] == 0:
        return None
    reps = encode(params, rows.features)
    return np.array([emd_loss_batch(rows.targets[t], softmax(head_forward(params, t, reps)), r).mean()
                     for t in range(params.arch.n_tasks)])


def train(cfg: TrainConfig, train_set: SampleBatch, val_set: SampleBatch | None = None,
          resume: ResumeState | None = None, on_epoch=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of momentum SGD and return the best-validation model.

    Per step: one encoder forward, per-task losses and gradients, task weights
    (fixed ``cfg.task_weights`` in linear mode, min-norm over representation
    gradients in mgda-ub mode), then a single momentum update of all parameters.
    Selection uses the mean validation EMD over the active tasks (all tasks in
    mgda-ub mode; tasks with non-zero weight in linear mode), falling back to
    the training set when there is no validation data.
    """
    if len(train_set) == 0:
        raise InvalidInputError("training set is empty")
    if train_set.targets.shape[0] != len(cfg.tasks):
        raise InvalidInputError(f"training targets have {train_set.targets.shape[0]} tasks, config has {len(cfg.tasks)}")
    emd = EmdConfig(cfg.emd_r)
    T = len(cfg.tasks)
    tr = _Rows(train_set.features, train_set.targets)
    va = _Rows(val_set.features, val_set.targets) if val_set is not None and len(val_set) else None

    linear = cfg.mode == "linear"
    weights = TaskWeights(cfg.task_weights)
    active = np.flatnonzero(weights.delta > 0) if linear else np.arange(T)

    if resume is None:
        params = init_params(architecture_for(cfg, tr.features.shape[1]), np.random.default_rng([cfg.seed, STREAM_INIT]))
        v = np.zeros(params.size)
        start, best, best_val = 1, params.copy(), float("inf")
        tlog = TrainLog(cfg.mode, tuple(cfg.tasks))
    else:
        params, v = resume.params.copy(), np.array(resume.momentum, dtype=float)
        start = resume.epoch + 1
        best = (resume.best_params or resume.params).copy()
        best_val = resume.best_val
        tlog = resume.log or TrainLog(cfg.mode, tuple(cfg.tasks))
    if params.arch.input_dim != tr.features.shape[1] or params.arch.n_tasks != T:
        raise InvalidInputError("model architecture does not match the data/config")

    n = tr.features.shape[0]
    for epoch in range(start, cfg.epochs + 1):
        lr = lr_at(epoch, cfg.lr, cfg.lr_halve_every)
        order = np.random.default_rng([cfg.seed, STREAM_SHUFFLE, epoch]).permutation(n)
        delta = weights
        for step, k in enumerate(range(0, n, cfg.batch_size)):
            idx = order[k:k + cfg.batch_size]
            rows = _Rows(tr.features[idx], tr.targets[:, idx])
            try:
                tg = task_gradients(params, rows, emd)
                if linear:
                    direction = combined_direction(params, tg, weights, head_weights=weights.delta)
                else:
                    if step % cfg.delta_stride == 0:
                        rep = frank_wolfe_min_norm(representation_gradients(tg), cfg.fw_max_iter, cfg.fw_tol)
                        delta = rep.delta
                        tlog.deltas.append({
                            "epoch": epoch, "step": step,
                            **{f"delta_{t}": float(x) for t, x in zip(cfg.tasks, delta.delta)},
                            "combined_norm": rep.combined_norm, "iterations": rep.iterations,
                            "converged": rep.converged, "gap": rep.gap,
                        })
                    direction = combined_direction(params, tg, delta)
                new_params, new_v = apply_update(params, direction, lr, v, cfg.momentum)
                if not new_params.is_finite():
                    raise NumericFailure("parameters became non-finite after the update", layer="update")
            except NumericFailure as exc:
                raise TrainingAborted(f"epoch {epoch} step {step}: {exc}", params, best, tlog, epoch) from exc
            params, v = new_params, new_v

        train_l = _mean_losses(params, tr, emd.r)
        val_l = _mean_losses(params, va, emd.r)
        sel = val_l if val_l is not None else train_l
        row = {"mode": cfg.mode, "epoch": epoch, "lr": lr}
        for t, name in enumerate(cfg.tasks):
            row[f"train_{name}"] = float(train_l[t])
            row[f"val_{name}"] = float(val_l[t]) if val_l is not None else float("nan")
        row["train_mean"] = float(train_l[active].mean())
        row["val_mean"] = float(sel[active].mean())
        tlog.epochs.append(row)
        if row["val_mean"] < best_val:
            best_val, best = row["val_mean"], params.copy()
            tlog.best_epoch = epoch
        log.debug("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, row["train_mean"], row["val_mean"])
        if on_epoch is not None:
            on_epoch(epoch, params, v, best, best_val, tlog)

    return TrainResult(best, tlog, params, v, cfg.epochs, best_val)


# ---------------------------------------------------------------------------
# prediction

def predict_features(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """(N, T, levels) predicted distributions for feature rows ``X``."""
    reps = encode(params, np.asarray(X, dtype=float))
    return np.stack([softmax(head_forward(params, t, reps)) for t in range(params.arch.n_tasks)], axis=1)


def pool_patches(probs: np.ndarray) -> np.ndarray:
    """Mean over patch rows, renormalized."""
    p = probs.mean(axis=0)
    return p / p.sum(axis=-1, keepdims=True)


def predict(params: ModelParams, images, strategy: str = "pad-rescale", dims=DIMENSIONS, **preprocess_kw) -> list:
    """Per image, a dict dimension -> ScoreDistribution.

    Multi-patch strategies predict every patch and pool with :func:`pool_patches`.
    """
    if len(dims) != params.arch.n_tasks:
        raise InvalidInputError(f"model has {params.arch.n_tasks} heads but {len(dims)} dimensions were requested")
    out = []
    for i, img in enumerate(images):
        X = preprocess(img, strategy, **preprocess_kw)
        p = pool_patches(predict_features(params, X))
        out.append({d: ScoreDistribution(p[t]) for t, d in enumerate(dims)})
    return out


def predict_records(params: ModelParams, records, resolver: FeatureResolver, dims=DIMENSIONS) -> dict:
    """id -> {dimension: ScoreDistribution} for dataset records."""
    if len(dims) != params.arch.n_tasks:
        raise InvalidInputError(f"model has {params.arch.n_tasks} heads but {len(dims)} dimensions were requested")
    out = {}
    for i, rec in enumerate(records):
        p = pool_patches(predict_features(params, resolver.rows(rec, i)))
        out[rec.id] = {d: ScoreDistribution(p[t]) for t, d in enumerate(dims)}
    return out
