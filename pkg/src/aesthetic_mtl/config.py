"""Training configuration and its flat key/value file format.

Config files are flat TOML: one ``key = value`` per line, no tables. Every key
is optional; omitted keys take the defaults below. Unknown keys are rejected.

=================  ========  ==============================================
key                type      default
=================  ========  ==============================================
mode               str       "mgda-ub"  ("linear" or "mgda-ub")
weights            [float]   uniform 1/T  (linear mode task weights)
lr                 float     1e-4
momentum           float     0.9
lr_halve_every     int       30   (epochs)
epochs             int       100
batch_size         int       16
seed               int       0
emd_r              float     2.0
preprocessing      str       "pad-rescale"  ("pad-rescale", "mp", "mp-gp")
encoder_sizes      [int]     [64, 64, 32]  (hidden layers then latent size)
head_sizes         [int]     []   (hidden layers inside each task head)
activation         str       "relu"  ("relu", "tanh", "identity")
tasks              [str]     all four dimensions
delta_stride       int       1    (recompute task weights every k steps)
fw_max_iter        int       250
fw_tol             float     1e-6
val_frac           float     0.1
test_frac          float     0.1
feature_grid       [int]     [16, 32]
=================  ========  ==============================================
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .data import DIMENSIONS
from .errors import InvalidInputError
from .nn_core import ACTIVATIONS
from .preprocess import STRATEGIES

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODES = ("linear", "mgda-ub")


class ConfigError(InvalidInputError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mgda-ub"
    weights: tuple | None = None
    lr: float = 1e-4
    momentum: float = 0.9
    lr_halve_every: int = 30
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    emd_r: float = 2.0
    preprocessing: str = "pad-rescale"
    encoder_sizes: tuple = (64, 64, 32)
    head_sizes: tuple = ()
    activation: str = "relu"
    tasks: tuple = DIMENSIONS
    delta_stride: int = 1
    fw_max_iter: int = 250
    fw_tol: float = 1e-6
    val_frac: float = 0.1
    test_frac: float = 0.1
    feature_grid: tuple = (16, 32)

    def __post_init__(self):
        for name in ("weights", "encoder_sizes", "head_sizes", "tasks", "feature_grid"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(v))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_halve_every < 1 or self.delta_stride < 1:
            raise ConfigError("epochs, batch_size, lr_halve_every and delta_stride must be >= 1")
        if self.emd_r < 1:
            raise ConfigError("emd_r must be >= 1")
        if self.preprocessing not in STRATEGIES:
            raise ConfigError(f"preprocessing must be one of {STRATEGIES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if not self.tasks or any(t not in DIMENSIONS for t in self.tasks) or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"tasks must be distinct names from {DIMENSIONS}")
        if self.weights is not None:
            w = self.weights
            if len(w) != len(self.tasks) or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError(f"weights {w} must be {len(self.tasks)} non-negative reals summing to 1")
        if len(self.feature_grid) != 2 or min(self.feature_grid) < 1:
            raise ConfigError("feature_grid must be two positive ints")

    @property
    def task_weights(self) -> tuple:
        if self.weights is not None:
            return tuple(float(x) for x in self.weights)
        return tuple(1.0 / len(self.tasks) for _ in self.tasks)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_INT_KEYS = {"lr_halve_every", "epochs", "batch_size", "seed", "delta_stride", "fw_max_iter"}
_FLOAT_KEYS = {"lr", "momentum", "emd_r", "fw_tol", "val_frac", "test_frac"}


def _coerce(key, value):
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if key in ("mode", "preprocessing", "activation"):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if not isinstance(value, list):
        raise ConfigError(f"{key} must be a list, got {value!r}")
    return tuple(value)


def config_from_dict(d: dict, base: TrainConfig | None = None) -> TrainConfig:
    unknown = sorted(k for k in d if k not in _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kw = {k: _coerce(k, v) for k, v in d.items() if v is not None}
    return dataclasses.replace(base or TrainConfig(), **kw)


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; unexpected table(s): {', '.join(nested)}")
    return config_from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if v is None:
            continue
        lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"
