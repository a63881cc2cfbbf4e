"""Multi-task prediction of aesthetic score distributions.

A small numpy network (shared encoder plus one head per aesthetic dimension)
trained with an EMD loss, either on a fixed weighted sum of task losses or with
per-step min-norm task weights computed on the shared representation.
"""
__version__ = "0.1.0"

from .config import TrainConfig, load_config
from .data import DIMENSIONS, SampleBatch, SampleRecord, load_manifest, synth_generate
from .metrics import EvalReport, evaluate
from .moo import TaskWeights, frank_wolfe_min_norm, min_norm_2
from .nn_core import Architecture, ModelParams, init_params
from .score_dist import EmdConfig, ScoreDistribution, emd_loss
from .trainer import predict, train

__all__ = [
    "__version__", "TrainConfig", "load_config", "DIMENSIONS", "SampleBatch", "SampleRecord", "load_manifest",
    "synth_generate", "EvalReport", "evaluate", "TaskWeights", "frank_wolfe_min_norm", "min_norm_2",
    "Architecture", "ModelParams", "init_params", "EmdConfig", "ScoreDistribution", "emd_loss", "predict", "train",
]
