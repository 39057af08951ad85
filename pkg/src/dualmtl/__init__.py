"""Dual-encoder multi-task regression.

Per-task feature encoders plus one shared encoder feed linear heads that
are shrunk toward common centers; training alternates Adam steps on the
encoders with proximal-gradient and exact-center updates on the heads.
Includes the synthetic study generator, a single-task baseline, and a
seeded experiment harness.
"""

from .dgp import DgpConfig, GeneratedStudy, TaskDataset, TaskSplits, generate, make_setting
from .harness import (
    DESK_HP,
    HyperParams,
    SweepResult,
    fit_mtl,
    rmse,
    run_hpsearch,
    run_replications,
    sample_hyperparams,
    train_stl_baseline,
)
from .model import Centers, MtlModel, PenaltyWeights, TaskHead, objective, predict
from .nncore import AdamState, DenseNet, LrSchedule, adam_step, backward, forward, lr_at
from .persist import load_model, save_model
from .trainer import TrainConfig, TrainReport, build_model, prox_group, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Centers",
    "DESK_HP",
    "DenseNet",
    "DgpConfig",
    "GeneratedStudy",
    "HyperParams",
    "LrSchedule",
    "MtlModel",
    "PenaltyWeights",
    "SweepResult",
    "TaskDataset",
    "TaskHead",
    "TaskSplits",
    "TrainConfig",
    "TrainReport",
    "adam_step",
    "backward",
    "build_model",
    "fit_mtl",
    "forward",
    "generate",
    "load_model",
    "lr_at",
    "make_setting",
    "objective",
    "predict",
    "prox_group",
    "rmse",
    "run_hpsearch",
    "run_replications",
    "sample_hyperparams",
    "save_model",
    "train",
    "train_stl_baseline",
    "__version__",
]
