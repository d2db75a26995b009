"""Differentiable wrapper for user-interest feature selection in CTR prediction."""

from .autodiff import GradMap, Node, gradient, hvp
from .bilevel import (TrainConfig, RunMetrics, ablation_terms, inner_update, joint_loss,
                      lr_schedule, meta_gradient, train)
from .data import (Instance, SplitDataset, SyntheticConfig, TaskBatch, build_split,
                   generate_synthetic, load_interactions, make_tasks)
from .evaluation import auc, impr, overfit_report
from .model import ModelConfig, ParamSet, init_params, predict, predict_base

__version__ = "0.1.0"

__all__ = [
    "GradMap", "Node", "gradient", "hvp",
    "TrainConfig", "RunMetrics", "ablation_terms", "inner_update", "joint_loss",
    "lr_schedule", "meta_gradient", "train",
    "Instance", "SplitDataset", "SyntheticConfig", "TaskBatch", "build_split",
    "generate_synthetic", "load_interactions", "make_tasks",
    "auc", "impr", "overfit_report",
    "ModelConfig", "ParamSet", "init_params", "predict", "predict_base",
]
