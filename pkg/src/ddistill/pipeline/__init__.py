"""The four distillation stages and the experiments built from them."""
from .artifacts import ExperimentReport, SoftLabelSet, SyntheticDataset
from .common import DivergenceError, evaluate
from .experiments import AblationBase, ablate, continual_run, cross_model_matrix, distill_and_evaluate
from .posttrain import PostTrainRecipe, posttrain, relabel
from .recover import RecoveryConfig, r_reg, recover
from .squeeze import SqueezeRecipe, squeeze

__all__ = [
    "AblationBase",
    "DivergenceError",
    "ExperimentReport",
    "PostTrainRecipe",
    "RecoveryConfig",
    "SoftLabelSet",
    "SqueezeRecipe",
    "SyntheticDataset",
    "ablate",
    "continual_run",
    "cross_model_matrix",
    "distill_and_evaluate",
    "evaluate",
    "posttrain",
    "r_reg",
    "recover",
    "relabel",
    "squeeze",
]
