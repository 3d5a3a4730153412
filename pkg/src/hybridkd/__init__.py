"""Distilling softmax transformers into hybrid softmax/linear-attention
students, with KL-guided selection of which layers stay softmax."""

from .mixers import MixerKind
from .model import HybridLayout, Model, ModelSpec, init_student_from_teacher, restore_layer
from .tasks import DataSource, TaskBatch, TaskSpec
from .tensor import GradientTape, Tensor, backward, finite_difference_check

__all__ = [
    "DataSource",
    "GradientTape",
    "HybridLayout",
    "MixerKind",
    "Model",
    "ModelSpec",
    "TaskBatch",
    "TaskSpec",
    "Tensor",
    "backward",
    "finite_difference_check",
    "init_student_from_teacher",
    "restore_layer",
]

__version__ = "0.1.0"
