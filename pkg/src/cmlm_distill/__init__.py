"""Conditional masked-LM teachers and knowledge distillation into seq2seq students."""
from .errors import CmlmError, ConfigError, IntegrityError, TaskError
from .soft_labels import SoftLabelStore, extract_topk, precompute
from .teacher import TeacherTrainConfig, TeacherVariant, finetune_teacher
from .trainer import TrainConfig, train_student
from .transformer import ModelConfig, build_student, build_teacher

__version__ = "0.1.0"

__all__ = [
    "CmlmError", "ConfigError", "IntegrityError", "TaskError",
    "ModelConfig", "build_student", "build_teacher",
    "TeacherTrainConfig", "TeacherVariant", "finetune_teacher",
    "SoftLabelStore", "extract_topk", "precompute",
    "TrainConfig", "train_student",
]
