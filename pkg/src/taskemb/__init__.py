"""taskemb: desk-scale multi-task text embeddings.

A rotary-attention transformer encoder with task-routed low-rank adapters,
a three-stage training pipeline (masked-LM, pair contrastive, per-task
adapters), data construction utilities, and a retrieval-centric
evaluation harness, all on a small reverse-mode autodiff core.
"""

from .encoder import EncoderModel, ModelConfig, TaskKind
from .tensor import NumericError, Tensor, grad_check, no_grad
from .train import Adam, Phase, StagePlan, lr_schedule, run_stage1, run_stage2, run_stage3

__all__ = [
    "Adam",
    "EncoderModel",
    "ModelConfig",
    "NumericError",
    "Phase",
    "StagePlan",
    "TaskKind",
    "Tensor",
    "grad_check",
    "lr_schedule",
    "no_grad",
    "run_stage1",
    "run_stage2",
    "run_stage3",
]
