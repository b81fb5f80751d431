"""Masked-image-modeling pretraining and driver-behavior classification.

Self-contained CPU stack: a tape-autodiff tensor core, a hierarchical
windowed-attention encoder, random block masking with pixel regression,
a six-strategy augmentation suite, and training/evaluation tooling.
"""

from .rng import Rng
from .tensor import Tensor, Tape, ShapeError, grad_check
from .swin import (
    ConfigError,
    SwinConfig,
    SwinEncoder,
    SwinClassifier,
    count_attention_flops,
    count_flops,
    count_params,
)
from .mim import MaskSpec, MaskMap, MIMPretrainModel, generate_mask, masked_l1_loss
from .config import RunConfig, load_config
from .train import AdamW, CosineSchedule, Metrics, evaluate, run_finetune, run_pretrain

__all__ = [
    "Rng", "Tensor", "Tape", "ShapeError", "grad_check",
    "ConfigError", "SwinConfig", "SwinEncoder", "SwinClassifier",
    "count_attention_flops", "count_flops", "count_params",
    "MaskSpec", "MaskMap", "MIMPretrainModel", "generate_mask", "masked_l1_loss",
    "RunConfig", "load_config",
    "AdamW", "CosineSchedule", "Metrics", "evaluate", "run_finetune", "run_pretrain",
]
