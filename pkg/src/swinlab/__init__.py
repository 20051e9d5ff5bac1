"""Windowed-attention vision models built on a small reverse-mode tape.

The package provides, from scratch on top of numpy:

- a define-by-run autodiff engine with activation checkpointing
  (:mod:`swinlab.tensor`),
- window partitioning, cyclic shifts and shift masks (:mod:`swinlab.geometry`),
- scaled cosine attention with a learnable per-head temperature
  (:mod:`swinlab.attention`),
- relative position bias as either a learned table or a small coordinate MLP,
  with linear or log-spaced coordinates and bicubic table resampling
  (:mod:`swinlab.bias`),
- transformer blocks with pluggable normalization placement and hierarchical
  model assembly (:mod:`swinlab.blocks`),
- AdamW, gradient clipping and a warmup+cosine schedule (:mod:`swinlab.optim`),
- a deterministic training loop and window-size transfer (:mod:`swinlab.train`),
- a binary checkpoint format (:mod:`swinlab.checkpoint`) and a synthetic
  classification task (:mod:`swinlab.data`),
- the ``swinlab`` command line (:mod:`swinlab.cli`).
"""

from .attention import (
    AttentionConfig,
    AttentionWeights,
    attend_cosine,
    attend_dot,
    attend_sequential,
    attention_stats,
)
from .bias import (
    CPBNet,
    ParamTable,
    bicubic_transfer,
    cpb_bias,
    extrapolation_ratio,
    make_cpb_net,
    make_param_table,
    param_bias,
    precompute_bias,
    rel_coords,
)
from .blocks import (
    MODEL_PRESETS,
    BlockConfig,
    Model,
    ModelConfig,
    SPPRecord,
    build_model,
    count_params,
    parameter_manifest,
    preset_config,
    signal_propagation,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NUM_CLASSES, make_dataset
from .errors import (
    ConfigError,
    ContractError,
    GeometryError,
    NumericsError,
    OptimizerError,
    ParameterError,
    ScheduleError,
    ShapeError,
    SwinlabError,
    UsageError,
)
from .geometry import (
    MASK_NEG,
    RelIndex,
    cyclic_shift,
    relative_index,
    shift_attention_mask,
    window_partition,
    window_reverse,
)
from .optim import OptimState, Schedule, adamw_step, clip_grad_norm, lr_at
from .tensor import Tape, Tensor, checkpoint_segment, no_tape
from .train import (
    RunReport,
    StepRecord,
    TrainConfig,
    accuracy,
    cross_entropy,
    train,
    transfer_window,
)

__version__ = "0.1.0"
