"""Oryx: a multi-mixer sequence-modeling library where softmax attention
and a linear recurrent mixer share one block, one set of key/value
projections, and one jointly-updated dual state, so the active mixer can
change anywhere in a sequence."""

from .block import (
    BlockVariant,
    DualLayerState,
    OryxBlockParams,
    block_decode_step,
    block_forward_train,
)
from .data import MqarSpec, NeedleSpec, generate_mqar, generate_needle
from .flops import CostBreakdown, attention_flops, crossover_length, linear_flops, oryx_flops
from .inference import (
    InferenceSession,
    NllCurve,
    cross_mode_retrieval_eval,
    generate,
    nll_by_position,
    prefill,
)
from .mixers import (
    KvCache,
    Support,
    attention_decode_step,
    attention_parallel,
    build_decay_mask,
    chunked_linear_forward,
    gdn_parallel,
    gdn_recurrent_step,
    mamba2_parallel,
    mamba2_recurrent_step,
)
from .model import (
    ModelConfig,
    ModelParams,
    count_params,
    cross_entropy_loss,
    init_params,
    model_forward,
)
from .modes import MixerMode, ModePlan, ModeSchedule
from .tensor import (
    NumericsError,
    SeededRng,
    Tensor,
    finite_diff_grad_check,
    no_grad,
    set_precision,
    using_precision,
)
from .training import (
    TrainConfig,
    TrainExample,
    adamw_step,
    cosine_lr,
    sample_mode_schedule,
    train_loop,
    train_step,
)

__version__ = "0.1.0"
