"""Chunked mixed-mode training: per-sequence random chunk-to-mixer
assignment, AdamW with decoupled weight decay, cosine learning-rate
schedule with linear warmup, and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ModelParams, cross_entropy_loss, model_forward
from .modes import MixerMode, ModeSchedule
from .tensor import NumericsError, SeededRng, Tensor


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    peak_lr: float = 3e-3
    min_lr: float = 3e-4
    warmup_frac: float = 0.10
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    attention_fraction: float = 0.25
    granularity: str = "chunk"  # or "sequence": whole sequence gets one mode
    adam_eps: float = 1e-8
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.attention_fraction < 1.0):
            raise ValueError("attention_fraction must lie strictly inside (0, 1)")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.granularity not in ("chunk", "sequence"):
            raise ValueError("granularity must be 'chunk' or 'sequence'")


@dataclass
class TrainExample:
    """One fixed-length training sequence; ``loss_mask`` selects the target
    positions (None trains on every next-token prediction)."""

    tokens: np.ndarray
    loss_mask: np.ndarray | None = None


def sample_mode_schedule(t: int, chunk_size: int, p: float, rng: SeededRng) -> ModeSchedule:
    """Independently assign each chunk to attention with probability ``p``,
    otherwise to the linear mixer. Sequence granularity is the special case
    chunk_size = t."""
    if not (0.0 < p < 1.0):
        raise ValueError("p must lie strictly inside (0, 1)")
    n_chunks = (t + chunk_size - 1) // chunk_size
    draws = rng.random_vector(n_chunks)
    modes = [MixerMode.ATTENTION if d < p else MixerMode.LINEAR for d in draws]
    return ModeSchedule(chunk_size, modes, length=t)


def cosine_lr(step: int, config: TrainConfig) -> float:
    """Linear ramp to the peak over the warmup steps, then a cosine decay
    from peak to min over the remainder."""
    warmup = round(config.warmup_frac * config.steps)
    if step < warmup:
        return config.peak_lr * step / warmup
    span = max(config.steps - warmup, 1)
    t = min((step - warmup) / span, 1.0)
    return config.min_lr + 0.5 * (config.peak_lr - config.min_lr) * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_optimizer(params: ModelParams) -> OptimizerState:
    opt = OptimizerState()
    for name, p in params.named_parameters():
        opt.m[name] = np.zeros_like(p.data)
        opt.v[name] = np.zeros_like(p.data)
    return opt


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``;
    returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adamw_step(
    params: ModelParams, grads: dict, opt: OptimizerState, lr: float, config: TrainConfig
) -> None:
    """Bias-corrected AdamW update with decoupled weight decay; vector
    parameters (biases, norm and gate scales, per-head decay parameters) are
    exempt from decay."""
    b1, b2 = config.betas
    opt.step += 1
    t = opt.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.named_parameters():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for {name!r}")
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        if config.weight_decay > 0 and p.data.ndim >= 2:
            p.data -= lr * config.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)


def train_step(
    batch: list,
    params: ModelParams,
    opt: OptimizerState,
    model_config: ModelConfig,
    train_config: TrainConfig,
    rng: SeededRng,
    step: int,
):
    """One optimization step: a fresh mode schedule per sequence, forward,
    masked cross-entropy, backward with gradients averaged over the batch,
    global-norm clipping, AdamW. Returns (loss, info)."""
    lr = cosine_lr(step, train_config)
    for p in params.parameters():
        p.grad = None
    losses = []
    schedules = []
    chunk = model_config.chunk_size
    for ex in batch:
        t = len(ex.tokens)
        c = t if train_config.granularity == "sequence" else chunk
        sched = sample_mode_schedule(t, c, train_config.attention_fraction, rng)
        schedules.append(sched)
        logits = model_forward(ex.tokens[:-1], sched_prefix(sched, t - 1), params, model_config)
        mask = None if ex.loss_mask is None else ex.loss_mask[1:]
        loss = cross_entropy_loss(logits, ex.tokens[1:], mask)
        if not np.isfinite(loss.data):
            raise NumericsError(
                f"non-finite loss at step {step} (lr={lr:.3e}, "
                f"schedule={''.join(m.value[0] for m in sched.chunk_modes)})"
            )
        (loss * (1.0 / len(batch))).backward()
        losses.append(float(loss.data))
    grads = {}
    for name, p in params.named_parameters():
        if p.grad is not None:
            grads[name] = p.grad
    grad_norm = clip_gradients(grads, train_config.grad_clip)
    adamw_step(params, grads, opt, lr, train_config)
    attn_frac = float(np.mean([s.attention_fraction() for s in schedules]))
    info = {
        "lr": lr,
        "loss": float(np.mean(losses)),
        "attention_fraction": attn_frac,
        "grad_norm": grad_norm,
    }
    return info["loss"], info


def sched_prefix(schedule: ModeSchedule, t: int) -> ModeSchedule:
    """Restriction of a schedule to the first t positions (targets are the
    sequence shifted by one, so the forward consumes T-1 tokens)."""
    return ModeSchedule.from_positions(schedule.position_modes[:t], schedule.chunk_size)


def train_loop(
    dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    rng: SeededRng,
    params: ModelParams | None = None,
    on_step=None,
):
    """Run the configured number of steps over an example iterator.

    ``dataset`` yields TrainExample items; ``on_step(step, info, params)``
    fires after each update. Returns (params, opt, history) where history
    holds one info record per step."""
    from .model import init_params

    data_iter = iter(dataset)
    if params is None:
        params = init_params(model_config, rng.child("init"))
    opt = init_optimizer(params)
    sched_rng = rng.child("schedules")
    history = []
    for step in range(train_config.steps):
        batch = [next(data_iter) for _ in range(train_config.batch_size)]
        loss, info = train_step(batch, params, opt, model_config, train_config, sched_rng, step)
        record = {"step": step, **info}
        history.append(record)
        if on_step is not None:
            on_step(step, record, params)
    return params, opt, history
