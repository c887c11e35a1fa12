"""Full language model: token embedding, pre-norm residual stack of shared
mixer blocks interleaved 1:1 with SwiGLU MLPs, final norm, untied output
head, and the cross-entropy objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .block import (
    NORM_EPS,
    BlockVariant,
    DualLayerState,
    OryxBlockParams,
    _process_block,
    block_forward_train,
)
from .modes import MixerMode, ModeSchedule
from .tensor import (
    SeededRng,
    Tensor,
    log_softmax,
    matmul,
    rms_norm,
    take_along_last,
    take_rows,
)


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 128
    n_layers: int = 4
    d_head: int = 16
    variant: BlockVariant = field(default_factory=BlockVariant)
    chunk_size: int = 16
    mlp_expansion: float = 2.0
    conv_width: int = 4
    rope_base: float = 10000.0
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.d_head != 0:
            raise ValueError("dim must be divisible by d_head")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if isinstance(self.variant, dict):
            self.variant = BlockVariant(**self.variant)

    @property
    def d_ff(self) -> int:
        return int(self.dim * self.mlp_expansion)

    @property
    def heads(self) -> int:
        return self.dim // self.d_head


@dataclass
class MlpParams:
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    def named_parameters(self, prefix: str = ""):
        yield prefix + "w_gate", self.w_gate
        yield prefix + "w_up", self.w_up
        yield prefix + "w_down", self.w_down


@dataclass
class ModelParams:
    embedding: Tensor
    blocks: list
    block_norms: list
    mlps: list
    mlp_norms: list
    final_norm: Tensor
    head: Tensor

    def named_parameters(self):
        yield "embedding", self.embedding
        for i, (b, bn, m, mn) in enumerate(
            zip(self.blocks, self.block_norms, self.mlps, self.mlp_norms)
        ):
            yield f"layers.{i}.block_norm", bn
            yield from b.named_parameters(f"layers.{i}.block.")
            yield f"layers.{i}.mlp_norm", mn
            yield from m.named_parameters(f"layers.{i}.mlp.")
        yield "final_norm", self.final_norm
        yield "head", self.head

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def init_params(config: ModelConfig, rng: SeededRng) -> ModelParams:
    """Deterministic truncated-normal initialization (std 0.02, cut at 2
    std); residual output projections are scaled down by 1/sqrt(2*n_layers)."""
    std = 0.02
    resid_std = std / np.sqrt(2.0 * config.n_layers)
    blocks, block_norms, mlps, mlp_norms = [], [], [], []
    for i in range(config.n_layers):
        lrng = rng.child(f"layer{i}")
        blocks.append(
            OryxBlockParams.init(
                config.dim,
                config.d_head,
                config.conv_width,
                config.variant,
                lrng.child("block"),
                config.n_layers,
                std,
            )
        )
        block_norms.append(Tensor(np.ones(config.dim), requires_grad=True))
        mrng = lrng.child("mlp")
        mlps.append(
            MlpParams(
                w_gate=Tensor(
                    mrng.child("gate").truncated_normal((config.dim, config.d_ff), std),
                    requires_grad=True,
                ),
                w_up=Tensor(
                    mrng.child("up").truncated_normal((config.dim, config.d_ff), std),
                    requires_grad=True,
                ),
                w_down=Tensor(
                    mrng.child("down").truncated_normal((config.d_ff, config.dim), resid_std),
                    requires_grad=True,
                ),
            )
        )
        mlp_norms.append(Tensor(np.ones(config.dim), requires_grad=True))
    return ModelParams(
        embedding=Tensor(
            rng.child("embedding").truncated_normal((config.vocab_size, config.dim), std),
            requires_grad=True,
        ),
        blocks=blocks,
        block_norms=block_norms,
        mlps=mlps,
        mlp_norms=mlp_norms,
        final_norm=Tensor(np.ones(config.dim), requires_grad=True),
        head=Tensor(
            rng.child("head").truncated_normal((config.dim, config.vocab_size), std),
            requires_grad=True,
        ),
    )


def _mlp_forward(x: Tensor, mlp: MlpParams) -> Tensor:
    return matmul(matmul(x, mlp.w_gate).silu() * matmul(x, mlp.w_up), mlp.w_down)


def _stack_forward(
    tokens,
    modes,
    params: ModelParams,
    config: ModelConfig,
    states: list[DualLayerState] | None = None,
    use_mlp: bool = True,
) -> Tensor:
    """Residual stack over a token block. With ``states`` the pass continues
    per-layer decode states in place (prefill/decode); without, it is the
    pure training path starting at position 0."""
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError("token id out of range")
    x = take_rows(params.embedding, tokens)
    for i in range(config.n_layers):
        h = rms_norm(x, params.block_norms[i], NORM_EPS)
        y = _process_block(
            h,
            modes,
            params.blocks[i],
            config.variant,
            states[i] if states is not None else None,
            config.chunk_size,
            config.rope_base,
        )
        x = x + y
        if use_mlp:
            h = rms_norm(x, params.mlp_norms[i], NORM_EPS)
            x = x + _mlp_forward(h, params.mlps[i])
    return matmul(rms_norm(x, params.final_norm, NORM_EPS), params.head)


def model_forward(tokens, schedule: ModeSchedule, params: ModelParams, config: ModelConfig) -> Tensor:
    """Logits (T, vocab) for a token sequence under a mode schedule shared
    by every layer."""
    tokens = np.asarray(tokens)
    if not schedule.covers(len(tokens)):
        raise ValueError("schedule does not cover the token sequence")
    return _stack_forward(tokens, schedule.position_modes, params, config)


def cross_entropy_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits``.

    ``mask`` optionally restricts the mean to selected positions (used to
    train on annotated answer tokens only)."""
    targets = np.asarray(targets)
    if logits.shape[0] != targets.shape[0]:
        raise ValueError("logits/targets length mismatch")
    nll = -take_along_last(log_softmax(logits), targets)
    if mask is None:
        return nll.mean()
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss mask selects no positions")
    return (nll * Tensor(mask.astype(nll.data.dtype))).sum() * (1.0 / n)


def count_params(config: ModelConfig) -> tuple[int, float]:
    """Closed-form parameter total and the worst-case shared fraction.

    The fraction is computed over the parameters active in a single mixer
    mode (shared weights plus that mode's exclusive ones), excluding the
    token embedding; the untied output head serves both modes and counts as
    shared. Returns (total including embedding, min over modes of
    shared / active).
    """
    if config.n_layers == 0:
        raise ValueError("shared fraction undefined for a zero-layer model")
    v = config.variant
    d, h, dff = config.dim, config.heads, config.d_ff
    shared = attn_only = lin_only = 0
    for _ in range(config.n_layers):
        shared += 3 * d * d  # w_k, w_v, w_o
        if v.use_gate:
            shared += d * d
        if v.use_conv:
            shared += 2 * (config.conv_width * d + d)
        shared += d  # block norm scale
        shared += 2 * d  # pre-norms
        shared += 3 * d * dff  # mlp
        if v.shared_query:
            shared += d * d
        else:
            attn_only += d * d
            lin_only += d * d
        lin_only += d * h + h + h  # decay projection, bias, log-scale
        if v.pair == "TG":
            lin_only += d * h
    shared += d  # final norm
    shared += d * config.vocab_size  # untied head
    total = shared + attn_only + lin_only + config.vocab_size * d
    frac = min(
        shared / (shared + attn_only),
        shared / (shared + lin_only),
    )
    return total, frac


def state_size_report(config: ModelConfig) -> dict:
    """Per-layer dual-state sizes in floats: the fixed recurrent matrix vs
    per-position KV-cache growth."""
    rec = config.heads * config.d_head * config.d_head
    return {
        "recurrent_floats_per_layer": rec,
        "recurrent_floats_total": rec * config.n_layers,
        "kv_floats_per_position_per_layer": 2 * config.dim,
        "kv_floats_per_position_total": 2 * config.dim * config.n_layers,
    }
