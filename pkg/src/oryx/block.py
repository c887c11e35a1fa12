"""The shared multi-mixer block: tied key/value projections feeding both a
softmax-attention path and a linear-recurrent path, mixer-specific queries,
short convolution on the shared keys/values, variant-specific RoPE / L2 /
activation / norm policies, a gated output, and a joint dual-state update.

Both mixer states (KV cache and recurrent matrix) are advanced from the
same shared keys and values at every position, independent of which mixer
produces the output — this is what makes mid-sequence mode switching
possible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mixers
from .mixers import KvCache, Support, attention_prefix, chunked_linear_forward
from .modes import MixerMode, ModeSchedule, segment_runs
from .tensor import (
    SeededRng,
    Tensor,
    causal_depthwise_conv,
    concat,
    group_norm,
    l2_normalize,
    matmul,
    rms_norm,
    rope_apply,
)

NORM_EPS = 1e-6

_PAIR_DEFAULTS = {
    # pair -> (rope_policy, qk_l2_policy, conv_activation, norm_kind)
    "TM": ("global", "none", "identity", "rms"),
    "TG": ("attention", "linear", "silu", "group"),
}

_ROPE_POLICIES = ("global", "attention", "none")
_L2_POLICIES = ("none", "linear", "linear_attn_key", "all")
_CONV_ACTS = ("identity", "silu")
_NORM_KINDS = ("rms", "grouped_rms", "group")


@dataclass
class BlockVariant:
    """Architectural variant of the shared block.

    ``pair`` selects the linear mixer paired with attention: "TM" pairs the
    scalar-decay (Mamba-2 style) rule, "TG" the gated delta rule. The
    remaining toggles default per pair to the reference configuration and
    exist for ablations.
    """

    pair: str = "TM"
    shared_query: bool = False
    use_conv: bool = True
    use_gate: bool = True
    rope_policy: str | None = None
    qk_l2_policy: str | None = None
    conv_activation: str | None = None
    norm_kind: str | None = None

    def __post_init__(self):
        if self.pair not in _PAIR_DEFAULTS:
            raise ValueError(f"unknown mixer pair {self.pair!r}")
        defaults = _PAIR_DEFAULTS[self.pair]
        if self.rope_policy is None:
            self.rope_policy = defaults[0]
        if self.qk_l2_policy is None:
            self.qk_l2_policy = defaults[1]
        if self.conv_activation is None:
            self.conv_activation = defaults[2]
        if self.norm_kind is None:
            self.norm_kind = defaults[3]
        if self.rope_policy not in _ROPE_POLICIES:
            raise ValueError(f"rope_policy must be one of {_ROPE_POLICIES}")
        if self.qk_l2_policy not in _L2_POLICIES:
            raise ValueError(f"qk_l2_policy must be one of {_L2_POLICIES}")
        if self.conv_activation not in _CONV_ACTS:
            raise ValueError(f"conv_activation must be one of {_CONV_ACTS}")
        if self.norm_kind not in _NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {_NORM_KINDS}")

    @property
    def linear_rule(self) -> str:
        return "mamba2" if self.pair == "TM" else "gdn"

    @property
    def query_activation(self) -> str:
        return "silu" if self.pair == "TG" else "identity"

    @property
    def pre_gate_norm(self) -> bool:
        # TM normalizes after gating, TG before.
        return self.pair == "TG"


@dataclass
class OryxBlockParams:
    """One block's weights. Key/value/gate/output projections and the short
    convolution are shared across mixer modes; each mode has its own query
    projection, and the linear rule owns the decay/write-gate parameters."""

    dim: int
    heads: int
    conv_width: int
    w_q_attn: Tensor
    w_q_lin: Tensor | None
    w_k: Tensor
    w_v: Tensor
    w_g: Tensor | None
    w_o: Tensor
    conv_w_k: Tensor | None
    conv_b_k: Tensor | None
    conv_w_v: Tensor | None
    conv_b_v: Tensor | None
    delta_w: Tensor
    delta_b: Tensor
    a_log: Tensor
    beta_w: Tensor | None
    norm_scale: Tensor

    @property
    def d_head(self) -> int:
        return self.dim // self.heads

    @staticmethod
    def init(
        dim: int,
        d_head: int,
        conv_width: int,
        variant: BlockVariant,
        rng: SeededRng,
        n_layers: int,
        std: float = 0.02,
    ) -> "OryxBlockParams":
        if dim % d_head != 0:
            raise ValueError("dim must be divisible by d_head")
        heads = dim // d_head

        def proj(tag, scale=std):
            return Tensor(rng.child(tag).truncated_normal((dim, dim), scale), requires_grad=True)

        resid_std = std / np.sqrt(2.0 * n_layers)
        w_q_lin = None if variant.shared_query else proj("q_lin")
        use_conv = variant.use_conv
        conv_bound = 1.0 / np.sqrt(conv_width)
        conv = lambda tag: Tensor(
            rng.child(tag).uniform((conv_width, dim), -conv_bound, conv_bound), requires_grad=True
        )
        zeros_bias = lambda: Tensor(np.zeros(dim), requires_grad=True)
        # decay parameterization: alpha = exp(-softplus(x w + b) * exp(a_log)),
        # initialized for slow decay (alpha near 1) at the start of training
        dt = rng.child("delta_b").uniform((heads,), 1e-3, 0.1)
        delta_b = Tensor(np.log(np.expm1(dt)), requires_grad=True)
        a_log = Tensor(np.log(rng.child("a_log").uniform((heads,), 1.0, 16.0)), requires_grad=True)
        return OryxBlockParams(
            dim=dim,
            heads=heads,
            conv_width=conv_width,
            w_q_attn=proj("q_attn"),
            w_q_lin=w_q_lin,
            w_k=proj("k"),
            w_v=proj("v"),
            w_g=proj("g") if variant.use_gate else None,
            w_o=proj("o", resid_std),
            conv_w_k=conv("conv_k") if use_conv else None,
            conv_b_k=zeros_bias() if use_conv else None,
            conv_w_v=conv("conv_v") if use_conv else None,
            conv_b_v=zeros_bias() if use_conv else None,
            delta_w=Tensor(rng.child("delta_w").truncated_normal((dim, heads), std), requires_grad=True),
            delta_b=delta_b,
            a_log=a_log,
            beta_w=(
                Tensor(rng.child("beta_w").truncated_normal((dim, heads), std), requires_grad=True)
                if variant.pair == "TG"
                else None
            ),
            norm_scale=Tensor(np.ones(dim), requires_grad=True),
        )

    def named_parameters(self, prefix: str = ""):
        for name in (
            "w_q_attn",
            "w_q_lin",
            "w_k",
            "w_v",
            "w_g",
            "w_o",
            "conv_w_k",
            "conv_b_k",
            "conv_w_v",
            "conv_b_v",
            "delta_w",
            "delta_b",
            "a_log",
            "beta_w",
            "norm_scale",
        ):
            p = getattr(self, name)
            if p is not None:
                yield prefix + name, p


@dataclass
class DualLayerState:
    """Per-layer decode state: the attention KV cache and the linear
    recurrent matrix, plus the short-conv tail (last width-1 pre-conv
    key/value rows) and the position counter. Both states advance at every
    position regardless of the selected output mode."""

    kv: KvCache
    rec: Tensor
    conv_k_tail: np.ndarray
    conv_v_tail: np.ndarray
    position: int = 0

    @staticmethod
    def fresh(params: OryxBlockParams) -> "DualLayerState":
        from .tensor import float_dtype

        d_head = params.d_head
        tail = max(params.conv_width - 1, 0)
        return DualLayerState(
            kv=KvCache(),
            rec=Tensor(np.zeros((params.heads, d_head, d_head), dtype=float_dtype())),
            conv_k_tail=np.zeros((tail, params.dim), dtype=float_dtype()),
            conv_v_tail=np.zeros((tail, params.dim), dtype=float_dtype()),
        )

    def memory_report(self) -> dict:
        return {
            "kv_bytes": self.kv.nbytes(),
            "recurrent_bytes": self.rec.data.nbytes
            + self.conv_k_tail.nbytes
            + self.conv_v_tail.nbytes,
            "positions": self.position,
        }


# ---------------------------------------------------------------------------
# block sub-operations
# ---------------------------------------------------------------------------

def split_heads(x: Tensor, heads: int) -> Tensor:
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def _activate(x: Tensor, kind: str) -> Tensor:
    return x.silu() if kind == "silu" else x


def compute_shared_kv(x: Tensor, params: OryxBlockParams, variant: BlockVariant, state: DualLayerState | None = None):
    """Shared key/value rows for every mixer: projection, short causal
    convolution (queries are never convolved), then the variant's post-conv
    activation. With a decode ``state`` the convolution consumes the stored
    tail rows; the tail is not advanced here."""
    k, v, _, _ = _compute_shared_kv_full(x, params, variant, state)
    return k, v


def _compute_shared_kv_full(x, params, variant, state=None):
    k_pre = matmul(x, params.w_k)
    v_pre = matmul(x, params.w_v)
    if variant.use_conv:
        t = x.shape[0]
        if state is not None and state.conv_k_tail.shape[0] > 0:
            k_in = concat([Tensor(state.conv_k_tail), k_pre], axis=0)
            v_in = concat([Tensor(state.conv_v_tail), v_pre], axis=0)
        else:
            k_in, v_in = k_pre, v_pre
        k = causal_depthwise_conv(k_in, params.conv_w_k, params.conv_b_k)
        v = causal_depthwise_conv(v_in, params.conv_w_v, params.conv_b_v)
        if k.shape[0] != t:
            k = k[-t:, :]
            v = v[-t:, :]
    else:
        k, v = k_pre, v_pre
    return _activate(k, variant.conv_activation), _activate(v, variant.conv_activation), k_pre, v_pre


def compute_query(x: Tensor, params: OryxBlockParams, variant: BlockVariant, mode: MixerMode) -> Tensor:
    """Mode-specific query projection (shared when the shared_query ablation
    is on), with the variant's query activation."""
    if mode is MixerMode.ATTENTION or variant.shared_query or params.w_q_lin is None:
        w = params.w_q_attn
    else:
        w = params.w_q_lin
    return _activate(matmul(x, w), variant.query_activation)


def support_values(x: Tensor, params: OryxBlockParams, variant: BlockVariant) -> Support:
    """Per-head decay (and write-strength for the gated delta rule) from the
    current inputs. Computed at every position so the joint state update is
    defined even when attention produces the output."""
    rate = (matmul(x, params.delta_w) + params.delta_b).softplus()
    alphas = (-(rate * params.a_log.exp())).exp()  # (T, H) in (0, 1)
    alphas = alphas.transpose(1, 0)
    betas = None
    if variant.linear_rule == "gdn":
        betas = matmul(x, params.beta_w).sigmoid().transpose(1, 0)
    return Support(alphas, betas)


def apply_positional_and_norm_policy(
    q: Tensor | None,
    k: Tensor,
    variant: BlockVariant,
    mode: MixerMode,
    positions,
    rope_base: float = 10000.0,
):
    """Mode-conditional query/key transforms on per-head tensors (..., T, d).

    RoPE rotates at absolute positions (policy "global" = both paths,
    "attention" = attention path only). L2 normalization is applied per the
    variant policy (the gated delta rule requires unit keys). Both views
    derive from the single shared post-conv key; the caller keeps the
    attention view for the KV cache and the linear view for the recurrent
    state.
    """
    attn = mode is MixerMode.ATTENTION
    if variant.rope_policy == "global" or (variant.rope_policy == "attention" and attn):
        if q is not None:
            q = rope_apply(q, rope_base, positions)
        k = rope_apply(k, rope_base, positions)
    pol = variant.qk_l2_policy
    l2_q = pol == "all" or (pol in ("linear", "linear_attn_key") and not attn)
    l2_k = pol in ("all", "linear_attn_key") or (pol == "linear" and not attn)
    if l2_q and q is not None:
        q = l2_normalize(q, NORM_EPS)
    if l2_k:
        k = l2_normalize(k, NORM_EPS)
    return q, k


def _apply_norm(x: Tensor, params: OryxBlockParams, variant: BlockVariant) -> Tensor:
    kind = variant.norm_kind
    if kind == "rms":
        return rms_norm(x, params.norm_scale, NORM_EPS)
    if kind == "grouped_rms":
        t, d = x.shape
        h = params.heads
        x3 = x.reshape(t, h, d // h)
        out = rms_norm(x3, params.norm_scale.reshape(h, d // h), NORM_EPS)
        return out.reshape(t, d)
    return group_norm(x, params.norm_scale, NORM_EPS, groups=params.heads)


def gated_output(o: Tensor, g_pre: Tensor | None, params: OryxBlockParams, variant: BlockVariant) -> Tensor:
    """Mixer output -> block output: gate with silu(G), normalize (before
    the gate for TG, after it for TM), project with the shared W_O."""
    if variant.pre_gate_norm:
        h = _apply_norm(o, params, variant)
        if variant.use_gate and g_pre is not None:
            h = h * g_pre.silu()
    else:
        h = o
        if variant.use_gate and g_pre is not None:
            h = h * g_pre.silu()
        h = _apply_norm(h, params, variant)
    return matmul(h, params.w_o)


# ---------------------------------------------------------------------------
# segmented forward engine (shared by training forward, prefill and decode)
# ---------------------------------------------------------------------------

def _process_block(
    x: Tensor,
    modes,
    params: OryxBlockParams,
    variant: BlockVariant,
    state: DualLayerState | None,
    chunk_size: int,
    rope_base: float,
) -> Tensor:
    """Run one block over ``x`` (T, D) with per-position ``modes``.

    With ``state`` the computation continues an ongoing sequence (decode /
    prefill) and the state is advanced in place; without it the block is a
    pure function of ``x`` starting at position 0 (training path).

    Attention positions read the full causal prefix of shared K/V (cache
    plus current batch); linear positions use the chunk-scan rule. The
    recurrent state rolls across every position regardless of mode, and
    every position's attention-view key/value is appended to the cache.
    """
    t, d = x.shape
    if len(modes) != t:
        raise ValueError(f"mode list covers {len(modes)} positions, input has {t}")
    heads = params.heads
    pos0 = state.position if state is not None else 0
    positions = np.arange(pos0, pos0 + t)

    k, v, k_pre, v_pre = _compute_shared_kv_full(x, params, variant, state)
    g_pre = matmul(x, params.w_g) if (variant.use_gate and params.w_g is not None) else None
    support = support_values(x, params, variant)

    k_h = split_heads(k, heads)
    v_h = split_heads(v, heads)

    runs = segment_runs(list(modes))
    any_attn = any(m is MixerMode.ATTENTION for _, _, m in runs)
    need_cache = state is not None

    q_attn = (
        split_heads(compute_query(x, params, variant, MixerMode.ATTENTION), heads) if any_attn else None
    )
    q_lin = None
    if any(m is MixerMode.LINEAR for _, _, m in runs):
        q_lin = split_heads(compute_query(x, params, variant, MixerMode.LINEAR), heads)

    qa_h, ka_h = (None, None)
    if any_attn or need_cache:
        qa_h, ka_h = apply_positional_and_norm_policy(
            q_attn, k_h, variant, MixerMode.ATTENTION, positions, rope_base
        )
    ql_h, kl_h = apply_positional_and_norm_policy(
        q_lin, k_h, variant, MixerMode.LINEAR, positions, rope_base
    )

    cached_k = cached_v = None
    if need_cache and len(state.kv) > 0:
        cached_k = Tensor(state.kv.keys())
        cached_v = Tensor(state.kv.values())

    rec = state.rec if state is not None else Tensor(
        np.zeros((heads, params.d_head, params.d_head), dtype=x.data.dtype)
    )

    outputs = []
    for lo, hi, mode in runs:
        sl = slice(lo, hi)
        if mode is MixerMode.LINEAR:
            seg_support = Support(
                support.alphas[..., sl],
                None if support.betas is None else support.betas[..., sl],
            )
            out, boundary = chunked_linear_forward(
                ql_h[:, sl, :],
                kl_h[:, sl, :],
                v_h[:, sl, :],
                seg_support,
                chunk_size,
                rule=variant.linear_rule,
                init_state=rec,
            )
            rec = boundary[-1]
            outputs.append(out)
        else:
            k_ctx = ka_h[:, :hi, :]
            v_ctx = v_h[:, :hi, :]
            k_positions = positions[:hi]
            if cached_k is not None:
                k_ctx = concat([cached_k, k_ctx], axis=-2)
                v_ctx = concat([cached_v, v_ctx], axis=-2)
                k_positions = np.concatenate([np.arange(pos0), k_positions])
            outputs.append(
                attention_prefix(qa_h[:, sl, :], k_ctx, v_ctx, positions[sl], k_positions)
            )
            # roll the recurrent state through this segment without outputs
            seg_support = Support(
                support.alphas[..., sl],
                None if support.betas is None else support.betas[..., sl],
            )
            n_chunks = (hi - lo + chunk_size - 1) // chunk_size
            _, boundary = chunked_linear_forward(
                kl_h[:, sl, :],  # query unused when no outputs are computed
                kl_h[:, sl, :],
                v_h[:, sl, :],
                seg_support,
                chunk_size,
                rule=variant.linear_rule,
                init_state=rec,
                output_chunks=[False] * n_chunks,
            )
            rec = boundary[-1]

    o = merge_heads(outputs[0] if len(outputs) == 1 else concat(outputs, axis=-2))
    y = gated_output(o, g_pre, params, variant)

    if state is not None:
        for i in range(t):
            state.kv.append(ka_h.data[:, i, :], v_h.data[:, i, :])
        state.rec = rec.detach()
        tail = params.conv_width - 1
        if variant.use_conv and tail > 0:
            buf_k = np.concatenate([state.conv_k_tail, k_pre.data], axis=0)
            buf_v = np.concatenate([state.conv_v_tail, v_pre.data], axis=0)
            state.conv_k_tail = buf_k[-tail:].copy()
            state.conv_v_tail = buf_v[-tail:].copy()
        state.position += t
    return y


def block_forward_train(
    x: Tensor,
    schedule: ModeSchedule,
    params: OryxBlockParams,
    variant: BlockVariant,
    rope_base: float = 10000.0,
) -> Tensor:
    """Pure training-path forward of one block under a mode schedule.

    Attention chunks attend over the entire causal prefix of shared K/V;
    linear chunks use the chunk scan with the recurrent state rolled across
    all chunks (including attention-assigned ones). Matches the step-by-step
    decode path within float tolerance.
    """
    if not schedule.covers(x.shape[0]):
        raise ValueError(f"schedule covers {schedule.length} positions, input has {x.shape[0]}")
    return _process_block(
        x, schedule.position_modes, params, variant, None, schedule.chunk_size, rope_base
    )


def block_decode_step(
    x_t: Tensor,
    mode: MixerMode,
    state: DualLayerState,
    params: OryxBlockParams,
    variant: BlockVariant,
    rope_base: float = 10000.0,
):
    """One decode step: shared k/v from the conv tail, KV cache appended AND
    recurrent state advanced regardless of mode, output from the selected
    mixer only. Returns (y_t, state); the state is advanced in place."""
    if x_t.ndim == 1:
        x_t = x_t.reshape(1, -1)
    y = _process_block(x_t, [mode], params, variant, state, 1, rope_base)
    return y, state
