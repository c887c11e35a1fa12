"""The three sequence mixers in parallel, chunked, and recurrent forms.

All functions take per-head tensors with any number of leading batch axes:
queries/keys ``(..., T, d_k)``, values ``(..., T, d_v)``, per-step gates
``(..., T)``, recurrent states ``(..., d_k, d_v)``. The parallel, chunked,
and step-by-step forms of each linear mixer are interchangeable up to
floating-point error; the test suite enforces this equivalence, which is
the correctness ground truth for the chunked algorithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    NumericsError,
    Tensor,
    decay_mask,
    matmul,
    row_softmax,
    tri_solve_unit_lower,
)


@dataclass
class Support:
    """Per-timestep gate values for the linear mixers: decay ``alphas``
    (all rules) and write strength ``betas`` (gated delta rule only)."""

    alphas: Tensor
    betas: Tensor | None = None


# ---------------------------------------------------------------------------
# softmax attention
# ---------------------------------------------------------------------------

def attention_prefix(q: Tensor, k: Tensor, v: Tensor, q_positions, k_positions) -> Tensor:
    """Causal softmax attention of a query block against a key/value prefix.

    Position arrays give absolute indices; query row i may attend to key
    column j iff ``k_positions[j] <= q_positions[i]``. Scores are scaled by
    1/sqrt(d_k).
    """
    d_k = q.shape[-1]
    qp = np.asarray(q_positions)
    kp = np.asarray(k_positions)
    mask = np.where(kp[None, :] <= qp[:, None], 0.0, -np.inf).astype(q.data.dtype)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    weights = row_softmax(scores, mask)
    return matmul(weights, v)


def attention_parallel(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Full-sequence causal attention: row t is the softmax over positions
    <= t of scaled query-key scores, aggregating values.

    Rows are processed in blocks against their causal prefix only, so the
    score work tracks the T(T+1)(Dk+Dv) cost of the valid pairs instead of
    the full T^2 rectangle (each row's result is unchanged: softmax is
    row-local)."""
    t = q.shape[-2]
    pos = np.arange(t)
    block = max(1, t // 16)
    if block >= t:
        return attention_prefix(q, k, v, pos, pos)
    outs = []
    for lo in range(0, t, block):
        hi = min(lo + block, t)
        outs.append(
            attention_prefix(
                q[..., lo:hi, :], k[..., :hi, :], v[..., :hi, :], pos[lo:hi], pos[:hi]
            )
        )
    from .tensor import concat

    return concat(outs, axis=-2)


class KvCache:
    """Append-only store of past key and value rows for attention decode.

    Rows are plain arrays (no tape); key and value lists always have equal
    length and rows are never modified after append.
    """

    def __init__(self):
        self._keys: list[np.ndarray] = []
        self._values: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._keys)

    def append(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        self._keys.append(np.asarray(k_row).copy())
        self._values.append(np.asarray(v_row).copy())

    def keys(self) -> np.ndarray:
        return np.stack(self._keys, axis=-2)

    def values(self) -> np.ndarray:
        return np.stack(self._values, axis=-2)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._keys) + sum(a.nbytes for a in self._values)


def attention_decode_step(cache: KvCache, q_t: Tensor, k_t: Tensor, v_t: Tensor):
    """One attention decode step: append (k_t, v_t), then read the full
    cache with q_t. Output equals the matching row of the parallel form."""
    cache.append(k_t.data, v_t.data)
    keys = Tensor(cache.keys())
    values = Tensor(cache.values())
    d_k = q_t.shape[-1]
    scores = matmul(q_t[..., None, :], keys.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    weights = row_softmax(scores)
    out = matmul(weights, values)[..., 0, :]
    return out, cache


# ---------------------------------------------------------------------------
# decay mask
# ---------------------------------------------------------------------------

def build_decay_mask(alphas: Tensor) -> Tensor:
    """Lower-triangular cumulative-decay mask from per-step factors in
    [0, 1]: entry (i, j) is the product of factors j+1..i, the diagonal is
    exactly 1 and the strict upper triangle exactly 0."""
    a = alphas.data
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("decay factors must lie in [0, 1]")
    return decay_mask(alphas)


# ---------------------------------------------------------------------------
# recurrent steps
# ---------------------------------------------------------------------------

def mamba2_recurrent_step(state: Tensor, q_t: Tensor, k_t: Tensor, v_t: Tensor, alpha_t):
    """Scalar-decay linear RNN step: S' = alpha * S + k^T v, o = q S'."""
    alpha = alpha_t if isinstance(alpha_t, Tensor) else Tensor(np.asarray(alpha_t))
    write = matmul(k_t[..., :, None], v_t[..., None, :])
    new_state = state * alpha[..., None, None] + write
    out = matmul(q_t[..., None, :], new_state)[..., 0, :]
    return new_state, out


def gdn_recurrent_step(state: Tensor, q_t: Tensor, k_t: Tensor, v_t: Tensor, alpha_t, beta_t):
    """Gated delta rule step: decay, erase along the current key direction,
    write the scaled key-value outer product, then read out with q.

    S' = alpha * (I - beta k^T k) S + beta k^T v;  o = q S'.
    """
    alpha = alpha_t if isinstance(alpha_t, Tensor) else Tensor(np.asarray(alpha_t))
    beta = beta_t if isinstance(beta_t, Tensor) else Tensor(np.asarray(beta_t))
    k_s = matmul(k_t[..., None, :], state)  # (..., 1, d_v)
    erased = state - matmul(k_t[..., :, None], k_s) * beta[..., None, None]
    write = matmul(k_t[..., :, None], v_t[..., None, :]) * beta[..., None, None]
    new_state = erased * alpha[..., None, None] + write
    out = matmul(q_t[..., None, :], new_state)[..., 0, :]
    return new_state, out


# ---------------------------------------------------------------------------
# parallel forms
# ---------------------------------------------------------------------------

def mamba2_parallel(q: Tensor, k: Tensor, v: Tensor, alphas: Tensor) -> Tensor:
    """Masked parallel form of the scalar-decay rule: (Gamma o (Q K^T)) V."""
    gamma = build_decay_mask(alphas)
    scores = matmul(q, k.swapaxes(-1, -2)) * gamma
    return matmul(scores, v)


def gdn_parallel(q: Tensor, k: Tensor, v: Tensor, alphas: Tensor, betas: Tensor) -> Tensor:
    """Parallel form of the gated delta rule:

        (Gamma o (Q K^T)) [I + strictlower(diag(beta) (Gamma o (K K^T)))]^{-1} diag(beta) V

    The bracketed system is unit lower triangular and solved by forward
    substitution. Equals the step-by-step rollout from a zero state.
    """
    gamma = build_decay_mask(alphas)
    qk = matmul(q, k.swapaxes(-1, -2)) * gamma
    kk = matmul(k, k.swapaxes(-1, -2)) * gamma * betas[..., :, None]
    pseudo_v = tri_solve_unit_lower(kk, v * betas[..., :, None])
    return matmul(qk, pseudo_v)


# ---------------------------------------------------------------------------
# chunked scan
# ---------------------------------------------------------------------------

def _chunk_step(q, k, v, alphas, betas, state, rule: str, compute_output: bool):
    """Advance the recurrent state across one chunk; optionally produce the
    chunk's outputs. Returns (output or None, new_state).

    The chunk computation follows the standard four-step decomposition:
    a chunk-state contribution from local key/value writes, state passing
    from the incoming state, intra-chunk masked interactions, and an
    inter-chunk readout of the incoming state.
    """
    gamma = decay_mask(alphas)  # (..., c, c); factors validated upstream
    # inclusive-from-chunk-start decay products, gamma_t = prod_{s<=t} a_s
    incl = gamma[..., :, 0] * alphas[..., 0:1]
    tail = gamma[..., -1, :]  # prod_{s>t} a_s within the chunk

    if rule == "gdn":
        # Pseudo-values u solve (I + strictlower(diag(b)(Gamma o K K^T))) U
        #   = diag(b) V - (incl * b) o (K S_in): each row folds the erase
        # terms of every earlier in-chunk step and of the incoming state.
        kk = matmul(k, k.swapaxes(-1, -2)) * gamma * betas[..., :, None]
        rhs = v * betas[..., :, None] - matmul(k, state) * (incl * betas)[..., :, None]
        u = tri_solve_unit_lower(kk, rhs)
    elif rule == "mamba2":
        u = v
    else:
        raise ValueError(f"unknown linear rule {rule!r}")

    out = None
    if compute_output:
        inter = matmul(q, state) * incl[..., :, None]
        intra = matmul(matmul(q, k.swapaxes(-1, -2)) * gamma, u)
        out = inter + intra
    chunk_state = matmul((k * tail[..., :, None]).swapaxes(-1, -2), u)
    new_state = state * incl[..., -1:, None] + chunk_state
    return out, new_state


def chunked_linear_forward(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    support: Support,
    chunk_size: int,
    rule: str = "mamba2",
    init_state: Tensor | None = None,
    output_chunks=None,
):
    """Chunk-scan evaluation of a linear mixer over a full sequence.

    The sequence is split into ``chunk_size`` pieces (a ragged final chunk
    is processed as a shorter chunk with identical semantics). Output rows
    equal the parallel/recurrent forms; ``boundary_states[i]`` is the
    recurrent state after the last token of chunk i.

    ``output_chunks`` optionally switches off output computation per chunk
    (rows left at zero) while the state still rolls through every chunk.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    t = q.shape[-2]
    d_v = v.shape[-1]
    alphas, betas = support.alphas, support.betas
    if rule == "gdn" and betas is None:
        raise ValueError("gdn rule requires betas")
    n_chunks = (t + chunk_size - 1) // chunk_size
    if output_chunks is None:
        output_chunks = [True] * n_chunks
    if init_state is not None:
        state = init_state
    else:
        state = Tensor(np.zeros(q.shape[:-2] + (q.shape[-1], d_v), dtype=q.data.dtype))
    outputs: list[Tensor | None] = []
    boundary_states: list[Tensor] = []
    for c in range(n_chunks):
        lo, hi = c * chunk_size, min((c + 1) * chunk_size, t)
        sl = slice(lo, hi)
        out, state = _chunk_step(
            q[..., sl, :],
            k[..., sl, :],
            v[..., sl, :],
            alphas[..., sl],
            None if betas is None else betas[..., sl],
            state,
            rule,
            bool(output_chunks[c]),
        )
        if out is None:
            out = Tensor(np.zeros(q.shape[:-2] + (hi - lo, d_v), dtype=q.data.dtype))
        outputs.append(out)
        boundary_states.append(state)
    from .tensor import concat

    return concat(outputs, axis=-2), boundary_states


def recurrent_rollout(q, k, v, support: Support, rule: str = "mamba2", init_state=None):
    """Step-by-step reference rollout of a linear mixer (oracle for the
    parallel and chunked forms)."""
    t = q.shape[-2]
    if init_state is None:
        state = Tensor(np.zeros(q.shape[:-2] + (q.shape[-1], v.shape[-1]), dtype=q.data.dtype))
    else:
        state = init_state
    outs = []
    for i in range(t):
        if rule == "mamba2":
            state, o = mamba2_recurrent_step(
                state, q[..., i, :], k[..., i, :], v[..., i, :], support.alphas[..., i]
            )
        elif rule == "gdn":
            state, o = gdn_recurrent_step(
                state,
                q[..., i, :],
                k[..., i, :],
                v[..., i, :],
                support.alphas[..., i],
                support.betas[..., i],
            )
        else:
            raise ValueError(f"unknown linear rule {rule!r}")
        outs.append(o[..., None, :])
    from .tensor import concat

    return concat(outs, axis=-2), state
