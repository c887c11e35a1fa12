"""Closed-form FLOPs model for the sequence-mixing forward pass: causal
attention, the chunked linear RNN (four-step decomposition), and the
mixed-mode shared block, plus the compute-crossover length.

Only the large matrix products are counted (weight projections, gates,
norms, and small element-wise work are excluded); chunk routing enters in
expectation, with chunks assumed selected uniformly at random.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction


@dataclass
class CostBreakdown:
    """Per-component FLOP counts of one mixer forward pass (nonnegative
    integers, rounded from the closed forms)."""

    chunk_state: int
    state_passing: int
    intra_chunk: int
    inter_chunk: int
    attention_output: int

    @property
    def total(self) -> int:
        return (
            self.chunk_state
            + self.state_passing
            + self.intra_chunk
            + self.inter_chunk
            + self.attention_output
        )


def _check_dims(t: int, d_k: int, d_v: int) -> None:
    if t < 1 or d_k < 1 or d_v < 1:
        raise ValueError("dimensions must be positive")


def attention_flops(t: int, d_k: int, d_v: int) -> int:
    """Causal attention forward: T(T+1)(D_k + D_v), counting only the valid
    (causal) score and aggregation pairs."""
    _check_dims(t, d_k, d_v)
    return t * (t + 1) * (d_k + d_v)


def linear_flops(t: int, c: int, d_k: int, d_v: int) -> CostBreakdown:
    """Chunked linear-RNN forward at chunk size ``c``.

    chunk_state 2*T*Dk*Dv, state passing 2*T*Dk*Dv/C (a scan over the
    T/C boundary states; chunk count is rounded up when C does not divide
    T), intra-chunk 2*T*C*(Dk+Dv), inter-chunk 2*T*Dk*Dv.
    """
    _check_dims(t, d_k, d_v)
    if c < 1:
        raise ValueError("chunk size must be positive")
    n_chunks = -(-t // c)
    return CostBreakdown(
        chunk_state=2 * t * d_k * d_v,
        state_passing=2 * n_chunks * d_k * d_v,
        intra_chunk=2 * t * c * (d_k + d_v),
        inter_chunk=2 * t * d_k * d_v,
        attention_output=0,
    )


def oryx_flops(t: int, c: int, d_k: int, d_v: int, delta: float) -> CostBreakdown:
    """Mixed-mode shared-block forward with linear-routing probability
    ``delta``: the recurrent state updates for every chunk (chunk state +
    state passing), the linear output terms scale with delta, and the
    expected attention cost with (1 - delta)."""
    _check_dims(t, d_k, d_v)
    if not (0.0 <= delta <= 1.0):
        raise ValueError("delta must lie in [0, 1]")
    base = linear_flops(t, c, d_k, d_v)
    return CostBreakdown(
        chunk_state=base.chunk_state,
        state_passing=base.state_passing,
        intra_chunk=round(delta * base.intra_chunk),
        inter_chunk=round(delta * base.inter_chunk),
        attention_output=round((1.0 - delta) * attention_flops(t, d_k, d_v)),
    )


def attention_flops_simplified(t: int, c: int) -> int:
    """Attention total under the C = D_k = D_v simplification: 2*T^2*C."""
    return 2 * t * t * c

def oryx_flops_simplified(t: int, c: int, delta: float) -> float:
    """Mixed-mode total under the C = D_k = D_v simplification:
    2*T*C^2*(1 + 3*delta) + 2*(1 - delta)*T^2*C."""
    return 2 * t * c * c * (1 + 3 * delta) + 2 * (1 - delta) * t * t * c


def crossover_length(c: int, delta: float) -> int:
    """Smallest integer T beyond which the mixed-mode block uses less
    compute than pure attention under the simplified model:
    T > (1/delta + 3) * C."""
    if not (0.0 < delta <= 1.0):
        raise ValueError("delta must lie in (0, 1]")
    if c < 1:
        raise ValueError("chunk size must be positive")
    threshold = (Fraction(1) / Fraction(delta) + 3) * c  # exact in the given float
    return int(threshold) + 1  # smallest integer strictly above (floor + 1)


def flops_table(ts, cs, d_k: int, d_v: int, deltas) -> list[dict]:
    """Grid evaluation used by the CLI: one record per (T, C, delta)."""
    rows = []
    for t in ts:
        for c in cs:
            attn = attention_flops(t, d_k, d_v)
            lin = linear_flops(t, c, d_k, d_v)
            for delta in deltas:
                mixed = oryx_flops(t, c, d_k, d_v, delta)
                rows.append(
                    {
                        "T": t,
                        "C": c,
                        "delta": delta,
                        "attention": attn,
                        "linear": lin.total,
                        "oryx": mixed.total,
                        "crossover_T": crossover_length(c, delta),
                    }
                )
    return rows
