import numpy as np
import pytest

from oryx.flops import (
    attention_flops,
    attention_flops_simplified,
    crossover_length,
    flops_table,
    linear_flops,
    oryx_flops,
    oryx_flops_simplified,
)
from oryx.mixers import Support, attention_parallel, chunked_linear_forward
from oryx.tensor import SeededRng, Tensor, count_matmul_flops


def test_attention_flops_substitutions():
    assert attention_flops(1, 1, 1) == 4
    assert attention_flops(4, 2, 2) == 80


def test_attention_flops_simplification_identity():
    # with C = Dk = Dv the exact count is 2*T^2*C plus the +T correction
    for t, c in ((16, 4), (128, 32)):
        assert attention_flops(t, c, c) == 2 * t * t * c + 2 * t * c
        assert attention_flops_simplified(t, c) == 2 * t * t * c


def test_linear_flops_example_total():
    got = linear_flops(1024, 64, 64, 64)
    assert got.total == 33_685_504
    assert got.total == 8 * 1024 * 64 * 64 + 2 * 1024 * 64


def test_linear_flops_components():
    b = linear_flops(64, 1, 8, 16)
    assert b.state_passing == 2 * 64 * 8 * 16  # C=1: one state per position
    assert b.chunk_state == 2 * 64 * 8 * 16
    assert b.inter_chunk == 2 * 64 * 8 * 16
    assert b.intra_chunk == 2 * 64 * 1 * (8 + 16)
    assert b.attention_output == 0


def test_linear_flops_component_sum_matches_closed_form():
    rng = SeededRng(0)
    for _ in range(25):
        t = int(rng.integers(1, 200))
        c = int(rng.integers(1, 32))
        dk = int(rng.integers(1, 48))
        dv = int(rng.integers(1, 48))
        b = linear_flops(t, c, dk, dv)
        n_chunks = -(-t // c)
        want = 4 * t * dk * dv + 2 * t * c * (dk + dv) + 2 * n_chunks * dk * dv
        assert b.total == want


def test_oryx_flops_boundaries():
    lin = linear_flops(256, 16, 16, 16)
    full_lin = oryx_flops(256, 16, 16, 16, 1.0)
    assert full_lin.attention_output == 0
    assert full_lin.total == lin.total
    full_attn = oryx_flops(256, 16, 16, 16, 0.0)
    assert full_attn.intra_chunk == 0 and full_attn.inter_chunk == 0
    assert full_attn.attention_output == attention_flops(256, 16, 16)
    assert full_attn.total > attention_flops(256, 16, 16)  # state overhead


def test_oryx_beats_attention_at_long_context():
    mixed = oryx_flops(2048, 128, 128, 128, 0.75)
    assert mixed.total < attention_flops(2048, 128, 128)


def test_crossover_values():
    assert crossover_length(128, 0.75) == 555
    assert crossover_length(128, 1.0) == 4 * 128 + 1
    assert crossover_length(16, 0.5) == 81


def test_crossover_is_exact_threshold_of_simplified_model():
    for c in (8, 32, 128):
        for delta in (0.25, 0.5, 0.75, 1.0):
            t_star = crossover_length(c, delta)
            assert oryx_flops_simplified(t_star, c, delta) < attention_flops_simplified(t_star, c)
            assert oryx_flops_simplified(t_star - 1, c, delta) >= attention_flops_simplified(
                t_star - 1, c
            )


def test_oryx_flops_monotonicity_in_delta():
    # long context: attention dominates, more linear routing saves compute
    deltas = np.linspace(0.0, 1.0, 9)
    long_ctx = [oryx_flops(2048, 64, 64, 64, d).total for d in deltas]
    assert all(a > b for a, b in zip(long_ctx, long_ctx[1:]))
    # tiny context: state/linear terms dominate, linear routing costs more
    short_ctx = [oryx_flops(8, 128, 128, 128, d).total for d in deltas]
    assert all(a < b for a, b in zip(short_ctx, short_ctx[1:]))


def test_flops_validation():
    with pytest.raises(ValueError):
        attention_flops(0, 1, 1)
    with pytest.raises(ValueError):
        linear_flops(8, 0, 4, 4)
    with pytest.raises(ValueError):
        oryx_flops(8, 4, 4, 4, 1.5)
    with pytest.raises(ValueError):
        crossover_length(4, 0.0)


def test_flops_table_rows():
    rows = flops_table([256], [16], 16, 16, [0.75])
    assert len(rows) == 1
    r = rows[0]
    assert r["attention"] == attention_flops(256, 16, 16)
    assert r["crossover_T"] == crossover_length(16, 0.75)


def test_instrumented_counter_matches_formulas_small_grid():
    # the full stated grid runs in the acceptance suite; this covers one cell
    t, c = 256, 16
    rng = SeededRng(1)
    q = Tensor(rng.normal((t, c)))
    k = Tensor(rng.normal((t, c)))
    v = Tensor(rng.normal((t, c)))
    al = Tensor(rng.uniform((t,), 0.5, 0.999))
    with count_matmul_flops() as counter:
        attention_parallel(q, k, v)
    attn = attention_flops(t, c, c)
    assert abs(counter.flops - attn) / attn < 0.15
    with count_matmul_flops() as counter:
        chunked_linear_forward(q, k, v, Support(al), c, "mamba2")
    lin = linear_flops(t, c, c, c).total
    assert abs(counter.flops - lin) / lin < 0.15
