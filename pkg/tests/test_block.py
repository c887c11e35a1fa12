import numpy as np
import pytest

from oryx import block as blk
from oryx.block import (
    BlockVariant,
    DualLayerState,
    OryxBlockParams,
    apply_positional_and_norm_policy,
    block_decode_step,
    block_forward_train,
    compute_query,
    compute_shared_kv,
    gated_output,
    split_heads,
)
from oryx.modes import MixerMode, ModeSchedule
from oryx.tensor import SeededRng, Tensor, matmul, using_precision

A, L = MixerMode.ATTENTION, MixerMode.LINEAR


def make_block(pair="TM", dim=16, d_head=8, width=4, seed=3, **kw):
    variant = BlockVariant(pair=pair, **kw)
    params = OryxBlockParams.init(dim, d_head, width, variant, SeededRng(seed), n_layers=2)
    return variant, params


def test_variant_defaults_per_pair():
    tm = BlockVariant(pair="TM")
    assert (tm.rope_policy, tm.qk_l2_policy, tm.conv_activation, tm.norm_kind) == (
        "global", "none", "identity", "rms")
    assert tm.linear_rule == "mamba2" and tm.query_activation == "identity"
    tg = BlockVariant(pair="TG")
    assert (tg.rope_policy, tg.qk_l2_policy, tg.conv_activation, tg.norm_kind) == (
        "attention", "linear", "silu", "group")
    assert tg.linear_rule == "gdn" and tg.query_activation == "silu"
    with pytest.raises(ValueError):
        BlockVariant(pair="XX")
    with pytest.raises(ValueError):
        BlockVariant(rope_policy="sometimes")


def test_shared_kv_no_conv_is_plain_projection():
    variant, params = make_block(use_conv=False)
    x = Tensor(SeededRng(0).normal((6, 16)))
    k, v = compute_shared_kv(x, params, variant)
    assert np.array_equal(k.data, matmul(x, params.w_k).data)
    assert np.array_equal(v.data, matmul(x, params.w_v).data)


def test_shared_kv_delta_kernel_equals_no_conv():
    variant, params = make_block()
    w = np.zeros((4, 16))
    w[0] = 1.0
    params.conv_w_k.data = w.astype(params.conv_w_k.data.dtype)
    params.conv_w_v.data = w.astype(params.conv_w_v.data.dtype)
    x = Tensor(SeededRng(1).normal((5, 16)))
    k, v = compute_shared_kv(x, params, variant)
    nc_variant, _ = make_block(use_conv=False)
    k2, v2 = compute_shared_kv(x, params, nc_variant)
    assert np.array_equal(k.data, k2.data)
    assert np.array_equal(v.data, v2.data)


def test_shared_kv_matches_composition_oracle():
    with using_precision("f64"):
        from oryx.tensor import causal_depthwise_conv

        variant, params = make_block(pair="TG")
        x = Tensor(SeededRng(2).normal((7, 16)))
        k, v = compute_shared_kv(x, params, variant)
        want_k = causal_depthwise_conv(
            matmul(x, params.w_k), params.conv_w_k, params.conv_b_k
        ).silu()
        assert np.abs(k.data - want_k.data).max() < 1e-12
        assert (v.data != matmul(x, params.w_v).data).any()


def test_query_shared_toggle_bitwise_equal():
    variant, params = make_block(shared_query=True)
    x = Tensor(SeededRng(3).normal((4, 16)))
    qa = compute_query(x, params, variant, A)
    ql = compute_query(x, params, variant, L)
    assert np.array_equal(qa.data, ql.data)
    assert params.w_q_lin is None


def test_query_activation_by_pair():
    x = Tensor(SeededRng(4).normal((4, 16)))
    variant, params = make_block(pair="TM")
    assert np.array_equal(compute_query(x, params, variant, A).data, matmul(x, params.w_q_attn).data)
    variant, params = make_block(pair="TG")
    want = matmul(x, params.w_q_lin).silu()
    assert np.abs(compute_query(x, params, variant, L).data - want.data).max() < 1e-7


def test_policy_rope_identity_at_position_zero():
    variant, params = make_block(pair="TM")
    rng = SeededRng(5)
    q = Tensor(rng.normal((2, 1, 8)))
    k = Tensor(rng.normal((2, 1, 8)))
    q2, k2 = apply_positional_and_norm_policy(q, k, variant, A, np.array([0]))
    assert np.array_equal(q2.data, q.data)
    assert np.array_equal(k2.data, k.data)


def test_policy_tg_linear_unit_norms():
    variant, params = make_block(pair="TG")
    rng = SeededRng(6)
    q = Tensor(rng.normal((2, 5, 8)))
    k = Tensor(rng.normal((2, 5, 8)))
    q2, k2 = apply_positional_and_norm_policy(q, k, variant, L, np.arange(5))
    assert np.abs(np.linalg.norm(q2.data, axis=-1) - 1.0).max() < 1e-5
    assert np.abs(np.linalg.norm(k2.data, axis=-1) - 1.0).max() < 1e-5
    # attention side of TG gets RoPE, not L2
    q3, k3 = apply_positional_and_norm_policy(q, k, variant, A, np.arange(5))
    assert np.abs(np.linalg.norm(q3.data, axis=-1) - np.linalg.norm(q.data, axis=-1)).max() < 1e-5
    assert (np.abs(np.linalg.norm(k3.data, axis=-1) - 1.0) > 1e-3).any()


def test_policy_tm_norm_preserved_under_rope():
    variant, params = make_block(pair="TM")
    rng = SeededRng(7)
    q = Tensor(rng.normal((1, 6, 8)))
    k = Tensor(rng.normal((1, 6, 8)))
    for mode in (A, L):
        q2, k2 = apply_positional_and_norm_policy(q, k, variant, mode, np.arange(6))
        assert np.abs(
            np.linalg.norm(q2.data, axis=-1) - np.linalg.norm(q.data, axis=-1)
        ).max() < 1e-5
        assert np.abs(
            np.linalg.norm(k2.data, axis=-1) - np.linalg.norm(k.data, axis=-1)
        ).max() < 1e-5
        assert not np.array_equal(q2.data, q.data)


def test_gated_output_gate_off_is_norm_then_project():
    from oryx.tensor import rms_norm

    variant, params = make_block(use_gate=False)
    o = Tensor(SeededRng(8).normal((5, 16)))
    y = gated_output(o, None, params, variant)
    want = matmul(rms_norm(o, params.norm_scale, blk.NORM_EPS), params.w_o)
    assert np.array_equal(y.data, want.data)


def test_gated_output_tg_zero_gate_closes():
    variant, params = make_block(pair="TG")
    o = Tensor(SeededRng(9).normal((5, 16)))
    y = gated_output(o, Tensor(np.zeros((5, 16))), params, variant)
    assert np.array_equal(y.data, np.zeros((5, 16)))


def test_gated_output_matches_composition_oracle():
    with using_precision("f64"):
        from oryx.tensor import group_norm, rms_norm

        rng = SeededRng(10)
        o = Tensor(rng.normal((4, 16)))
        g = Tensor(rng.normal((4, 16)))
        variant, params = make_block(pair="TM")
        want = matmul(rms_norm(o * g.silu(), params.norm_scale, blk.NORM_EPS), params.w_o)
        assert np.abs(gated_output(o, g, params, variant).data - want.data).max() < 1e-12
        variant, params = make_block(pair="TG")
        want = matmul(group_norm(o, params.norm_scale, blk.NORM_EPS, 2) * g.silu(), params.w_o)
        assert np.abs(gated_output(o, g, params, variant).data - want.data).max() < 1e-12


@pytest.mark.parametrize("pair", ["TM", "TG"])
def test_train_decode_equivalence_f32(pair):
    variant, params = make_block(pair=pair)
    t, c = 12, 4
    x = Tensor(SeededRng(11).normal((t, 16)))
    rng = SeededRng(12)
    for _ in range(3):
        modes = [A if rng.random() < 0.5 else L for _ in range(t)]
        sched = ModeSchedule.from_positions(modes, c)
        y = block_forward_train(x, sched, params, variant)
        state = DualLayerState.fresh(params)
        for i in range(t):
            y_i, state = block_decode_step(x[i, :], modes[i], state, params, variant)
            assert np.abs(y_i.data[0] - y.data[i]).max() < 1e-5


@pytest.mark.parametrize("pair", ["TM", "TG"])
def test_degenerate_schedules_match_pure_paths(pair):
    variant, params = make_block(pair=pair)
    t = 8
    x = Tensor(SeededRng(13).normal((t, 16)))
    for mode in (A, L):
        one_chunk = block_forward_train(x, ModeSchedule.constant(mode, t, t), params, variant)
        chunked = block_forward_train(x, ModeSchedule.constant(mode, t, 4), params, variant)
        assert np.abs(one_chunk.data - chunked.data).max() < 1e-5


def test_dual_state_mode_independent_exactly():
    variant, params = make_block(pair="TG")
    x = Tensor(SeededRng(14).normal((10, 16)))
    seqs = ([A] * 10, [L] * 10, [A, L] * 5, [L, L, L, A, A, A, L, A, L, A])
    states = []
    for modes in seqs:
        st = DualLayerState.fresh(params)
        for i in range(10):
            block_decode_step(x[i, :], modes[i], st, params, variant)
        states.append(st)
    ref = states[0]
    for st in states[1:]:
        assert np.array_equal(st.kv.keys(), ref.kv.keys())
        assert np.array_equal(st.kv.values(), ref.kv.values())
        assert np.array_equal(st.rec.data, ref.rec.data)
        assert np.array_equal(st.conv_k_tail, ref.conv_k_tail)
        assert np.array_equal(st.conv_v_tail, ref.conv_v_tail)
        assert st.position == ref.position == 10


def test_decode_appends_one_row_per_step():
    variant, params = make_block()
    state = DualLayerState.fresh(params)
    x = Tensor(SeededRng(15).normal((3, 16)))
    for i in range(3):
        block_decode_step(x[i, :], A, state, params, variant)
        assert len(state.kv) == i + 1
        assert state.position == i + 1


def test_block_rejects_wrong_schedule_length():
    variant, params = make_block()
    x = Tensor(SeededRng(16).normal((6, 16)))
    with pytest.raises(ValueError):
        block_forward_train(x, ModeSchedule.constant(A, 8, 4), params, variant)


def test_split_heads_round_trip():
    x = Tensor(SeededRng(17).normal((5, 16)))
    h = split_heads(x, 2)
    assert h.shape == (2, 5, 8)
    assert np.array_equal(blk.merge_heads(h).data, x.data)


def test_norm_kind_toggles_change_output():
    x = Tensor(SeededRng(18).normal((4, 16)))
    outs = []
    for kind in ("rms", "grouped_rms", "group"):
        variant, params = make_block(pair="TM", norm_kind=kind)
        sched = ModeSchedule.constant(A, 4, 4)
        outs.append(block_forward_train(x, sched, params, variant).data)
    assert not np.allclose(outs[0], outs[1])
    assert not np.allclose(outs[1], outs[2])


def test_parameter_sharing_ratio_above_90_percent():
    # paper-like mixer:MLP active ratio (5:8) via 8/3 MLP expansion
    from oryx.model import ModelConfig, count_params

    for pair in ("TM", "TG"):
        cfg = ModelConfig(
            vocab_size=64,
            dim=128,
            n_layers=4,
            d_head=16,
            variant=BlockVariant(pair=pair),
            mlp_expansion=8 / 3,
        )
        total, frac = count_params(cfg)
        assert frac > 0.90, (pair, frac)
