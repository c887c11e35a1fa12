import numpy as np
import pytest

from oryx.block import BlockVariant
from oryx.model import (
    ModelConfig,
    count_params,
    cross_entropy_loss,
    init_params,
    model_forward,
    state_size_report,
)
from oryx.modes import MixerMode, ModeSchedule
from oryx.tensor import SeededRng, Tensor, finite_diff_grad_check, no_grad, using_precision

A, L = MixerMode.ATTENTION, MixerMode.LINEAR


def small_config(pair="TM", **kw):
    kw.setdefault("vocab_size", 16)
    kw.setdefault("dim", 32)
    kw.setdefault("n_layers", 2)
    kw.setdefault("d_head", 8)
    kw.setdefault("chunk_size", 4)
    return ModelConfig(variant=BlockVariant(pair=pair), **kw)


def test_init_deterministic_bitwise():
    cfg = small_config()
    p1 = init_params(cfg, SeededRng(5))
    p2 = init_params(cfg, SeededRng(5))
    for (n1, a), (n2, b) in zip(p1.named_parameters(), p2.named_parameters()):
        assert n1 == n2
        assert np.array_equal(a.data, b.data), n1


def test_param_count_matches_closed_form():
    for pair in ("TM", "TG"):
        for shared_q in (False, True):
            cfg = small_config(pair=pair)
            cfg.variant.shared_query = shared_q
            params = init_params(cfg, SeededRng(0))
            total, frac = count_params(cfg)
            assert params.n_params() == total
            assert 0.0 < frac < 1.0


def test_count_params_toy_hand_shape_sum():
    cfg = ModelConfig(vocab_size=10, dim=64, n_layers=2, d_head=16, mlp_expansion=2.0)
    total, _ = count_params(cfg)
    d, h, dff, v = 64, 4, 128, 10
    per_block = 6 * d * d + 2 * (4 * d + d) + (d * h + h + h) + d
    per_layer = per_block + 2 * d + 3 * d * dff
    want = v * d + 2 * per_layer + d + d * v
    assert total == want


def test_count_params_zero_layers_rejected():
    with pytest.raises(ValueError):
        count_params(small_config(n_layers=0))


def test_init_embedding_statistics():
    cfg = small_config(vocab_size=128, dim=128)
    params = init_params(cfg, SeededRng(1))
    emb = params.embedding.data
    assert emb.size >= 10_000
    assert abs(emb.std() - 0.02) < 0.002  # within 10%
    assert abs(emb.mean()) < 0.001


def test_forward_smoke_single_token():
    cfg = small_config()
    params = init_params(cfg, SeededRng(2))
    with no_grad():
        logits = model_forward([3], ModeSchedule.constant(A, 1, 4), params, cfg)
    assert logits.shape == (1, 16)
    assert np.isfinite(logits.data).all()


def test_forward_rejects_out_of_range_token():
    cfg = small_config()
    params = init_params(cfg, SeededRng(2))
    with pytest.raises(ValueError):
        model_forward([99], ModeSchedule.constant(A, 1, 4), params, cfg)


def test_causality_in_tokens_and_modes():
    cfg = small_config()
    params = init_params(cfg, SeededRng(3))
    toks = SeededRng(4).integers(0, 16, (12,))
    sched = ModeSchedule.from_positions([A] * 4 + [L] * 4 + [A] * 4, 4)
    with no_grad():
        base = model_forward(toks, sched, params, cfg).data
        t2 = toks.copy()
        t2[8] = (t2[8] + 1) % 16
        out = model_forward(t2, sched, params, cfg).data
        assert np.array_equal(base[:8], out[:8])
        sched2 = ModeSchedule.from_positions([A] * 4 + [L] * 4 + [L] * 4, 4)
        out2 = model_forward(toks, sched2, params, cfg).data
        assert np.array_equal(base[:8], out2[:8])
        assert not np.array_equal(base[8:], out2[8:])


def test_all_attention_differs_from_all_linear():
    cfg = small_config()
    params = init_params(cfg, SeededRng(5))
    toks = SeededRng(6).integers(0, 16, (12,))
    with no_grad():
        la = model_forward(toks, ModeSchedule.constant(A, 12, 4), params, cfg).data
        ll = model_forward(toks, ModeSchedule.constant(L, 12, 4), params, cfg).data
    assert not np.allclose(la, ll, atol=1e-4)


def test_cross_entropy_trivials_and_oracle():
    with using_precision("f64"):
        logits = Tensor(np.zeros((3, 4)))
        loss = cross_entropy_loss(logits, np.array([0, 1, 3]))
        assert abs(loss.item() - np.log(4)) < 1e-12
        big = np.full((2, 5), -1e9)
        big[0, 2] = big[1, 0] = 1e9
        assert cross_entropy_loss(Tensor(big), np.array([2, 0])).item() < 1e-6
        rng = SeededRng(7)
        z = rng.normal((6, 9))
        tgt = rng.integers(0, 9, (6,))
        want = 0.0
        for i in range(6):
            p = np.exp(z[i] - z[i].max())
            p /= p.sum()
            want -= np.log(p[tgt[i]])
        assert abs(cross_entropy_loss(Tensor(z), tgt).item() - want / 6) < 1e-12


def test_cross_entropy_mask():
    with using_precision("f64"):
        z = SeededRng(8).normal((4, 5))
        tgt = np.array([1, 2, 3, 4])
        mask = np.array([True, False, True, False])
        full = cross_entropy_loss(Tensor(z), tgt).item()
        masked = cross_entropy_loss(Tensor(z), tgt, mask).item()
        only = cross_entropy_loss(Tensor(z[mask]), tgt[mask]).item()
        assert abs(masked - only) < 1e-12
        assert masked != full
        with pytest.raises(ValueError):
            cross_entropy_loss(Tensor(z), tgt, np.zeros(4, dtype=bool))


def test_logits_deterministic_for_fixed_seed():
    cfg = small_config()
    toks = SeededRng(9).integers(0, 16, (10,))
    sched = ModeSchedule.from_positions([A, L] * 5, 4)
    outs = []
    for _ in range(2):
        params = init_params(cfg, SeededRng(10))
        with no_grad():
            outs.append(model_forward(toks, sched, params, cfg).data)
    assert np.array_equal(outs[0], outs[1])


@pytest.mark.slow
@pytest.mark.parametrize("pair", ["TM", "TG"])
@pytest.mark.parametrize("schedule", ["all_attention", "all_linear"])
def test_full_model_gradients_pure_schedules(pair, schedule):
    # mixed-schedule variant of this check runs in the acceptance suite
    with using_precision("f64"):
        cfg = ModelConfig(
            vocab_size=8, dim=16, n_layers=2, d_head=8, chunk_size=4,
            variant=BlockVariant(pair=pair), mlp_expansion=2.0, precision="f64",
        )
        params = init_params(cfg, SeededRng(11))
        toks = SeededRng(12).integers(0, 8, (8,))
        mode = A if schedule == "all_attention" else L
        sched = ModeSchedule.constant(mode, 8, 4)

        def loss():
            return cross_entropy_loss(
                model_forward(toks, sched, params, cfg), np.roll(toks, -1)
            )

        err = finite_diff_grad_check(loss, params.parameters(), 1e-5)
        assert err < 1e-4, (pair, schedule, err)


def test_state_size_report():
    cfg = small_config()
    rep = state_size_report(cfg)
    assert rep["recurrent_floats_per_layer"] == 4 * 8 * 8
    assert rep["kv_floats_per_position_per_layer"] == 2 * 32
    assert rep["recurrent_floats_total"] == 2 * 4 * 8 * 8
