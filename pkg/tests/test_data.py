import numpy as np
import pytest

from oryx.data import (
    MqarSpec,
    NeedleSpec,
    generate_mqar,
    generate_needle,
    mqar_stream,
    needle_stream,
    scan_mqar_targets,
    scan_needle_answer,
)
from oryx.tensor import SeededRng


def test_mqar_minimal_core():
    spec = MqarSpec(vocab=8, length=4, pairs=1, queries=1, seed=0)
    seqs = generate_mqar(spec, 5)
    for s in seqs:
        assert len(s.tokens) == 4
        assert s.tokens[2] == s.tokens[0]  # only one key to query
        assert s.tokens[3] == s.tokens[1]
        assert list(np.where(s.answer_mask)[0]) == [3]


def test_mqar_layout_and_alphabets():
    spec = MqarSpec(vocab=64, length=128, pairs=8, seed=1)
    for s in generate_mqar(spec, 10):
        keys = s.tokens[0:16:2]
        values = s.tokens[1:16:2]
        assert len(set(keys.tolist())) == 8  # distinct keys
        assert keys.max() < 32
        assert values.min() >= 32 and values.max() < 64
        assert s.answer_mask.sum() == 56


def test_mqar_deterministic():
    spec = MqarSpec(vocab=64, length=128, pairs=8, seed=7)
    a = generate_mqar(spec, 4)
    b = generate_mqar(spec, 4)
    for x, y in zip(a, b):
        assert np.array_equal(x.tokens, y.tokens)
        assert np.array_equal(x.answer_mask, y.answer_mask)
    other = generate_mqar(MqarSpec(vocab=64, length=128, pairs=8, seed=8), 4)
    assert not np.array_equal(a[0].tokens, other[0].tokens)


def test_mqar_scan_oracle_recovers_all_targets():
    spec = MqarSpec(vocab=64, length=64, pairs=6, seed=2)
    for s in generate_mqar(spec, 10):
        targets = scan_mqar_targets(s.tokens, spec)
        for pos, want in targets.items():
            assert s.tokens[pos] == want
        assert set(targets) == set(np.where(s.answer_mask)[0].tolist())


def test_mqar_validation():
    with pytest.raises(ValueError):
        MqarSpec(vocab=64, length=10, pairs=40)  # more pairs than keys
    with pytest.raises(ValueError):
        MqarSpec(vocab=8, length=9, pairs=2)  # odd remainder
    with pytest.raises(ValueError):
        MqarSpec(vocab=8, length=8, pairs=3, queries=4)  # does not fit


def test_mqar_stream_is_deterministic():
    spec = MqarSpec(vocab=16, length=16, pairs=2, seed=3)
    s1 = mqar_stream(spec, SeededRng(5))
    s2 = mqar_stream(spec, SeededRng(5))
    for _ in range(3):
        a, b = next(s1), next(s2)
        assert np.array_equal(a.tokens, b.tokens)


def test_needle_boundaries_and_structure():
    for pos in (0, 30):  # first and last valid placement
        spec = NeedleSpec(vocab=64, context_length=32, pairs=1, needle_position=pos, seed=4)
        task = generate_needle(spec, 1)[0]
        assert task.context[pos] == task.query[0]
        assert task.context[pos + 1] == task.answer[0]
        assert len(task.context) == 32
    with pytest.raises(ValueError):
        NeedleSpec(vocab=64, context_length=32, needle_position=31)


def test_needle_scan_oracle():
    spec = NeedleSpec(vocab=64, context_length=60, pairs=10, seed=5)
    for task in generate_needle(spec, 10):
        assert scan_needle_answer(task, spec) == task.answer[0]


def test_needle_alphabets_disjoint():
    spec = NeedleSpec(vocab=64, context_length=40, pairs=5, seed=6)
    task = generate_needle(spec, 1)[0]
    keys = [t for t in task.context if 32 <= t < 48]
    vals = [t for t in task.context if t >= 48]
    filler = [t for t in task.context if t < 32]
    assert len(keys) == 5 and len(vals) == 5
    assert len(keys) + len(vals) + len(filler) == 40


def test_needle_deterministic():
    spec = NeedleSpec(vocab=64, context_length=40, pairs=3, seed=9)
    a = generate_needle(spec, 3)
    b = generate_needle(spec, 3)
    for x, y in zip(a, b):
        assert np.array_equal(x.flat(), y.flat())


def test_needle_train_example_masks_answer_only():
    spec = NeedleSpec(vocab=64, context_length=20, pairs=2, seed=10)
    task = generate_needle(spec, 1)[0]
    ex = task.as_train_example()
    assert len(ex.tokens) == 22
    assert list(np.where(ex.loss_mask)[0]) == [21]


def test_needle_stream_probe_block():
    spec = NeedleSpec(vocab=64, context_length=30, pairs=4, seed=11)
    ex = next(needle_stream(spec, SeededRng(1), queries=6))
    assert len(ex.tokens) == 30 + 12
    answers = np.where(ex.loss_mask)[0]
    assert len(answers) == 6
    # every probe is answerable by scanning the context
    mapping = {}
    for i, t in enumerate(ex.tokens[:30]):
        if 32 <= t < 48:
            mapping[int(t)] = int(ex.tokens[i + 1])
    for pos in answers:
        assert ex.tokens[pos] == mapping[int(ex.tokens[pos - 1])]
