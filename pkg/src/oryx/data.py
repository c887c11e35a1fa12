"""Synthetic recall tasks: multi-query associative recall (training) and
needle-in-a-haystack retrieval probes (cross-mode evaluation).

Token alphabets are disjoint by construction so a scan of the sequence can
recover every target; generation is fully determined by the spec seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import SeededRng
from .training import TrainExample


@dataclass
class MqarSpec:
    """Key->value pairs followed by queries; each query key is followed by
    its associated value, which is the supervised target position."""

    vocab: int = 64
    length: int = 128
    pairs: int = 8
    queries: int | None = None  # None: fill the remaining length
    seed: int = 0

    def __post_init__(self):
        if self.vocab < 4:
            raise ValueError("vocab must be >= 4")
        n_keys = self.vocab // 2
        if self.pairs > n_keys:
            raise ValueError("more pairs than distinct keys")
        if self.queries is None:
            rem = self.length - 2 * self.pairs
            if rem < 2 or rem % 2 != 0:
                raise ValueError("length must leave a positive even query region")
            self.queries = rem // 2
        if 2 * (self.pairs + self.queries) != self.length:
            raise ValueError("pairs*2 + queries*2 must equal length")

    @property
    def key_base(self) -> int:
        return 0

    @property
    def value_base(self) -> int:
        return self.vocab // 2


@dataclass
class MqarSequence:
    tokens: np.ndarray
    answer_mask: np.ndarray  # True at value positions of the query region

    def as_train_example(self) -> TrainExample:
        return TrainExample(self.tokens, self.answer_mask)


def _one_mqar(spec: MqarSpec, rng: SeededRng) -> MqarSequence:
    n_keys = spec.vocab // 2
    keys = spec.key_base + rng.choice(n_keys, spec.pairs, replace=False)
    values = spec.value_base + rng.integers(0, spec.vocab - spec.value_base, (spec.pairs,))
    which = rng.integers(0, spec.pairs, (spec.queries,))
    tokens = np.empty(spec.length, dtype=np.int64)
    tokens[0 : 2 * spec.pairs : 2] = keys
    tokens[1 : 2 * spec.pairs : 2] = values
    q0 = 2 * spec.pairs
    tokens[q0::2] = keys[which]
    tokens[q0 + 1 :: 2] = values[which]
    mask = np.zeros(spec.length, dtype=bool)
    mask[q0 + 1 :: 2] = True
    return MqarSequence(tokens, mask)


def generate_mqar(spec: MqarSpec, count: int) -> list[MqarSequence]:
    rng = SeededRng(spec.seed).child("mqar")
    return [_one_mqar(spec, rng) for _ in range(count)]


def mqar_stream(spec: MqarSpec, rng: SeededRng):
    """Infinite deterministic stream of training examples."""
    while True:
        yield _one_mqar(spec, rng).as_train_example()


def scan_mqar_targets(tokens: np.ndarray, spec: MqarSpec) -> dict:
    """Independent recovery of query targets by scanning the pair region
    (test oracle for the generator)."""
    mapping = {}
    for i in range(spec.pairs):
        mapping[int(tokens[2 * i])] = int(tokens[2 * i + 1])
    out = {}
    for pos in range(2 * spec.pairs, len(tokens), 2):
        out[pos + 1] = mapping[int(tokens[pos])]
    return out


# ---------------------------------------------------------------------------
# needle in a haystack
# ---------------------------------------------------------------------------

@dataclass
class NeedleSpec:
    """Filler context with embedded key->value pairs; the query presents the
    needle pair's key and the answer is its value. Distractor pairs (beyond
    the needle itself) load the recurrent state without being queried."""

    vocab: int = 64
    context_length: int = 126
    pairs: int = 1
    needle_position: int | None = None  # None: uniform random placement
    seed: int = 0

    def __post_init__(self):
        if self.vocab < 8:
            raise ValueError("vocab must be >= 8")
        if self.pairs < 1:
            raise ValueError("needs at least the needle pair")
        if 2 * self.pairs > self.context_length:
            raise ValueError("pairs do not fit in the context")
        if self.pairs > self.n_keys:
            raise ValueError("more pairs than distinct keys")
        if self.needle_position is not None and not (
            0 <= self.needle_position <= self.context_length - 2
        ):
            raise ValueError("needle position out of range")

    @property
    def n_keys(self) -> int:
        return self.vocab // 4

    @property
    def filler_tokens(self) -> int:
        return self.vocab - 2 * self.n_keys

    @property
    def key_base(self) -> int:
        return self.filler_tokens

    @property
    def value_base(self) -> int:
        return self.filler_tokens + self.n_keys


@dataclass
class NeedleTask:
    context: np.ndarray
    query: np.ndarray
    answer: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.context, self.query, self.answer])

    def as_train_example(self) -> TrainExample:
        tokens = self.flat()
        mask = np.zeros(len(tokens), dtype=bool)
        mask[len(self.context) + len(self.query) :] = True
        return TrainExample(tokens, mask)


def _one_needle(spec: NeedleSpec, rng: SeededRng) -> NeedleTask:
    context = rng.integers(0, spec.filler_tokens, (spec.context_length,)).astype(np.int64)
    keys = spec.key_base + rng.choice(spec.n_keys, spec.pairs, replace=False)
    values = spec.value_base + rng.integers(0, spec.n_keys, (spec.pairs,))
    # place pairs at non-overlapping slots; the needle pair is index 0
    starts: list[int] = []
    if spec.needle_position is not None:
        starts.append(spec.needle_position)
    attempts = 0
    while len(starts) < spec.pairs:
        cand = int(rng.integers(0, spec.context_length - 1))
        if all(abs(cand - s) >= 2 for s in starts):
            starts.append(cand)
        attempts += 1
        if attempts > 10000:
            raise ValueError("could not place pairs without overlap")
    for i, s in enumerate(starts):
        context[s] = keys[i]
        context[s + 1] = values[i]
    return NeedleTask(
        context=context,
        query=np.array([keys[0]], dtype=np.int64),
        answer=np.array([values[0]], dtype=np.int64),
    )


def generate_needle(spec: NeedleSpec, count: int) -> list[NeedleTask]:
    rng = SeededRng(spec.seed).child("needle")
    return [_one_needle(spec, rng) for _ in range(count)]


def needle_stream(spec: NeedleSpec, rng: SeededRng, queries: int = 24):
    """Training stream for the needle task: the haystack context followed by
    a block of (key, value) probes over the embedded pairs, loss on the
    value positions. Evaluation tasks use a single probe, which matches the
    first probe position of this layout."""
    while True:
        task = _one_needle(spec, rng)
        keys = []
        values = []
        for s in np.where(np.isin(task.context, np.arange(spec.key_base, spec.value_base)))[0]:
            keys.append(int(task.context[s]))
            values.append(int(task.context[s + 1]))
        which = rng.integers(0, len(keys), (queries,))
        probe = np.empty(2 * queries, dtype=np.int64)
        probe[0::2] = np.asarray(keys, dtype=np.int64)[which]
        probe[1::2] = np.asarray(values, dtype=np.int64)[which]
        tokens = np.concatenate([task.context, probe])
        mask = np.zeros(len(tokens), dtype=bool)
        mask[len(task.context) + 1 :: 2] = True
        yield TrainExample(tokens, mask)


def scan_needle_answer(task: NeedleTask, spec: NeedleSpec) -> int:
    """Recover the answer by scanning the context for the queried key."""
    key = int(task.query[0])
    hits = np.where(task.context == key)[0]
    if len(hits) != 1:
        raise ValueError("query key must appear exactly once in the context")
    return int(task.context[hits[0] + 1])
