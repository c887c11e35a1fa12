"""Dual-state inference: prefill under arbitrary mode plans, fixed-mode
generation, per-position NLL curves for mode-switch experiments, and the
cross-mode context/prompt retrieval protocol."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import DualLayerState
from .model import ModelConfig, ModelParams, _stack_forward
from .modes import MixerMode, ModePlan
from .tensor import SeededRng, Tensor, log_softmax, no_grad


class InferenceSession:
    """One decoding session: per-layer dual states, a position counter, the
    logits of the last consumed position, and the emitted-token log. Layer
    position counters always agree with the session counter."""

    def __init__(self, params: ModelParams, config: ModelConfig):
        self.params = params
        self.config = config
        self.states = [DualLayerState.fresh(b) for b in params.blocks]
        self.last_logits: np.ndarray | None = None
        self.emitted: list[int] = []

    @property
    def position(self) -> int:
        positions = {s.position for s in self.states}
        if len(positions) != 1:
            raise RuntimeError("layer states out of sync")
        return positions.pop()

    def memory_report(self) -> dict:
        reports = [s.memory_report() for s in self.states]
        return {
            "kv_bytes": sum(r["kv_bytes"] for r in reports),
            "recurrent_bytes": sum(r["recurrent_bytes"] for r in reports),
            "positions": self.position,
        }


def prefill(
    session: InferenceSession,
    tokens,
    plan: ModePlan,
    stepwise: bool = False,
) -> np.ndarray:
    """Consume ``tokens`` under ``plan``, advancing all layer states; returns
    the logits at every consumed position ((T, vocab), empty for no tokens).

    The default chunk-batched path and the position-by-position ``stepwise``
    path agree within float tolerance (enforced by tests).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    t = len(tokens)
    if t == 0:
        return np.zeros((0, session.config.vocab_size))
    start = session.position
    if plan.horizon is not None and start + t > plan.horizon:
        raise ValueError(f"plan covers {plan.horizon} positions, prefill needs {start + t}")
    modes = plan.modes(start, t)
    with no_grad():
        if stepwise:
            rows = []
            for i in range(t):
                logits = _stack_forward(
                    tokens[i : i + 1], [modes[i]], session.params, session.config, session.states
                )
                rows.append(logits.data[0])
            out = np.stack(rows)
        else:
            out = _stack_forward(tokens, modes, session.params, session.config, session.states).data
    session.last_logits = out[-1].copy()
    return out


def _sample(logits: np.ndarray, temperature: float, rng: SeededRng | None) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    if rng is None:
        raise ValueError("temperature sampling requires a seeded rng")
    z = (logits / temperature).astype(np.float64)
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(np.searchsorted(np.cumsum(p), rng.random()))


def generate(
    session: InferenceSession,
    n_tokens: int,
    mode: MixerMode,
    temperature: float = 0.0,
    rng: SeededRng | None = None,
) -> list[int]:
    """Autoregressive decode under one fixed mode. The first token is
    sampled from the last prefilled position's logits; greedy decoding
    (temperature 0) is deterministic. The plan implicitly extends by
    repeating ``mode``."""
    if n_tokens == 0:
        return []
    if session.last_logits is None:
        raise ValueError("session must be prefilled before generation")
    out = []
    plan = ModePlan.constant(mode)
    for _ in range(n_tokens):
        tok = _sample(session.last_logits, temperature, rng)
        out.append(tok)
        session.emitted.append(tok)
        prefill(session, [tok], plan)
    return out


@dataclass
class NllCurve:
    """Mean per-position negative log-likelihood over an evaluation set.

    ``values[i]`` is the NLL of predicting position i+1 from its prefix (the
    first token has no conditional probability, so the curve has length
    T - 1). ``smoothed`` applies a centered moving average; window 1 is the
    identity."""

    values: np.ndarray
    window: int = 64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise ValueError("negative NLL")

    def smoothed(self, window: int | None = None) -> np.ndarray:
        w = self.window if window is None else window
        if w <= 1:
            return self.values.copy()
        n = len(self.values)
        half = w // 2
        csum = np.concatenate([[0.0], np.cumsum(self.values)])
        lo = np.clip(np.arange(n) - half, 0, n)
        hi = np.clip(np.arange(n) + half + 1, 0, n)
        return (csum[hi] - csum[lo]) / (hi - lo)


def nll_by_position(
    params: ModelParams,
    config: ModelConfig,
    eval_set,
    plan: ModePlan,
    smoothing_window: int = 64,
) -> NllCurve:
    """Per-position NLL averaged over same-length sequences processed under
    one mode plan."""
    eval_set = [np.asarray(s, dtype=np.int64) for s in eval_set]
    if not eval_set:
        raise ValueError("empty evaluation set")
    t = len(eval_set[0])
    if any(len(s) != t for s in eval_set):
        raise ValueError("evaluation sequences must share one length")
    acc = np.zeros(t - 1, dtype=np.float64)
    for seq in eval_set:
        session = InferenceSession(params, config)
        logits = prefill(session, seq, plan)
        with no_grad():
            ls = log_softmax(Tensor(logits[:-1])).data
        acc += -ls[np.arange(t - 1), seq[1:]]
    return NllCurve(acc / len(eval_set), smoothing_window)


def cross_mode_retrieval_eval(
    params: ModelParams,
    config: ModelConfig,
    tasks,
    context_mode: MixerMode,
    prompt_mode: MixerMode,
    split_fraction: float = 0.975,
) -> float:
    """Exact-match accuracy with the context prefilled under one mode and
    the prompt (query) prefilled plus the answer generated under another.

    Tasks either carry explicit (context, query, answer) token arrays or are
    flat sequences split at ``split_fraction`` (last token the answer)."""
    if not tasks:
        raise ValueError("empty task set")
    hits = 0
    for task in tasks:
        if hasattr(task, "context"):
            ctx, qry, ans = task.context, task.query, task.answer
        else:
            flat = np.asarray(task, dtype=np.int64)
            cut = max(1, int(len(flat) * split_fraction))
            cut = min(cut, len(flat) - 1)
            ctx, qry, ans = flat[:cut], flat[cut:-1], flat[-1:]
        session = InferenceSession(params, config)
        prefill(session, ctx, ModePlan.constant(context_mode))
        prefill(session, qry, ModePlan.constant(prompt_mode))
        got = generate(session, len(ans), prompt_mode)
        hits += int(got == [int(a) for a in ans])
    return hits / len(tasks)
