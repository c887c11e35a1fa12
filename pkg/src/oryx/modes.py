"""Mixer-mode types: per-chunk training schedules and per-position
inference plans."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence


class MixerMode(Enum):
    ATTENTION = "attention"
    LINEAR = "linear"


class ModeSchedule:
    """Per-chunk mode assignment covering a training sequence.

    The sequence is split into ``chunk_size`` pieces (the final chunk may be
    shorter); every layer of the model shares the same assignment. The
    per-position view is derived lazily and is the ground truth for the
    forward pass; a schedule may also be built from an arbitrary
    per-position list, so switch points need not be chunk-aligned.
    """

    __slots__ = ("chunk_size", "chunk_modes", "length", "_position_modes")

    def __init__(self, chunk_size: int, chunk_modes: Sequence[MixerMode], length: int | None = None):
        if chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        self.chunk_size = chunk_size
        self.chunk_modes = list(chunk_modes)
        if not self.chunk_modes:
            raise ValueError("schedule needs at least one chunk")
        full = chunk_size * len(self.chunk_modes)
        self.length = full if length is None else int(length)
        if not (full - chunk_size < self.length <= full):
            raise ValueError(f"length {self.length} inconsistent with {len(self.chunk_modes)} chunks of {chunk_size}")
        self._position_modes: list[MixerMode] | None = None

    @property
    def position_modes(self) -> list[MixerMode]:
        if self._position_modes is None:
            modes: list[MixerMode] = []
            for i, m in enumerate(self.chunk_modes):
                start = i * self.chunk_size
                modes.extend([m] * min(self.chunk_size, self.length - start))
            self._position_modes = modes
        return self._position_modes

    @staticmethod
    def from_positions(position_modes: Sequence[MixerMode], chunk_size: int) -> "ModeSchedule":
        """Schedule from an explicit per-position mode list (used for
        non-chunk-aligned switch points)."""
        modes = list(position_modes)
        chunk_modes = [modes[i] for i in range(0, len(modes), chunk_size)]
        s = ModeSchedule(chunk_size, chunk_modes, length=len(modes))
        s._position_modes = modes
        return s

    @staticmethod
    def constant(mode: MixerMode, length: int, chunk_size: int) -> "ModeSchedule":
        n_chunks = (length + chunk_size - 1) // chunk_size
        return ModeSchedule(chunk_size, [mode] * n_chunks, length=length)

    def mode_at(self, position: int) -> MixerMode:
        return self.position_modes[position]

    def attention_fraction(self) -> float:
        n = sum(1 for m in self.chunk_modes if m is MixerMode.ATTENTION)
        return n / len(self.chunk_modes)

    def covers(self, length: int) -> bool:
        return self.length == length

    def __repr__(self):
        tags = "".join("A" if m is MixerMode.ATTENTION else "L" for m in self.chunk_modes)
        return f"ModeSchedule(C={self.chunk_size}, chunks={tags}, T={self.length})"


@dataclass
class ModePlan:
    """Position -> mode resolution for inference.

    Built either from strictly increasing switch points or from a per-chunk
    list; switching any number of times at arbitrary positions is allowed.
    A plan from a finite list carries a horizon; prefilling past it is an
    error, while generation extends by repeating the generation mode.
    """

    initial_mode: MixerMode
    switch_points: list[int] = field(default_factory=list)
    switch_modes: list[MixerMode] = field(default_factory=list)
    horizon: int | None = None  # None: unbounded

    def __post_init__(self):
        if len(self.switch_points) != len(self.switch_modes):
            raise ValueError("switch_points and switch_modes must pair up")
        if any(b <= a for a, b in zip(self.switch_points, self.switch_points[1:])):
            raise ValueError("switch points must be strictly increasing")
        if any(p < 0 for p in self.switch_points):
            raise ValueError("switch points must be nonnegative")

    @staticmethod
    def constant(mode: MixerMode) -> "ModePlan":
        return ModePlan(mode)

    @staticmethod
    def switching(initial: MixerMode, switches: Sequence[tuple[int, MixerMode]]) -> "ModePlan":
        pts = [int(p) for p, _ in switches]
        mds = [m for _, m in switches]
        return ModePlan(initial, pts, mds)

    @staticmethod
    def from_schedule(schedule: ModeSchedule) -> "ModePlan":
        modes = schedule.position_modes
        plan = ModePlan(modes[0], horizon=len(modes))
        for i in range(1, len(modes)):
            if modes[i] is not modes[i - 1]:
                plan.switch_points.append(i)
                plan.switch_modes.append(modes[i])
        return plan

    @staticmethod
    def from_chunk_modes(chunk_modes: Sequence[MixerMode], chunk_size: int) -> "ModePlan":
        return ModePlan.from_schedule(ModeSchedule(chunk_size, list(chunk_modes)))

    def mode_at(self, position: int) -> MixerMode:
        mode = self.initial_mode
        for p, m in zip(self.switch_points, self.switch_modes):
            if position >= p:
                mode = m
            else:
                break
        return mode

    def modes(self, start: int, length: int) -> list[MixerMode]:
        return [self.mode_at(p) for p in range(start, start + length)]


def segment_runs(modes: Sequence[MixerMode]) -> list[tuple[int, int, MixerMode]]:
    """Maximal (start, end, mode) runs of equal mode, in order."""
    runs = []
    start = 0
    for i in range(1, len(modes) + 1):
        if i == len(modes) or modes[i] is not modes[start]:
            runs.append((start, i, modes[start]))
            start = i
    return runs
