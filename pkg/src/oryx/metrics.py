"""Newline-delimited metrics records: append-only, parseable line by line,
and value-exact on round trip (floats survive via JSON shortest-repr)."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass


@dataclass
class MetricsRecord:
    step: int
    name: str
    value: float
    run_id: str
    wall: float | None = None


class MetricsWriter:
    """Appends one JSON object per line. Wall-clock stamps are off by
    default so identical runs produce byte-identical files."""

    def __init__(self, path, run_id: str, log_wall: bool = False):
        self.path = path
        self.run_id = run_id
        self.log_wall = log_wall
        self._t0 = time.time()
        self._f = open(path, "a")

    def write(self, step: int, name: str, value) -> None:
        rec = {"step": int(step), "name": name, "value": float(value), "run_id": self.run_id}
        if self.log_wall:
            rec["wall"] = time.time() - self._t0
        self._f.write(json.dumps(rec, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricsRecord]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out.append(
                MetricsRecord(
                    step=d["step"],
                    name=d["name"],
                    value=d["value"],
                    run_id=d["run_id"],
                    wall=d.get("wall"),
                )
            )
    return out


def records_to_curve(records: list[MetricsRecord], name: str) -> list[tuple[int, float]]:
    """(step, value) series for one metric, in file order."""
    return [(r.step, r.value) for r in records if r.name == name]
