"""Invocation-trace ingestion, synthetic generation, and stats output.

Trace CSV format (UTF-8, header required):
    invocation_id,app_id,function_id,arrival_ms,duration_ms
with arrival/duration as non-negative decimals in milliseconds.

The synthetic generator stands in for production traces: Zipf-distributed
function popularity, Poisson arrivals, log-normal durations clipped to
>= 1 ms; deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvariantError, ParseError

TRACE_HEADER = ["invocation_id", "app_id", "function_id",
                "arrival_ms", "duration_ms"]


@dataclass(frozen=True, slots=True)
class TraceEvent:
    invocation_id: int
    app_id: int
    function_id: int
    arrival_ms: float
    duration_ms: float

    def validate(self) -> None:
        if self.arrival_ms < 0:
            raise InvariantError(
                f"invocation {self.invocation_id}: negative arrival")
        if self.duration_ms <= 0:
            raise InvariantError(
                f"invocation {self.invocation_id}: duration must be positive")


@dataclass
class GeneratorSpec:
    """Synthetic-trace parameters; all counts positive, sigma >= 0."""

    n_functions: int = 4000
    n_apps: int = 200
    duration_minutes: float = 30.0
    arrival_rate_per_s: float = 60.0
    popularity_zipf_s: float = 1.1
    duration_lognormal_mu: float = math.log(300.0)  # ln of median ms
    duration_lognormal_sigma: float = 1.8
    seed: int = 0

    def validate(self) -> None:
        if self.n_functions <= 0 or self.n_apps <= 0:
            raise InvariantError("function and app counts must be positive")
        if self.duration_minutes <= 0 or self.arrival_rate_per_s <= 0:
            raise InvariantError("duration and arrival rate must be positive")
        if self.duration_lognormal_sigma < 0:
            raise InvariantError("duration sigma must be non-negative")

    @staticmethod
    def from_json(text: str) -> "GeneratorSpec":
        try:
            doc = json.loads(text)
            spec = GeneratorSpec(**doc)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ParseError(f"bad generator spec: {exc}") from exc
        spec.validate()
        return spec


def load_trace(path) -> list[TraceEvent]:
    """Parse and validate a trace CSV; events sorted by (arrival, id)."""
    events: list[TraceEvent] = []
    seen: set[int] = set()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if header != TRACE_HEADER:
            raise ParseError(f"{path}:1: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 columns")
            try:
                event = TraceEvent(int(row[0]), int(row[1]), int(row[2]),
                                   float(row[3]), float(row[4]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if event.invocation_id in seen:
                raise ParseError(
                    f"{path}:{lineno}: duplicate invocation_id "
                    f"{event.invocation_id}")
            seen.add(event.invocation_id)
            event.validate()
            events.append(event)
    events.sort(key=lambda e: (e.arrival_ms, e.invocation_id))
    return events


def write_trace(events: Sequence[TraceEvent], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for e in events:
            writer.writerow([e.invocation_id, e.app_id, e.function_id,
                             repr(float(e.arrival_ms)),
                             repr(float(e.duration_ms))])


def generate_trace(spec: GeneratorSpec) -> list[TraceEvent]:
    """Seeded synthetic trace; see module docstring for the model."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    horizon_ms = spec.duration_minutes * 60_000.0
    rate_per_ms = spec.arrival_rate_per_s / 1000.0
    expected = int(horizon_ms * rate_per_ms)

    arrivals: list[np.ndarray] = []
    total = 0.0
    count = 0
    while True:
        batch = rng.exponential(1.0 / rate_per_ms,
                                size=max(1024, expected // 4 + 1))
        cum = total + np.cumsum(batch)
        if cum[-1] >= horizon_ms:
            keep = cum[cum < horizon_ms]
            arrivals.append(keep)
            count += len(keep)
            break
        arrivals.append(cum)
        total = float(cum[-1])
        count += len(cum)
    arrival_ms = np.concatenate(arrivals) if arrivals else np.empty(0)

    ranks = np.arange(1, spec.n_functions + 1, dtype=np.float64)
    probs = ranks ** (-spec.popularity_zipf_s)
    probs /= probs.sum()
    functions = rng.choice(spec.n_functions, size=count, p=probs)
    durations = rng.lognormal(spec.duration_lognormal_mu,
                              spec.duration_lognormal_sigma, size=count)
    durations = np.maximum(durations, 1.0)

    events = [
        TraceEvent(i, int(functions[i]) % spec.n_apps, int(functions[i]),
                   float(arrival_ms[i]), float(durations[i]))
        for i in range(count)
    ]
    return events


def write_stats(stats: Sequence[dict], path, fmt: str = "json") -> None:
    """Write per-variant stats rows; bit-stable for identical inputs."""
    rows = sorted(stats, key=lambda s: s["variant"])
    if fmt == "json":
        text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        columns = ["variant", "p50_delay_ms", "p99_delay_ms", "p50_slowdown",
                   "p99_slowdown", "cold", "lukewarm", "warm", "makespan_ms"]
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown stats format {fmt!r}")
    Path(path).write_text(text, encoding="utf-8")
