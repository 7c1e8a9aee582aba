"""Request arrivals: trace files and seeded synthetic workloads."""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TraceParseError(ValueError):
    def __init__(self, path: Path | str, line: int, reason: str) -> None:
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


@dataclass(frozen=True, order=True)
class TraceRecord:
    arrival_ms: int
    input_len: int
    output_len: int

    def __post_init__(self) -> None:
        if min(self.arrival_ms, self.input_len, self.output_len) < 0:
            raise ValueError("trace fields must be non-negative")


def ingest_trace(path: Path | str) -> list[TraceRecord]:
    """Read ``arrival_ms,input_len,output_len`` rows; a header line is optional."""
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and row[0].strip() == "arrival_ms":
                continue
            if len(row) != 3:
                raise TraceParseError(path, lineno, f"expected 3 fields, got {len(row)}")
            try:
                records.append(TraceRecord(*(int(cell.strip()) for cell in row)))
            except ValueError as exc:
                raise TraceParseError(path, lineno, str(exc)) from None
    return sorted(records)


def write_trace(path: Path | str, records: Sequence[TraceRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["arrival_ms", "input_len", "output_len"])
        for rec in records:
            writer.writerow([rec.arrival_ms, rec.input_len, rec.output_len])


@dataclass(frozen=True)
class RateSpec:
    """Arrival rate over time.

    ``piecewise``: ``segments`` of ``(duration_s, rate_per_s)`` repeated until
    the workload duration is covered.  ``sinusoidal``: rate
    ``mean * (1 + amplitude * sin(2 pi t / period_s))`` sampled by thinning.
    """

    kind: str = "piecewise"
    segments: tuple[tuple[float, float], ...] = ((10.0, 47.3), (10.0, 4.73))
    mean: float = 26.0
    amplitude: float = 0.8
    period_s: float = 20.0

    def __post_init__(self) -> None:
        if self.kind not in ("piecewise", "sinusoidal"):
            raise ValueError(f"unknown rate kind {self.kind!r}")
        if self.kind == "piecewise":
            segs = tuple((float(d), float(r)) for d, r in self.segments)
            if not segs or any(d <= 0 or r < 0 for d, r in segs):
                raise ValueError("segments need positive durations and non-negative rates")
            object.__setattr__(self, "segments", segs)
        elif self.mean < 0 or not 0 <= self.amplitude <= 1 or self.period_s <= 0:
            raise ValueError("invalid sinusoidal rate")

    @classmethod
    def constant(cls, rate: float) -> RateSpec:
        return cls(kind="piecewise", segments=((1.0, rate),))


@dataclass(frozen=True)
class LengthDist:
    """Integer lengths drawn uniformly from ``[low, high]``."""

    low: int
    high: int

    def __post_init__(self) -> None:
        if not 0 <= self.low <= self.high:
            raise ValueError("need 0 <= low <= high")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(self.low, self.high + 1, size=n)


@dataclass(frozen=True)
class WorkloadSpec:
    rate: RateSpec = field(default_factory=RateSpec)
    duration_s: float = 60.0
    input_len: LengthDist = LengthDist(4, 32)
    output_len: LengthDist = LengthDist(16, 128)


def _arrival_times(rate: RateSpec, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    times: list[np.ndarray] = []
    if rate.kind == "piecewise":
        t = 0.0
        k = 0
        while t < duration_s:
            d, lam = rate.segments[k % len(rate.segments)]
            d = min(d, duration_s - t)
            count = rng.poisson(lam * d)
            times.append(t + np.sort(rng.uniform(0.0, d, size=count)))
            t += d
            k += 1
    else:
        peak = rate.mean * (1.0 + rate.amplitude)
        count = rng.poisson(peak * duration_s)
        cand = np.sort(rng.uniform(0.0, duration_s, size=count))
        lam = rate.mean * (1.0 + rate.amplitude * np.sin(2.0 * math.pi * cand / rate.period_s))
        keep = rng.uniform(0.0, 1.0, size=count) * peak < lam
        times.append(cand[keep])
    return np.concatenate(times) if times else np.zeros(0)


def synth_workload(spec: WorkloadSpec, seed: int) -> list[TraceRecord]:
    """Poisson arrivals following ``spec.rate`` over ``spec.duration_s``."""
    if spec.duration_s < 0:
        raise ValueError("duration must be non-negative")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x57A7])))
    t = _arrival_times(spec.rate, spec.duration_s, rng)
    n = len(t)
    inputs = spec.input_len.draw(rng, n)
    outputs = spec.output_len.draw(rng, n)
    ms = np.floor(t * 1000.0).astype(np.int64)
    return sorted(
        TraceRecord(int(a), max(int(i), 1), max(int(o), 1)) for a, i, o in zip(ms, inputs, outputs)
    )


def burst_workload(n: int, input_len: int = 16, output_len: int = 96) -> list[TraceRecord]:
    """``n`` identical-shape requests all arriving at time zero."""
    return [TraceRecord(0, input_len, output_len) for _ in range(n)]


def synth_prompt(seed: int, index: int, length: int, vocab_size: int) -> tuple[int, ...]:
    """Deterministic prompt for trace record ``index``; never contains EOS."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x9E37, index])))
    return tuple(int(t) for t in rng.integers(0, vocab_size - 1, size=max(length, 1)))
