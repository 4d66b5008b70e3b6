"""Synthetic workload traces: diurnal/weekly seasonality, noise, spikes.

A trace is a list of TracePoint. One simulated "day" is ``period_s``
seconds, so long-horizon behaviour can be compressed to desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .core import Rng

NOISE_HALF_LIFE_S = 120.0


@dataclass(frozen=True)
class TracePoint:
    t_s: int
    rps: float


@dataclass(frozen=True)
class PatternSpec:
    base_rps: float = 1000.0
    diurnal_amplitude: float = 0.5
    period_s: float = 1440.0
    weekly_factor: float = 0.0
    noise_cv: float = 0.0
    spike_rate_per_day: float = 0.0
    spike_magnitude: float = 1.0
    spike_duration_s: float = 60.0


def _check_pattern(p: PatternSpec):
    for name, val in asdict(p).items():
        if not math.isfinite(val):
            raise ValueError(f"pattern field {name} is not finite: {val!r}")
    if p.base_rps <= 0 or p.period_s <= 0 or p.spike_duration_s <= 0:
        raise ValueError("base_rps, period_s, spike_duration_s must be positive")
    if not (0.0 <= p.diurnal_amplitude <= 1.0) or not (0.0 <= p.weekly_factor <= 1.0):
        raise ValueError("diurnal_amplitude and weekly_factor must lie in [0,1]")
    if p.noise_cv < 0 or p.spike_rate_per_day < 0 or p.spike_magnitude < 1.0:
        raise ValueError("noise_cv, spike_rate_per_day >= 0 and spike_magnitude >= 1 required")


def generate_trace(
    pattern: PatternSpec, duration_s: int, dt_s: float, rng: Rng
) -> list[TracePoint]:
    """Generate a deterministic seeded arrival-rate trace.

    rate(t) = base * (1 + amplitude*sin(2*pi*t/period)) * weekly(t)
              * lognormal noise * spike(t), clipped at 0.
    Spikes arrive Poisson at spike_rate_per_day per simulated day
    (= period_s) and multiply the rate by spike_magnitude for
    spike_duration_s.
    """
    _check_pattern(pattern)
    if duration_s < dt_s:
        raise ValueError("duration_s must be at least dt_s")
    if dt_s <= 0 or abs(dt_s - round(dt_s)) > 1e-9:
        raise ValueError("dt_s must be a positive whole number of seconds")
    dt = int(round(dt_s))
    n = int(duration_s // dt)
    t = np.arange(n, dtype=float) * dt

    rate = pattern.base_rps * (
        1.0 + pattern.diurnal_amplitude * np.sin(2.0 * math.pi * t / pattern.period_s)
    )
    # Weekly modulation: unity at t=0, dipping to (1 - weekly_factor)
    # mid-week, one "week" = 7 simulated days.
    week_s = 7.0 * pattern.period_s
    rate = rate * (
        1.0
        - pattern.weekly_factor * 0.5 * (1.0 - np.cos(2.0 * math.pi * t / week_s))
    )

    if pattern.noise_cv > 0:
        # Demand noise is a slowly varying level, not per-second jitter:
        # AR(1) in log space with a fixed half-life, stationary CV = noise_cv.
        sigma = math.sqrt(math.log(1.0 + pattern.noise_cv**2))
        rho = 0.5 ** (dt / NOISE_HALF_LIFE_S)
        eps = rng.normal(0.0, sigma, size=n)
        x = np.empty(n)
        x[0] = eps[0]
        innov = math.sqrt(1.0 - rho * rho)
        for i in range(1, n):
            x[i] = rho * x[i - 1] + innov * eps[i]
        rate = rate * np.exp(x - 0.5 * sigma * sigma)

    if pattern.spike_rate_per_day > 0:
        n_days = duration_s / pattern.period_s
        n_spikes = rng.poisson(pattern.spike_rate_per_day * n_days)
        mult = np.ones(n)
        for _ in range(n_spikes):
            start = rng.uniform(0.0, duration_s)
            mask = (t >= start) & (t < start + pattern.spike_duration_s)
            mult[mask] = np.maximum(mult[mask], pattern.spike_magnitude)
        rate = rate * mult

    rate = np.maximum(rate, 0.0)
    return [TracePoint(int(ti), float(r)) for ti, r in zip(t.astype(int), rate)]


def save_trace(trace: list[TracePoint], path) -> None:
    """Write a trace as JSON Lines: {"t_s": int, "rps": float} per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in trace:
            fh.write(json.dumps({"t_s": p.t_s, "rps": p.rps}) + "\n")


def load_trace(path) -> list[TracePoint]:
    """Read a JSONL trace, validating structure and monotone timestamps."""
    points: list[TracePoint] = []
    last_t = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                t_s = int(doc["t_s"])
                rps = float(doc["rps"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed trace line {lineno}: {exc}") from exc
            if rps < 0 or not math.isfinite(rps):
                raise ValueError(f"{path}: line {lineno}: rps must be finite and >= 0, got {rps}")
            if last_t is not None and t_s <= last_t:
                raise ValueError(
                    f"{path}: line {lineno}: t_s {t_s} is not strictly increasing"
                )
            last_t = t_s
            points.append(TracePoint(t_s, rps))
    return points


def split_trace(
    trace: list[TracePoint], fraction: float
) -> tuple[list[TracePoint], list[TracePoint]]:
    """Chronological prefix/suffix split; |train| = floor(fraction * n)."""
    if len(trace) < 2:
        raise ValueError("trace must contain at least 2 points to split")
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must lie in (0,1)")
    k = int(fraction * len(trace))
    k = max(1, min(len(trace) - 1, k))
    return trace[:k], trace[k:]


def inject_step(trace: list[TracePoint], at_s: int, new_rps: float) -> list[TracePoint]:
    """Replace rps with new_rps from at_s onward (for adaptation tests)."""
    if not trace:
        raise ValueError("empty trace")
    if not (trace[0].t_s <= at_s <= trace[-1].t_s):
        raise ValueError(f"at_s={at_s} outside trace range [{trace[0].t_s}, {trace[-1].t_s}]")
    if new_rps < 0:
        raise ValueError("new_rps must be >= 0")
    return [
        TracePoint(p.t_s, new_rps if p.t_s >= at_s else p.rps) for p in trace
    ]
