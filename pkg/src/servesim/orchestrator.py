"""Deployment orchestration: strategy selection and canary rollouts.

Strategy selection is a fixed, declarative decision tree over the
deployment context. The canary rollout is a state machine that doubles
the traffic fraction after each healthy analysis window and rolls back
on the first unhealthy verdict. Health compares canary and baseline
fleets with a one-sided two-proportion z-test plus practical-significance
margins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import ModelSpec, Rng, SimConfig


class DeploymentStrategy(Enum):
    BLUE_GREEN = "BlueGreen"
    CANARY = "Canary"
    ROLLING = "Rolling"
    SHADOW = "Shadow"


class RolloutPhase(Enum):
    PENDING = "Pending"
    CANARY_DEPLOYED = "CanaryDeployed"
    ANALYZING = "Analyzing"
    PROMOTING = "Promoting"
    COMPLETED = "Completed"
    ROLLING_BACK = "RollingBack"
    ROLLED_BACK = "RolledBack"


class Verdict(Enum):
    HEALTHY = "Healthy"
    UNHEALTHY = "Unhealthy"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class DeploymentContext:
    model: ModelSpec
    risk_tolerance: str           # low | medium | high
    region_count: int
    spare_capacity_fraction: float
    latency_sensitivity: str      # strict | relaxed


@dataclass(frozen=True)
class CanaryConfig:
    initial_fraction: float = 0.05
    growth_factor: float = 2.0
    analysis_window_s: float = 120.0
    max_fraction: float = 1.0
    error_ratio_limit: float = 0.5
    latency_ratio_limit: float = 0.2
    z_threshold: float = 2.58
    min_requests: int = 100

    def validate(self):
        if not (0.0 < self.initial_fraction < self.max_fraction <= 1.0):
            raise ValueError("need 0 < initial_fraction < max_fraction <= 1")
        if self.growth_factor <= 1.0:
            raise ValueError("growth_factor must exceed 1")


@dataclass(frozen=True)
class FleetSample:
    n_requests: int
    n_errors: int
    latency_samples: tuple[float, ...]

    def error_rate(self) -> float:
        return self.n_errors / self.n_requests if self.n_requests > 0 else 0.0

    def p95(self) -> float:
        if not self.latency_samples:
            return 0.0
        return float(np.quantile(np.asarray(self.latency_samples), 0.95))


@dataclass(frozen=True)
class HealthReport:
    canary: FleetSample
    baseline: FleetSample
    verdict: Verdict
    z_errors: float
    latency_ratio: float


@dataclass
class RolloutState:
    phase: RolloutPhase = RolloutPhase.PENDING
    traffic_fraction: float = 0.0
    windows_analyzed: int = 0
    health_history: list[HealthReport] = field(default_factory=list)
    started_at_s: float = 0.0
    finished_at_s: float | None = None


def select_strategy(ctx: DeploymentContext) -> DeploymentStrategy:
    """Fixed decision tree over the deployment context; total and
    deterministic."""
    if ctx.risk_tolerance not in ("low", "medium", "high"):
        raise ValueError(f"unknown risk_tolerance {ctx.risk_tolerance!r}")
    if ctx.latency_sensitivity not in ("strict", "relaxed"):
        raise ValueError(f"unknown latency_sensitivity {ctx.latency_sensitivity!r}")
    if ctx.spare_capacity_fraction >= 1.0 and ctx.latency_sensitivity == "strict":
        return DeploymentStrategy.BLUE_GREEN
    if ctx.risk_tolerance == "low":
        return DeploymentStrategy.CANARY
    # Rough proxy for "model too large for the spare fleet": one minimal
    # fleet's memory versus idle headroom expressed in fleet fractions.
    if ctx.model.mem_per_replica_gb >= 40.0 and ctx.spare_capacity_fraction < 0.5:
        return DeploymentStrategy.ROLLING
    if ctx.risk_tolerance == "high" and ctx.spare_capacity_fraction >= 0.1:
        return DeploymentStrategy.SHADOW
    return DeploymentStrategy.ROLLING


def two_proportion_z(n1: int, x1: int, n2: int, x2: int) -> float:
    """One-sided z statistic for rate(sample 1) > rate(sample 2), pooled."""
    if n1 == 0 or n2 == 0:
        return 0.0
    p1, p2 = x1 / n1, x2 / n2
    pooled = (x1 + x2) / (n1 + n2)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    if se == 0.0:
        return 0.0
    return (p1 - p2) / se


def analyze_canary_health(
    canary: FleetSample, baseline: FleetSample, cfg: CanaryConfig
) -> HealthReport:
    """Compare canary vs baseline error rate and p95 latency."""
    z = two_proportion_z(
        canary.n_requests, canary.n_errors, baseline.n_requests, baseline.n_errors
    )
    base_p95 = baseline.p95()
    lat_ratio = canary.p95() / base_p95 if base_p95 > 0 else 1.0

    if canary.n_requests < cfg.min_requests:
        verdict = Verdict.INCONCLUSIVE
    else:
        error_bad = (
            z > cfg.z_threshold
            and canary.error_rate()
            > baseline.error_rate() * (1.0 + cfg.error_ratio_limit) + 0.001
        )
        latency_bad = lat_ratio > 1.0 + cfg.latency_ratio_limit
        verdict = Verdict.UNHEALTHY if (error_bad or latency_bad) else Verdict.HEALTHY
    return HealthReport(
        canary=canary, baseline=baseline, verdict=verdict,
        z_errors=z, latency_ratio=lat_ratio,
    )


def rollout_tick(state: RolloutState, health: HealthReport | None, cfg: CanaryConfig) -> RolloutState:
    """Advance the rollout state machine by one analysis window."""
    phase = state.phase
    if phase == RolloutPhase.ROLLING_BACK:
        state.phase = RolloutPhase.ROLLED_BACK
        return state
    if phase in (RolloutPhase.CANARY_DEPLOYED, RolloutPhase.PROMOTING):
        phase = state.phase = RolloutPhase.ANALYZING
    if phase != RolloutPhase.ANALYZING:
        raise ValueError(f"cannot tick rollout in phase {state.phase.value}")
    if health is None:
        raise ValueError("analysis tick requires a health report")

    state.health_history.append(health)
    state.windows_analyzed += 1
    if health.verdict == Verdict.UNHEALTHY:
        state.phase = RolloutPhase.ROLLING_BACK
        state.traffic_fraction = 0.0
    elif health.verdict == Verdict.HEALTHY:
        new_fraction = min(cfg.max_fraction, state.traffic_fraction * cfg.growth_factor)
        state.traffic_fraction = new_fraction
        if new_fraction >= cfg.max_fraction:
            state.phase = RolloutPhase.COMPLETED
        else:
            state.phase = RolloutPhase.PROMOTING
    # Inconclusive: remain Analyzing, window extends.
    return state


@dataclass
class RolloutResult:
    final_phase: RolloutPhase
    completion_time_s: float | None
    windows: int
    health_history: list[HealthReport]
    events: list[dict]

    def write_events(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self.events:
                fh.write(json.dumps(e) + "\n")


def _sample_fleet(
    n_requests: int, error_rate: float, base_latency_ms: float, rng: Rng,
    latency_factor: float = 1.0, max_latency_samples: int = 500,
) -> FleetSample:
    errors = rng.binomial(n_requests, error_rate) if n_requests > 0 else 0
    k = min(n_requests, max_latency_samples)
    if k > 0:
        lat = base_latency_ms * latency_factor * rng.lognormal(0.0, 0.1, size=k)
        samples = tuple(float(v) for v in lat)
    else:
        samples = ()
    return FleetSample(n_requests=n_requests, n_errors=errors, latency_samples=samples)


def run_rollout(
    cfg: SimConfig,
    canary_cfg: CanaryConfig,
    baseline_error_rate: float,
    canary_error_rate: float,
    rps: float,
    seed: int,
    canary_latency_factor: float = 1.0,
    strategy: DeploymentStrategy = DeploymentStrategy.CANARY,
    max_windows: int = 64,
) -> RolloutResult:
    """Drive a rollout against synthetic fleet traffic, one health
    analysis per window. Deterministic per seed."""
    canary_cfg.validate()
    rng = Rng(seed)
    state = RolloutState()
    if strategy == DeploymentStrategy.BLUE_GREEN:
        initial = canary_cfg.max_fraction
    elif strategy == DeploymentStrategy.SHADOW:
        initial = 0.0
    else:
        initial = canary_cfg.initial_fraction
    state.phase = RolloutPhase.CANARY_DEPLOYED
    state.traffic_fraction = initial

    events: list[dict] = []
    t = 0.0
    for _ in range(max_windows):
        if state.phase in (RolloutPhase.COMPLETED, RolloutPhase.ROLLED_BACK):
            break
        if state.phase == RolloutPhase.ROLLING_BACK:
            rollout_tick(state, None, canary_cfg)
            state.finished_at_s = t
            events.append(_event(t, state, None))
            continue

        n_total = int(round(rps * canary_cfg.analysis_window_s))
        if strategy == DeploymentStrategy.SHADOW:
            n_canary = n_total  # full mirrored load, zero user traffic
            n_base = n_total
        else:
            n_canary = int(round(state.traffic_fraction * n_total))
            n_base = n_total - n_canary
        canary = _sample_fleet(
            n_canary, canary_error_rate, cfg.model.base_latency_ms, rng,
            latency_factor=canary_latency_factor,
        )
        baseline = _sample_fleet(n_base, baseline_error_rate, cfg.model.base_latency_ms, rng)
        health = analyze_canary_health(canary, baseline, canary_cfg)

        if strategy == DeploymentStrategy.SHADOW:
            # Shadow never promotes automatically: record verdicts only.
            state.phase = RolloutPhase.ANALYZING
            state.health_history.append(health)
            state.windows_analyzed += 1
        else:
            rollout_tick(state, health, canary_cfg)
        t += canary_cfg.analysis_window_s
        if state.phase == RolloutPhase.COMPLETED:
            state.finished_at_s = t
        events.append(_event(t, state, health))
        if strategy == DeploymentStrategy.SHADOW and state.windows_analyzed >= 5:
            break

    completion = (
        state.finished_at_s if state.phase == RolloutPhase.COMPLETED else None
    )
    return RolloutResult(
        final_phase=state.phase,
        completion_time_s=completion,
        windows=state.windows_analyzed,
        health_history=state.health_history,
        events=events,
    )


def _event(t: float, state: RolloutState, health: HealthReport | None) -> dict:
    return {
        "t_s": t,
        "phase": state.phase.value,
        "fraction": state.traffic_fraction,
        "verdict": health.verdict.value if health else None,
        "z_errors": health.z_errors if health else None,
        "latency_ratio": health.latency_ratio if health else None,
    }
