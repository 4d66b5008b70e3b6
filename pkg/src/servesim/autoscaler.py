"""Scaling decisions: learned-predictor MPC scaler plus static and
threshold baselines.

The scaler predicts near-future load (neural head when trained, classical
forecasts as fallback), scores every candidate replica count against a
latency/cost/utilization objective, and applies cooldown hysteresis.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import Constraints, Rng, SimConfig
from . import metrics as mx
from . import neuralnet as nn

EWMA_HALF_LIFE_STEPS = 8.0
CURRENT_LOAD_WINDOW = 32


@dataclass(frozen=True)
class LoadEstimate:
    current_rps: float
    predicted_rps: float
    source: str  # dnn | seasonal_naive | holt_winters | last_value


@dataclass
class ScalingDecision:
    target_replicas: dict[str, int]
    score_breakdown: dict[str, tuple[float, float, float]]
    issued_at_s: float
    held: bool
    source: str = "none"


@dataclass(frozen=True)
class ScalerConfig:
    w_lat: float = 1.0
    w_cost: float = 0.3
    w_util: float = 0.3
    target_utilization: float = 0.8
    horizon_s: float = 60.0
    cooldown_s: float = 30.0
    retrain_every: int = 512
    buffer_cap: int = 8192

    def validate(self):
        if self.w_lat < 0 or self.w_cost < 0 or self.w_util < 0:
            raise ValueError("score weights must be nonnegative")
        if self.w_lat + self.w_cost + self.w_util == 0:
            raise ValueError("at least one score weight must be positive")
        if not (0.0 < self.target_utilization < 1.0):
            raise ValueError("target_utilization must lie in (0,1)")


def analyze_current_load(arrivals_rps_history) -> float:
    """Exponentially weighted mean of recent arrival rates (half-life 8 steps)."""
    h = np.asarray(arrivals_rps_history, dtype=float)
    if h.size == 0:
        raise ValueError("empty history")
    h = h[-CURRENT_LOAD_WINDOW:]
    age = np.arange(h.size - 1, -1, -1, dtype=float)
    w = np.power(0.5, age / EWMA_HALF_LIFE_STEPS)
    return float(np.sum(w * h) / np.sum(w))


def predict_future_load(
    net, window, arrivals_rps_history, period_steps: int, horizon_steps: int
) -> LoadEstimate:
    """Forecast load over the horizon, falling back from the neural head to
    Holt-Winters, seasonal-naive, then last value. Total and nonnegative."""
    h = np.asarray(arrivals_rps_history, dtype=float)
    if h.size == 0:
        raise ValueError("empty history")
    current = analyze_current_load(h)
    if net is not None and net.trained and window is not None:
        (load, _lat, _eff), _ = nn.forward(net, window, mode="eval")
        pred = load * net.target_std[0] + net.target_mean[0]
        source = "dnn"
    elif period_steps >= 1 and h.size >= 2 * period_steps:
        pred = mx.holt_winters_forecast(h, period_steps, horizon_steps)
        source = "holt_winters"
    elif period_steps >= 1 and h.size >= period_steps:
        pred = mx.seasonal_naive_forecast(h, period_steps, horizon_steps)
        source = "seasonal_naive"
    else:
        pred = float(h[-1])
        source = "last_value"
    if not math.isfinite(pred):
        pred = float(h[-1])
        source = "last_value"
    return LoadEstimate(current_rps=current, predicted_rps=max(0.0, pred), source=source)


def calculate_efficiency(outcomes, sla_p95_ms: float) -> float:
    """Mean utilization discounted by the SLA-violation fraction."""
    if not outcomes:
        raise ValueError("empty outcome window")
    util = sum(o.utilization for o in outcomes) / len(outcomes)
    viol = sum(1 for o in outcomes if o.p95_latency_ms > sla_p95_ms) / len(outcomes)
    return util * (1.0 - viol)


def candidate_range(current: int, constraints: Constraints) -> range:
    step = int(math.ceil(constraints.max_step_fraction * current))
    lo = max(constraints.min_replicas, current - step)
    hi = min(constraints.max_replicas, current + step)
    if lo > hi:
        raise ValueError(f"empty candidate set: [{lo}, {hi}]")
    return range(lo, hi + 1)


def score_candidate(
    replicas: int,
    predicted_rps: float,
    rtt_ms: float,
    cfg: SimConfig,
    scfg: ScalerConfig,
) -> tuple[float, float, float]:
    """(latency_penalty, cost_term, utilization_term) for one candidate."""
    cap = replicas * cfg.model.per_replica_rps
    util_hat = predicted_rps / cap if cap > 0 else math.inf
    latency = cfg.model.base_latency_ms + rtt_ms
    if util_hat > 1.0:
        # Fluid wait if demand outruns capacity for the whole horizon.
        latency += 1000.0 * (util_hat - 1.0) * scfg.horizon_s
    sla = cfg.constraints.sla_p95_ms
    lat_pen = scfg.w_lat * max(0.0, latency - sla) / sla
    cost_term = scfg.w_cost * replicas / cfg.constraints.max_replicas
    # Overload relative to the utilization target; running below target is
    # already priced by the cost term.
    util_term = scfg.w_util * max(0.0, util_hat - scfg.target_utilization)
    return lat_pen, cost_term, util_term


def compute_scaling_decision(
    estimate: LoadEstimate,
    current_targets: dict[str, int],
    cfg: SimConfig,
    scfg: ScalerConfig,
    now_s: float,
    last_change_s: float | None,
) -> ScalingDecision:
    """Argmin of the candidate score per region, cooldown-gated."""
    targets: dict[str, int] = {}
    breakdown: dict[str, tuple[float, float, float]] = {}
    # Provision for the worse of observed and forecast load: a forecast
    # below what is already arriving must never trigger a scale-down.
    plan_rps = max(estimate.current_rps, estimate.predicted_rps)
    for region in cfg.regions:
        current = current_targets[region.name]
        pred_r = plan_rps * region.traffic_weight
        best = None
        best_score = math.inf
        best_parts = (0.0, 0.0, 0.0)
        for r in candidate_range(current, cfg.constraints):
            parts = score_candidate(r, pred_r, region.rtt_ms, cfg, scfg)
            score = sum(parts)
            if score < best_score - 1e-12 or best is None:
                best, best_score, best_parts = r, score, parts
        targets[region.name] = best
        breakdown[region.name] = best_parts

    changed = any(targets[k] != current_targets[k] for k in targets)
    held = False
    if changed and last_change_s is not None and (now_s - last_change_s) < scfg.cooldown_s:
        targets = dict(current_targets)
        held = True
    return ScalingDecision(
        target_replicas=targets,
        score_breakdown=breakdown,
        issued_at_s=now_s,
        held=held,
        source=estimate.source,
    )


def reward(outcomes, cfg: SimConfig, scfg: ScalerConfig) -> float:
    """Efficiency net of budget-normalized spend over the window."""
    if not outcomes:
        raise ValueError("empty outcome window")
    eff = calculate_efficiency(outcomes, cfg.constraints.sla_p95_ms)
    budget = cfg.constraints.budget_usd_per_hour
    if math.isfinite(budget) and budget > 0:
        duration_h = len(outcomes) * cfg.dt_s / 3600.0
        cost = sum(o.cost_delta_usd for o in outcomes)
        eff -= scfg.w_cost * cost / (budget * duration_h)
    return eff


class ReplayBuffer:
    """FIFO ring of (window, realized-target) experiences."""

    def __init__(self, cap: int):
        self.items: deque = deque(maxlen=cap)

    def append(self, window: mx.MetricWindow, realized: np.ndarray):
        self.items.append((window, np.asarray(realized, dtype=float)))

    def __len__(self):
        return len(self.items)


def record_and_maybe_retrain(
    buffer: ReplayBuffer,
    window: mx.MetricWindow,
    realized: np.ndarray,
    net: nn.MultiStreamNet,
    opt: nn.OptimizerState,
    scfg: ScalerConfig,
    rng: Rng,
    steps: int = 50,
    batch_size: int = 64,
) -> bool:
    """Append one experience; every retrain_every appends, run a short
    training burst on uniform samples from the buffer. Returns whether a
    retrain happened."""
    buffer.append(window, realized)
    if len(buffer) % scfg.retrain_every != 0:
        return False
    items = list(buffer.items)
    raw_targets = np.stack([t for _, t in items])
    mean = raw_targets.mean(axis=0)
    std = np.maximum(raw_targets.std(axis=0), 1e-6)
    net.target_mean, net.target_std = mean, std
    windows = [w for w, _ in items]
    R, P, D = nn.stack_windows(windows)
    norm_targets = (raw_targets - mean) / std
    for _ in range(steps):
        idx = rng.integers(0, len(items), size=min(batch_size, len(items)))
        nn.train_step(net, opt, R[idx], P[idx], D[idx], norm_targets[idx])
    net.trained = True
    return True


class StaticPolicy:
    """Fixed per-region targets; the traditional no-op comparator."""

    def __init__(self, replicas_per_region: int, cfg: SimConfig):
        c = cfg.constraints
        if not (c.min_replicas <= replicas_per_region <= c.max_replicas):
            raise ValueError(
                f"static target {replicas_per_region} outside "
                f"[{c.min_replicas}, {c.max_replicas}]"
            )
        self.replicas = replicas_per_region

    def decide(self, state, history, cfg: SimConfig):
        targets = {name: self.replicas for name in state.pools}
        if all(state.pools[n].target_replicas == t for n, t in targets.items()):
            return None
        return ScalingDecision(
            target_replicas=targets,
            score_breakdown={n: (0.0, 0.0, 0.0) for n in targets},
            issued_at_s=state.now_s,
            held=False,
            source="static",
        )


class ThresholdPolicy:
    """Reactive rule baseline: +1 replica above the upper utilization
    threshold, -1 below the lower, cooldown between changes."""

    def __init__(self, upper: float = 0.85, lower: float = 0.5, window: int = 8):
        if not (0.0 < lower < upper <= 1.0):
            raise ValueError("need 0 < lower < upper <= 1")
        self.upper = upper
        self.lower = lower
        self.window = window
        self.last_change_s: float | None = None

    def decide(self, state, history, cfg: SimConfig):
        if not history:
            return None
        recent = history[-self.window:]
        util = sum(o.utilization for o in recent) / len(recent)
        c = cfg.constraints
        delta = 0
        if util > self.upper:
            delta = 1
        elif util < self.lower:
            delta = -1
        targets = {
            name: min(c.max_replicas, max(c.min_replicas, p.target_replicas + delta))
            for name, p in state.pools.items()
        }
        changed = any(state.pools[n].target_replicas != t for n, t in targets.items())
        if not changed:
            return None
        held = (
            self.last_change_s is not None
            and (state.now_s - self.last_change_s) < c.cooldown_s
        )
        if held:
            targets = {n: p.target_replicas for n, p in state.pools.items()}
        else:
            self.last_change_s = state.now_s
        return ScalingDecision(
            target_replicas=targets,
            score_breakdown={n: (0.0, 0.0, 0.0) for n in targets},
            issued_at_s=state.now_s,
            held=held,
            source="threshold",
        )


class DnnScalerPolicy:
    """Predictive scaler: learned forecast (with classical fallbacks) feeding
    the candidate-scoring optimizer; optional online retraining on realized
    outcomes."""

    def __init__(
        self,
        cfg: SimConfig,
        scfg: ScalerConfig | None = None,
        net: nn.MultiStreamNet | None = None,
        period_steps: int = 1440,
        online: bool = False,
        seed: int = 0,
    ):
        self.scfg = scfg or ScalerConfig()
        self.scfg.validate()
        self.net = net
        self.period_steps = period_steps
        self.online = online
        self.stats = mx.RunningStats(
            mx.RESOURCE_CHANNELS + mx.PERFORMANCE_CHANNELS
        )
        self.buffer = ReplayBuffer(self.scfg.buffer_cap)
        self.opt = nn.OptimizerState()
        self.rng = Rng(seed)
        self.last_change_s: float | None = None
        self._seen = 0
        self.horizon_steps = max(1, int(round(self.scfg.horizon_s / cfg.dt_s)))

    def _update_streams(self, history, cfg):
        for outcome in history[self._seen:]:
            r, p = mx.window_channels(outcome, cfg)
            self.stats.update(np.concatenate([r, p]))
        self._seen = len(history)

    def decide(self, state, history, cfg: SimConfig):
        if not history:
            return None
        self._update_streams(history, cfg)
        arrivals = [o.arrivals / cfg.dt_s for o in history]

        window = None
        if len(history) >= mx.WINDOW_T and self.stats.count >= 2:
            window = mx.build_window(history, cfg, self.stats)

        estimate = predict_future_load(
            self.net, window, arrivals, self.period_steps, self.horizon_steps
        )

        if self.online and self.net is not None:
            self._record_experience(history, cfg)

        current = {n: p.target_replicas for n, p in state.pools.items()}
        decision = compute_scaling_decision(
            estimate, current, cfg, self.scfg, state.now_s, self.last_change_s
        )
        if not decision.held and decision.target_replicas != current:
            self.last_change_s = state.now_s
        return decision

    def _record_experience(self, history, cfg):
        H = self.horizon_steps
        if len(history) < mx.WINDOW_T + H:
            return
        past = history[:-H]
        future = history[-H:]
        window = mx.build_window(past, cfg, self.stats)
        realized = np.array(
            [
                sum(o.arrivals for o in future) / (H * cfg.dt_s),
                float(np.quantile([o.p95_latency_ms for o in future], 0.95)),
                calculate_efficiency(future, cfg.constraints.sla_p95_ms),
            ]
        )
        record_and_maybe_retrain(
            self.buffer, window, realized, self.net, self.opt, self.scfg, self.rng
        )
