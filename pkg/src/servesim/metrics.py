"""Metric pipeline: windowed normalization, streaming quantiles, robust
anomaly detection, trend analysis, and classical forecasting baselines.

Also assembles the three-stream MetricWindow the neural predictor consumes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import SimConfig

WINDOW_T = 32
RESOURCE_CHANNELS = 4   # cpu_util, mem_util, gpu_util, net_util
PERFORMANCE_CHANNELS = 3  # p95_latency_norm, throughput_norm, error_rate
DEPLOY_FEATURES = 8
HISTORY_BUFFER = 512
STD_FLOOR = 1e-6
MAD_SCALE = 1.4826


@dataclass
class MetricWindow:
    resource: np.ndarray      # [T, 4]
    performance: np.ndarray   # [T, 3]
    deploy: np.ndarray        # [8]

    def validate(self):
        if self.resource.shape != (WINDOW_T, RESOURCE_CHANNELS):
            raise ValueError(f"resource stream shape {self.resource.shape}")
        if self.performance.shape != (WINDOW_T, PERFORMANCE_CHANNELS):
            raise ValueError(f"performance stream shape {self.performance.shape}")
        if self.deploy.shape != (DEPLOY_FEATURES,):
            raise ValueError(f"deploy vector shape {self.deploy.shape}")
        for arr in (self.resource, self.performance, self.deploy):
            if not np.all(np.isfinite(arr)):
                raise ValueError("window contains non-finite values")


class RunningStats:
    """Online per-channel mean/variance plus a bounded history buffer.

    Welford's single-pass update keeps the variance numerically stable;
    the buffer retains the last HISTORY_BUFFER samples for median/MAD
    and order statistics.
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.count = 0
        self.mean = np.zeros(channels)
        self._m2 = np.zeros(channels)
        self.buffer: deque = deque(maxlen=HISTORY_BUFFER)

    @property
    def variance(self) -> np.ndarray:
        if self.count < 1:
            return np.zeros(self.channels)
        return self._m2 / self.count

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def update(self, sample) -> "RunningStats":
        x = np.asarray(sample, dtype=float)
        if x.shape != (self.channels,):
            raise ValueError(f"expected {self.channels} channels, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite sample")
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self._m2 = self._m2 + delta * (x - self.mean)
        self.buffer.append(x)
        return self

    def normalize(self, value) -> np.ndarray:
        if self.count < 2:
            raise ValueError("need at least 2 samples before normalizing")
        x = np.asarray(value, dtype=float)
        return (x - self.mean) / np.maximum(self.std, STD_FLOOR)

    def buffer_array(self) -> np.ndarray:
        return np.array(self.buffer)


def streaming_quantile(history_buffer, q: float) -> float:
    """Exact order statistic over the buffer, linear rank interpolation."""
    buf = np.asarray(history_buffer, dtype=float)
    if buf.size == 0:
        raise ValueError("empty buffer")
    if not (0.0 < q < 1.0):
        raise ValueError("q must lie in (0,1)")
    return float(np.quantile(buf, q, method="linear"))


def detect_anomalies(history_buffer, threshold: float = 3.5) -> list[int]:
    """Indices whose robust z-score |x - median| / (1.4826*MAD) exceeds threshold."""
    buf = np.asarray(history_buffer, dtype=float)
    if buf.size < 8:
        raise ValueError("need at least 8 samples for anomaly detection")
    med = float(np.median(buf))
    mad = float(np.median(np.abs(buf - med)))
    scores = np.abs(buf - med) / (MAD_SCALE * mad + 1e-9)
    return [int(i) for i in np.nonzero(scores > threshold)[0]]


def trend_slope(series) -> float:
    """Ordinary least-squares slope of value against sample index."""
    y = np.asarray(series, dtype=float)
    if y.size < 2:
        raise ValueError("need at least 2 points for a slope")
    x = np.arange(y.size, dtype=float)
    return float(np.polyfit(x, y, 1)[0])


def seasonal_naive_forecast(series, period: int, horizon: int) -> float:
    """forecast(t+h) = value(t + h - period); degenerate period 1 = naive."""
    y = np.asarray(series, dtype=float)
    if period < 1:
        raise ValueError("period must be >= 1")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if y.size < period:
        raise ValueError(f"series length {y.size} shorter than period {period}")
    idx = y.size + horizon - 1 - period
    while idx >= y.size:  # horizon beyond one period wraps onto the last period
        idx -= period
    return float(y[idx])


def holt_winters_forecast(
    series, period: int, horizon: int,
    alpha: float = 0.3, beta: float = 0.05, gamma: float = 0.2,
) -> float:
    """Additive Holt-Winters forecast h steps ahead.

    Initialization: level = first-period mean, trend = 0, seasonals =
    first-period deviations from that mean.
    """
    y = np.asarray(series, dtype=float)
    if period < 1:
        raise ValueError("period must be >= 1")
    if y.size < 2 * period:
        raise ValueError(f"need at least 2*period={2*period} points, got {y.size}")
    for name, p in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if not (0.0 < p < 1.0):
            raise ValueError(f"{name} must lie in (0,1)")

    level = float(np.mean(y[:period]))
    trend = 0.0
    season = (y[:period] - level).astype(float)

    for t in range(period, y.size):
        s = season[t % period]
        prev_level = level
        level = alpha * (y[t] - s) + (1.0 - alpha) * (level + trend)
        trend = beta * (level - prev_level) + (1.0 - beta) * trend
        season[t % period] = gamma * (y[t] - level) + (1.0 - gamma) * s

    return float(level + horizon * trend + season[(y.size + horizon - 1) % period])


def window_channels(outcome, cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Raw (resource, performance) channel vectors for one step outcome."""
    node = cfg.node
    fill = outcome.serving_replicas / max(outcome.nodes * node.replicas_per_node, 1)
    resource = np.array(
        [
            outcome.utilization,                                   # cpu proxy
            min(1.0, fill),                                        # mem fill
            outcome.utilization,                                   # gpu proxy
            min(1.0, outcome.served / cfg.queue_cap),              # net proxy
        ]
    )
    performance = np.array(
        [outcome.p95_latency_ms, outcome.served / cfg.dt_s, outcome.error_rate]
    )
    return resource, performance


def deploy_features(cfg: SimConfig) -> np.ndarray:
    m, c = cfg.model, cfg.constraints
    return np.array(
        [
            math.log10(m.parameter_count_b),
            m.mem_per_replica_gb,
            m.per_replica_rps,
            m.startup_s,
            float(len(cfg.regions)),
            float(c.min_replicas),
            float(c.max_replicas),
            cfg.node.cost_per_hour_usd,
        ]
    )


def build_window(history, cfg: SimConfig, stats: RunningStats) -> MetricWindow:
    """Assemble the normalized three-stream window from the last T steps.

    stats must hold running statistics over the concatenated 7 raw
    resource+performance channels, updated once per simulated step.
    """
    if len(history) < WINDOW_T:
        raise ValueError(f"need at least {WINDOW_T} steps of history, got {len(history)}")
    if stats.count < 2:
        raise ValueError("running stats need at least 2 samples")
    rows = [window_channels(o, cfg) for o in history[-WINDOW_T:]]
    raw = np.array([np.concatenate([r, p]) for r, p in rows])  # [T, 7]
    normed = (raw - stats.mean) / np.maximum(stats.std, STD_FLOOR)
    deploy = deploy_features(cfg)
    # Deploy features are constants per config; z-scoring against their own
    # degenerate distribution would zero them, so scale them to O(1) instead.
    deploy = deploy / np.maximum(np.abs(deploy), 1.0)
    w = MetricWindow(
        resource=normed[:, :RESOURCE_CHANNELS],
        performance=normed[:, RESOURCE_CHANNELS:],
        deploy=deploy,
    )
    w.validate()
    return w
