"""Domain types, configuration, and deterministic randomness.

All money is USD, time is seconds, rates are requests/second.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class ModelSpec:
    """Static characteristics of one served model variant."""

    id: str
    parameter_count_b: float
    mem_per_replica_gb: float
    per_replica_rps: float
    base_latency_ms: float
    startup_s: float


@dataclass(frozen=True)
class Region:
    name: str
    rtt_ms: float
    price_multiplier: float
    traffic_weight: float


@dataclass(frozen=True)
class NodeType:
    name: str
    replicas_per_node: int
    cost_per_hour_usd: float


@dataclass(frozen=True)
class Constraints:
    min_replicas: int
    max_replicas: int
    sla_p95_ms: float = 200.0
    budget_usd_per_hour: float = math.inf
    max_step_fraction: float = 1.0
    cooldown_s: float = 30.0


@dataclass(frozen=True)
class SimConfig:
    model: ModelSpec
    regions: tuple[Region, ...]
    node: NodeType
    constraints: Constraints
    dt_s: float = 1.0
    seed: int = 0
    queue_cap: float = 10000.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SimConfig":
        doc = json.loads(text)
        return SimConfig(
            model=ModelSpec(**doc["model"]),
            regions=tuple(Region(**r) for r in doc["regions"]),
            node=NodeType(**doc["node"]),
            constraints=Constraints(**doc["constraints"]),
            dt_s=doc.get("dt_s", 1.0),
            seed=doc.get("seed", 0),
            queue_cap=doc.get("queue_cap", 10000.0),
        )

    @staticmethod
    def load(path) -> "SimConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return SimConfig.from_json(fh.read())


class Rng:
    """Seeded deterministic random generator.

    Wraps numpy's PCG64 bit generator; the same seed yields the same
    stream on every platform. Single-owner: never share an instance
    between concurrent simulations.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list["Rng"]:
        """Derive n independent child generators, deterministically."""
        children = self._seq.spawn(n)
        out = []
        for child in children:
            rng = Rng.__new__(Rng)
            rng.seed = self.seed
            rng._seq = child
            rng.gen = np.random.Generator(np.random.PCG64(child))
            out.append(rng)
        return out

    # Thin delegates so callers don't reach into .gen everywhere.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def lognormal(self, mean=0.0, sigma=1.0, size=None):
        return self.gen.lognormal(mean, sigma, size)

    def poisson(self, lam):
        return int(self.gen.poisson(lam))

    def binomial(self, n, p):
        return int(self.gen.binomial(n, p))

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def shuffle_index(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def _positive(value, name: str, out: list[str]):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        out.append(f"{name} must be a positive finite number, got {value!r}")


def _nonnegative(value, name: str, out: list[str]):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
        out.append(f"{name} must be a nonnegative finite number, got {value!r}")


def validate_config(cfg: SimConfig) -> list[str]:
    """Return every invariant violation in cfg; empty list means valid."""
    v: list[str] = []
    m = cfg.model
    if not m.id:
        v.append("model.id must be nonempty")
    _positive(m.parameter_count_b, "model.parameter_count_b", v)
    _positive(m.mem_per_replica_gb, "model.mem_per_replica_gb", v)
    _positive(m.per_replica_rps, "model.per_replica_rps", v)
    _positive(m.base_latency_ms, "model.base_latency_ms", v)
    _nonnegative(m.startup_s, "model.startup_s", v)

    if not cfg.regions:
        v.append("regions must be nonempty")
    else:
        names = [r.name for r in cfg.regions]
        if len(set(names)) != len(names):
            v.append("region names must be unique")
        for r in cfg.regions:
            _nonnegative(r.rtt_ms, f"region {r.name}.rtt_ms", v)
            _positive(r.price_multiplier, f"region {r.name}.price_multiplier", v)
            if not (0.0 <= r.traffic_weight <= 1.0):
                v.append(f"region {r.name}.traffic_weight must be in [0,1], got {r.traffic_weight}")
        total = sum(r.traffic_weight for r in cfg.regions)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            v.append(f"region traffic_weights must sum to 1, got {total}")

    n = cfg.node
    if n.replicas_per_node < 1:
        v.append(f"node.replicas_per_node must be a positive integer, got {n.replicas_per_node}")
    _positive(n.cost_per_hour_usd, "node.cost_per_hour_usd", v)

    c = cfg.constraints
    if c.min_replicas < 1:
        v.append(f"constraints.min_replicas must be >= 1, got {c.min_replicas}")
    if c.min_replicas > c.max_replicas:
        v.append(
            f"constraints.min_replicas ({c.min_replicas}) must not exceed "
            f"max_replicas ({c.max_replicas})"
        )
    _positive(c.sla_p95_ms, "constraints.sla_p95_ms", v)
    if not (c.budget_usd_per_hour > 0):
        v.append(f"constraints.budget_usd_per_hour must be positive, got {c.budget_usd_per_hour}")
    if not (0.0 < c.max_step_fraction <= 1.0):
        v.append(f"constraints.max_step_fraction must be in (0,1], got {c.max_step_fraction}")
    _nonnegative(c.cooldown_s, "constraints.cooldown_s", v)

    _positive(cfg.dt_s, "dt_s", v)
    _positive(cfg.queue_cap, "queue_cap", v)
    return v


def capacity_rps(replicas_serving: int, model: ModelSpec) -> float:
    """Steady-state aggregate capacity of a pool of serving replicas."""
    return float(replicas_serving) * model.per_replica_rps


def utilization(served: float, capacity: float) -> float:
    """Fraction of capacity consumed; 0 by convention for an empty cluster."""
    if capacity <= 0.0:
        return 0.0
    return min(1.0, max(0.0, served / capacity))
