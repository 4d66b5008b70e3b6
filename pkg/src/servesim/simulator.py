"""Deterministic fixed-step fluid-queue simulation of the serving fleet.

Backlog evolves by arrivals minus capacity per region; replica scale-ups
pass through a warmup delay before contributing capacity. Costs accrue
from node-hours (compute), served volume (network), and a flat storage
rate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

from .core import SimConfig, capacity_rps, utilization
from .workload import TracePoint

NETWORK_USD_PER_1K_SERVED = 0.01
STORAGE_USD_PER_HOUR = 0.05
P95_OVER_MEAN = 1.2  # replaceable heuristic: p95 ~ 1.2x mean-wait estimate


@dataclass
class CostLedger:
    compute_usd: float = 0.0
    network_usd: float = 0.0
    storage_usd: float = 0.0
    served_total: float = 0.0

    @property
    def inference_count(self) -> int:
        return int(self.served_total)

    @property
    def total_usd(self) -> float:
        return self.compute_usd + self.network_usd + self.storage_usd


@dataclass
class RegionPool:
    target_replicas: int
    pending: list[tuple[float, int]] = field(default_factory=list)
    serving_replicas: int = 0

    def promote(self, now_s: float):
        ready = [(t, c) for t, c in self.pending if t <= now_s]
        if ready:
            self.serving_replicas += sum(c for _, c in ready)
            self.pending = [(t, c) for t, c in self.pending if t > now_s]


@dataclass
class ClusterState:
    now_s: float
    pools: dict[str, RegionPool]
    backlog: dict[str, float]
    ledger: CostLedger
    served_count: dict[str, float]
    dropped_count: dict[str, float]
    error_count: dict[str, float]

    @staticmethod
    def initial(cfg: SimConfig, replicas_per_region: int | None = None) -> "ClusterState":
        r0 = replicas_per_region
        if r0 is None:
            r0 = cfg.constraints.min_replicas
        pools = {
            r.name: RegionPool(target_replicas=r0, serving_replicas=r0)
            for r in cfg.regions
        }
        zeros = {r.name: 0.0 for r in cfg.regions}
        return ClusterState(
            now_s=0.0,
            pools=pools,
            backlog=dict(zeros),
            ledger=CostLedger(),
            served_count=dict(zeros),
            dropped_count=dict(zeros),
            error_count=dict(zeros),
        )

    def total_serving(self) -> int:
        return sum(p.serving_replicas for p in self.pools.values())

    def total_target(self) -> int:
        return sum(p.target_replicas for p in self.pools.values())


@dataclass
class StepOutcome:
    t_s: float
    arrivals: float
    served: float
    dropped: float
    p95_latency_ms: float
    utilization: float
    error_rate: float
    cost_delta_usd: float
    backlog: float
    serving_replicas: int
    target_replicas: int
    nodes: int
    per_region: dict[str, dict[str, float]]


def _nodes_needed(target_replicas: int, replicas_per_node: int) -> int:
    return int(math.ceil(target_replicas / replicas_per_node))


def step(state: ClusterState, arrivals_rps: float, cfg: SimConfig) -> StepOutcome:
    """Advance the cluster one dt, serving arrivals_rps split by region weight."""
    if not math.isfinite(arrivals_rps) or arrivals_rps < 0:
        raise ValueError(f"arrivals_rps must be finite and >= 0, got {arrivals_rps}")
    dt = cfg.dt_s
    model = cfg.model

    for pool in state.pools.values():
        pool.promote(state.now_s)

    per_region: dict[str, dict[str, float]] = {}
    tot_arr = tot_served = tot_dropped = tot_cap = tot_backlog = 0.0
    lat_weighted = 0.0
    cost_delta = 0.0
    total_nodes = 0

    for region in cfg.regions:
        pool = state.pools[region.name]
        a = arrivals_rps * region.traffic_weight * dt
        cap_rps = capacity_rps(pool.serving_replicas, model)
        cap = cap_rps * dt
        offered = a + state.backlog[region.name]
        served = min(offered, cap)
        backlog_new = min(cfg.queue_cap, offered - served)
        dropped = (offered - served) - backlog_new
        latency = (
            model.base_latency_ms
            + region.rtt_ms
            + 1000.0 * backlog_new / max(cap_rps, 1e-9)
        )
        p95 = P95_OVER_MEAN * latency
        util = utilization(served, cap)
        err_rate = dropped / a if a > 0 else 0.0

        nodes = _nodes_needed(pool.target_replicas, cfg.node.replicas_per_node)
        region_cost = (
            nodes * cfg.node.cost_per_hour_usd * region.price_multiplier * dt / 3600.0
        )

        state.backlog[region.name] = backlog_new
        state.served_count[region.name] += served
        state.dropped_count[region.name] += dropped
        state.error_count[region.name] += dropped

        per_region[region.name] = {
            "arrivals": a,
            "served": served,
            "dropped": dropped,
            "p95_latency_ms": p95,
            "utilization": util,
            "error_rate": err_rate,
            "backlog": backlog_new,
            "cost_usd": region_cost,
            "serving_replicas": pool.serving_replicas,
            "target_replicas": pool.target_replicas,
        }
        tot_arr += a
        tot_served += served
        tot_dropped += dropped
        tot_cap += cap
        tot_backlog += backlog_new
        lat_weighted += p95 * a
        total_nodes += nodes
        cost_delta += region_cost

    storage = STORAGE_USD_PER_HOUR * dt / 3600.0
    network = NETWORK_USD_PER_1K_SERVED * tot_served / 1000.0
    cost_delta += storage + network

    state.ledger.compute_usd += cost_delta - storage - network
    state.ledger.storage_usd += storage
    state.ledger.network_usd += network
    state.ledger.served_total += tot_served

    if tot_arr > 0:
        p95_agg = lat_weighted / tot_arr
    else:
        p95_agg = sum(
            d["p95_latency_ms"] for d in per_region.values()
        ) / len(per_region)

    state.now_s += dt
    return StepOutcome(
        t_s=state.now_s,
        arrivals=tot_arr,
        served=tot_served,
        dropped=tot_dropped,
        p95_latency_ms=p95_agg,
        utilization=utilization(tot_served, tot_cap),
        error_rate=tot_dropped / tot_arr if tot_arr > 0 else 0.0,
        cost_delta_usd=cost_delta,
        backlog=tot_backlog,
        serving_replicas=state.total_serving(),
        target_replicas=state.total_target(),
        nodes=total_nodes,
        per_region=per_region,
    )


def apply_scaling(state: ClusterState, decision, cfg: SimConfig) -> ClusterState:
    """Apply per-region replica targets; scale-ups warm up for startup_s."""
    c = cfg.constraints
    for name, target in decision.target_replicas.items():
        if name not in state.pools:
            raise ValueError(f"decision names unknown region {name!r}")
        if not (c.min_replicas <= target <= c.max_replicas):
            raise ValueError(
                f"target {target} for region {name!r} outside "
                f"[{c.min_replicas}, {c.max_replicas}]"
            )
    for name, target in decision.target_replicas.items():
        pool = state.pools[name]
        delta = target - pool.target_replicas
        if delta > 0:
            if cfg.model.startup_s > 0:
                pool.pending.append((state.now_s + cfg.model.startup_s, delta))
            else:
                pool.serving_replicas += delta
        elif delta < 0:
            # Cancel the youngest warmups first, then retire serving replicas.
            remove = -delta
            while remove > 0 and pool.pending:
                t, cnt = pool.pending[-1]
                take = min(cnt, remove)
                remove -= take
                if take == cnt:
                    pool.pending.pop()
                else:
                    pool.pending[-1] = (t, cnt - take)
            pool.serving_replicas -= remove
        pool.target_replicas = target
    return state


@dataclass
class SimResult:
    steps: list[StepOutcome]
    decisions: list
    ledger: CostLedger
    summary: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "summary": self.summary,
                "ledger": {
                    "compute_usd": self.ledger.compute_usd,
                    "network_usd": self.ledger.network_usd,
                    "storage_usd": self.ledger.storage_usd,
                    "total_usd": self.ledger.total_usd,
                    "inference_count": self.ledger.inference_count,
                },
            },
            indent=2,
            sort_keys=True,
        )

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["t_s", "arrivals", "served", "dropped", "p95_ms", "util", "err_rate", "cost_usd"]
            )
            for s in self.steps:
                w.writerow(
                    [
                        s.t_s,
                        f"{s.arrivals:.6f}",
                        f"{s.served:.6f}",
                        f"{s.dropped:.6f}",
                        f"{s.p95_latency_ms:.6f}",
                        f"{s.utilization:.6f}",
                        f"{s.error_rate:.6f}",
                        f"{s.cost_delta_usd:.8f}",
                    ]
                )


def summarize(steps: list[StepOutcome], ledger: CostLedger, sla_p95_ms: float) -> dict:
    n = len(steps)
    p95s = sorted(s.p95_latency_ms for s in steps)
    idx = max(0, min(n - 1, int(math.ceil(0.95 * n)) - 1))
    violations = sum(1 for s in steps if s.p95_latency_ms > sla_p95_ms)
    served = sum(s.served for s in steps)
    return {
        "steps": n,
        "mean_utilization": sum(s.utilization for s in steps) / n,
        "p95_latency_ms": p95s[idx],
        "mean_latency_ms": sum(s.p95_latency_ms for s in steps) / n / P95_OVER_MEAN,
        "sla_violation_fraction": violations / n,
        "cost_per_inference_usd": (ledger.total_usd / served) if served > 0 else math.inf,
        "total_cost_usd": ledger.total_usd,
        "served_total": served,
        "dropped_total": sum(s.dropped for s in steps),
    }


def run(
    trace: list[TracePoint],
    policy,
    cfg: SimConfig,
    initial_replicas: int | None = None,
) -> SimResult:
    """Drive step() over a trace, consulting the policy every step.

    The policy's decide(state, history, cfg) may return None (no opinion)
    or a ScalingDecision; non-held decisions are applied before the step.
    """
    if not trace:
        raise ValueError("trace must be nonempty")
    state = ClusterState.initial(cfg, initial_replicas)
    history: list[StepOutcome] = []
    decisions = []
    for i, point in enumerate(trace):
        try:
            decision = policy.decide(state, history, cfg)
        except Exception as exc:
            raise RuntimeError(f"policy failed at step {i} (t={point.t_s})") from exc
        if decision is not None:
            decisions.append(decision)
            if not decision.held:
                apply_scaling(state, decision, cfg)
        history.append(step(state, point.rps, cfg))
    summary = summarize(history, state.ledger, cfg.constraints.sla_p95_ms)
    return SimResult(steps=history, decisions=decisions, ledger=state.ledger, summary=summary)
