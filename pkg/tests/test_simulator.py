import dataclasses
import hashlib
import math

import numpy as np
import pytest

from servesim.core import Constraints, Region, Rng
from servesim.autoscaler import ScalingDecision, StaticPolicy, ThresholdPolicy
from servesim.simulator import (
    ClusterState,
    apply_scaling,
    run,
    step,
    summarize,
)
from servesim.workload import PatternSpec, TracePoint, generate_trace

from conftest import make_config

# Frozen from a reference run of this implementation: seeded diurnal trace
# (seed 7, base 300, amplitude 0.5, noise_cv 0.1, 1440 s) driven by the
# threshold policy from 30 replicas/region; per-step series hashed.
GOLDEN_RUN_SHA256 = "3a822d4efbfd53eae5a97f9b506a6c311be3c03a59f80817b6700d03d8cd7c85"


def decision(targets, t=0.0):
    return ScalingDecision(
        target_replicas=targets, score_breakdown={}, issued_at_s=t, held=False
    )


class TestStep:
    def test_fluid_queue_arithmetic(self, single_region_cfg):
        state = ClusterState.initial(single_region_cfg, replicas_per_region=10)
        out = step(state, 150.0, single_region_cfg)  # capacity 100 rps
        assert out.served == pytest.approx(100.0)
        assert out.backlog == pytest.approx(50.0)
        assert out.dropped == 0.0
        assert out.utilization == pytest.approx(1.0)

    def test_idle(self, single_region_cfg):
        state = ClusterState.initial(single_region_cfg, replicas_per_region=10)
        out = step(state, 0.0, single_region_cfg)
        assert out.served == 0.0
        assert out.utilization == 0.0
        # latency = 1.2 * (base 30 + rtt 5) with zero backlog
        assert out.p95_latency_ms == pytest.approx(1.2 * 35.0)

    def test_cost_arithmetic(self):
        # 8 replicas on 4-replica nodes = 2 nodes x $3/h; one hour of steps.
        cfg = make_config(regions=(Region("us-east", 5.0, 1.0, 1.0),))
        state = ClusterState.initial(cfg, replicas_per_region=8)
        for _ in range(3600):
            step(state, 60000.0 / 3600.0, cfg)  # 60,000 served over the hour
        assert state.ledger.compute_usd == pytest.approx(6.0)
        assert state.ledger.served_total == pytest.approx(60000.0, rel=1e-6)
        per_inference = state.ledger.compute_usd / state.ledger.served_total
        assert per_inference == pytest.approx(0.0001, rel=1e-6)
        # Side categories accrue at their flat rates.
        assert state.ledger.storage_usd == pytest.approx(0.05)
        assert state.ledger.network_usd == pytest.approx(0.01 * 60.0, rel=1e-6)

    def test_backlog_capped_and_drops_counted(self, single_region_cfg):
        cfg = make_config(
            regions=(Region("us-east", 5.0, 1.0, 1.0),), queue_cap=100.0
        )
        state = ClusterState.initial(cfg, replicas_per_region=1)  # capacity 10
        out = step(state, 500.0, cfg)
        assert out.backlog == pytest.approx(100.0)
        assert out.dropped == pytest.approx(500.0 - 10.0 - 100.0)
        assert out.error_rate == pytest.approx(out.dropped / 500.0)

    def test_rejects_bad_arrivals(self, cfg):
        state = ClusterState.initial(cfg)
        for bad in (-1.0, float("nan"), float("inf")):
            with pytest.raises(ValueError):
                step(state, bad, cfg)

    def test_region_split_by_weight(self, cfg):
        state = ClusterState.initial(cfg, replicas_per_region=50)
        out = step(state, 200.0, cfg)
        assert out.per_region["us-east"]["arrivals"] == pytest.approx(100.0)
        assert out.per_region["eu-west"]["arrivals"] == pytest.approx(100.0)


class TestApplyScaling:
    def test_warmup_delays_capacity(self, single_region_cfg):
        cfg = make_config(
            regions=(Region("us-east", 5.0, 1.0, 1.0),),
            model=dataclasses.replace(make_config().model, startup_s=60.0),
        )
        state = ClusterState.initial(cfg, replicas_per_region=2)
        apply_scaling(state, decision({"us-east": 4}), cfg)
        out = step(state, 40.0, cfg)  # capacity still 20 rps
        assert out.served == pytest.approx(20.0)
        for _ in range(60):
            out = step(state, 0.0, cfg)
        out = step(state, 40.0, cfg)  # warmup elapsed: capacity 40 rps
        assert out.serving_replicas == 4

    def test_idempotent_on_equal_targets(self, cfg):
        state = ClusterState.initial(cfg, replicas_per_region=5)
        before = {n: (p.target_replicas, p.serving_replicas, list(p.pending))
                  for n, p in state.pools.items()}
        apply_scaling(state, decision({"us-east": 5, "eu-west": 5}), cfg)
        after = {n: (p.target_replicas, p.serving_replicas, list(p.pending))
                 for n, p in state.pools.items()}
        assert before == after

    def test_bounds_guard(self, cfg):
        state = ClusterState.initial(cfg, replicas_per_region=5)
        with pytest.raises(ValueError, match="outside"):
            apply_scaling(state, decision({"us-east": 0}), cfg)
        with pytest.raises(ValueError, match="outside"):
            apply_scaling(state, decision({"us-east": 101}), cfg)

    def test_unknown_region_rejected(self, cfg):
        state = ClusterState.initial(cfg)
        with pytest.raises(ValueError, match="unknown region"):
            apply_scaling(state, decision({"nowhere": 2}), cfg)

    def test_scale_down_cancels_pending_first(self, single_region_cfg):
        cfg = single_region_cfg
        state = ClusterState.initial(cfg, replicas_per_region=2)
        apply_scaling(state, decision({"us-east": 6}), cfg)  # 4 pending
        assert sum(c for _, c in state.pools["us-east"].pending) == 4
        apply_scaling(state, decision({"us-east": 3}), cfg)
        pool = state.pools["us-east"]
        assert pool.serving_replicas == 2
        assert sum(c for _, c in pool.pending) == 1
        assert pool.target_replicas == 3

    def test_invariant_serving_plus_pending_equals_target(self, cfg):
        state = ClusterState.initial(cfg, replicas_per_region=3)
        rng = Rng(0)
        for i in range(50):
            targets = {
                n: int(rng.integers(1, 20)) for n in state.pools
            }
            apply_scaling(state, decision(targets), cfg)
            step(state, float(rng.uniform(0, 500)), cfg)
            for name, pool in state.pools.items():
                assert pool.serving_replicas + sum(c for _, c in pool.pending) \
                    == pool.target_replicas


class TestRun:
    def test_static_exact_capacity_closed_form(self, single_region_cfg):
        cfg = single_region_cfg
        trace = [TracePoint(t, 60.0) for t in range(100)]
        result = run(trace, StaticPolicy(10, cfg), cfg, initial_replicas=10)
        for s in result.steps:
            assert s.utilization == pytest.approx(0.6)

    def test_empty_trace_rejected(self, cfg):
        with pytest.raises(ValueError):
            run([], StaticPolicy(1, cfg), cfg)

    def test_policy_error_carries_step_index(self, cfg):
        class Exploding:
            def decide(self, state, history, cfg):
                if len(history) == 3:
                    raise KeyError("boom")
                return None

        trace = [TracePoint(t, 10.0) for t in range(10)]
        with pytest.raises(RuntimeError, match="step 3"):
            run(trace, Exploding(), cfg)

    def test_golden_run_checksum(self, cfg):
        trace = generate_trace(
            PatternSpec(base_rps=300.0, diurnal_amplitude=0.5, period_s=1440.0,
                        noise_cv=0.1),
            1440, 1.0, Rng(7),
        )
        result = run(trace, ThresholdPolicy(), cfg, initial_replicas=30)
        h = hashlib.sha256()
        for s in result.steps:
            h.update(
                f"{s.arrivals:.9f},{s.served:.9f},{s.dropped:.9f},"
                f"{s.p95_latency_ms:.9f},{s.cost_delta_usd:.12f}\n".encode()
            )
        assert h.hexdigest() == GOLDEN_RUN_SHA256

    def test_conservation(self, cfg):
        trace = generate_trace(
            PatternSpec(base_rps=400.0, noise_cv=0.3, spike_rate_per_day=5.0,
                        spike_magnitude=3.0, period_s=300.0),
            600, 1.0, Rng(11),
        )
        result = run(trace, ThresholdPolicy(), cfg, initial_replicas=10)
        arrivals = sum(s.arrivals for s in result.steps)
        served = sum(s.served for s in result.steps)
        dropped = sum(s.dropped for s in result.steps)
        final_backlog = result.steps[-1].backlog
        assert arrivals == pytest.approx(served + dropped + final_backlog,
                                         abs=1e-6 * len(trace))

    def test_more_replicas_never_more_backlog(self, cfg):
        trace = generate_trace(
            PatternSpec(base_rps=500.0, diurnal_amplitude=0.5, period_s=200.0,
                        noise_cv=0.2),
            400, 1.0, Rng(3),
        )
        for r in (5, 15, 30):
            small = run(trace, StaticPolicy(r, cfg), cfg, initial_replicas=r)
            big = run(trace, StaticPolicy(r + 1, cfg), cfg, initial_replicas=r + 1)
            for s_small, s_big in zip(small.steps, big.steps):
                assert s_big.backlog <= s_small.backlog + 1e-9

    def test_bit_identical_repeat(self, cfg):
        trace = generate_trace(PatternSpec(base_rps=300.0, noise_cv=0.2),
                               300, 1.0, Rng(2))
        a = run(trace, ThresholdPolicy(), cfg, initial_replicas=20)
        b = run(trace, ThresholdPolicy(), cfg, initial_replicas=20)
        assert a.to_json() == b.to_json()
        assert all(
            x.__dict__ == y.__dict__ for x, y in zip(a.steps, b.steps)
        )

    def test_latency_floor(self, cfg):
        trace = generate_trace(PatternSpec(base_rps=800.0, noise_cv=0.5),
                               300, 1.0, Rng(4))
        result = run(trace, ThresholdPolicy(), cfg, initial_replicas=5)
        floor = 1.2 * (cfg.model.base_latency_ms +
                       min(r.rtt_ms for r in cfg.regions))
        for s in result.steps:
            assert s.p95_latency_ms >= floor - 1e-9

    def test_counters_monotone(self, cfg):
        trace = [TracePoint(t, 900.0) for t in range(50)]
        state = ClusterState.initial(cfg, replicas_per_region=3)
        prev_served = prev_dropped = 0.0
        for p in trace:
            step(state, p.rps, cfg)
            served = sum(state.served_count.values())
            dropped = sum(state.dropped_count.values())
            assert served >= prev_served and dropped >= prev_dropped
            prev_served, prev_dropped = served, dropped


class TestReporting:
    def test_summary_fields(self, cfg):
        trace = [TracePoint(t, 100.0) for t in range(40)]
        result = run(trace, StaticPolicy(10, cfg), cfg, initial_replicas=10)
        s = result.summary
        assert s["steps"] == 40
        assert 0.0 <= s["mean_utilization"] <= 1.0
        assert s["sla_violation_fraction"] == 0.0
        assert s["cost_per_inference_usd"] > 0.0
        assert s["mean_latency_ms"] == pytest.approx(s["p95_latency_ms"] / 1.2)

    def test_csv_header_and_rows(self, cfg, tmp_path):
        trace = [TracePoint(t, 50.0) for t in range(5)]
        result = run(trace, StaticPolicy(5, cfg), cfg, initial_replicas=5)
        path = tmp_path / "run.csv"
        result.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t_s,arrivals,served,dropped,p95_ms,util,err_rate,cost_usd"
        assert len(lines) == 6

    def test_json_round_trip(self, cfg):
        import json

        trace = [TracePoint(t, 50.0) for t in range(5)]
        result = run(trace, StaticPolicy(5, cfg), cfg, initial_replicas=5)
        doc = json.loads(result.to_json())
        assert doc["ledger"]["total_usd"] == pytest.approx(
            result.ledger.total_usd
        )
        assert doc["summary"]["steps"] == 5
