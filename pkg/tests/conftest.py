import pytest

from servesim.core import (
    Constraints,
    ModelSpec,
    NodeType,
    Region,
    SimConfig,
)


def make_config(**overrides) -> SimConfig:
    base = dict(
        model=ModelSpec(
            id="llm-7b",
            parameter_count_b=7.0,
            mem_per_replica_gb=20.0,
            per_replica_rps=10.0,
            base_latency_ms=30.0,
            startup_s=10.0,
        ),
        regions=(
            Region("us-east", 5.0, 1.0, 0.5),
            Region("eu-west", 10.0, 1.1, 0.5),
        ),
        node=NodeType("gpu-4x", 4, 3.0),
        constraints=Constraints(
            min_replicas=1,
            max_replicas=100,
            sla_p95_ms=200.0,
            budget_usd_per_hour=1e9,
            max_step_fraction=1.0,
            cooldown_s=30.0,
        ),
        dt_s=1.0,
        seed=1,
        queue_cap=10000.0,
    )
    base.update(overrides)
    return SimConfig(**base)


@pytest.fixture
def cfg() -> SimConfig:
    return make_config()


@pytest.fixture
def single_region_cfg() -> SimConfig:
    return make_config(regions=(Region("us-east", 5.0, 1.0, 1.0),))
