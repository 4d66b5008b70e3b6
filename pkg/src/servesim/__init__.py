"""Simulated multi-region LLM serving cluster with a learned autoscaler,
deployment orchestration, and an experiment harness."""

__version__ = "0.1.0"
