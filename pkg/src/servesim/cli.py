"""Command-line interface.

Exit codes: 0 success, 1 runtime error, 2 usage error. The LLMOPS_SEED
environment variable, when set, overrides every --seed flag.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import SimConfig
from . import harness, neuralnet as nn, plots, workload
from .autoscaler import DnnScalerPolicy
from . import simulator as sim


def _seed(args) -> int:
    env = os.environ.get("LLMOPS_SEED")
    if env is not None:
        return int(env)
    return args.seed


def _load_net(path):
    return nn.load_weights(path) if path else None


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_gen_trace(args) -> int:
    pattern = workload.PatternSpec(**json.loads(args.pattern))
    from .core import Rng
    trace = workload.generate_trace(pattern, args.duration, args.dt, Rng(_seed(args)))
    workload.save_trace(trace, args.out)
    fig = Path(args.out).with_suffix(".png")
    plots.save_trace_fig(trace, fig)
    print(f"wrote {len(trace)} points to {args.out} (figure: {fig})")
    return 0


def cmd_collect(args) -> int:
    cfg = SimConfig.load(args.config)
    trace = workload.load_trace(args.trace)
    data = harness.collect(cfg, trace, args.episodes, _seed(args))
    harness.save_dataset(data, args.out)
    print(f"wrote {data['targets'].shape[0]} experiences to {args.out}")
    return 0


def cmd_train(args) -> int:
    data = harness.load_dataset(args.data)
    net, log = harness.train(data, args.epochs, _seed(args))
    nn.save_weights(net, args.out_weights)
    log_path = Path(args.out_weights).with_suffix(".log.csv")
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss"])
        w.writeheader()
        w.writerows(log)
    if log:
        plots.save_training_fig(log, Path(args.out_weights).with_suffix(".png"))
        print(f"final val loss: {log[-1]['val_loss']:.6f}")
    print(f"wrote weights to {args.out_weights}")
    return 0


def cmd_compare(args) -> int:
    cfg = SimConfig.load(args.config)
    trace = workload.load_trace(args.trace)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    for p in policies:
        if p not in ("static", "threshold", "dnn"):
            print(f"usage error: unknown policy {p!r}", file=sys.stderr)
            raise SystemExit(2)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = [_seed(args) + i for i in range(args.reps)]
    net = _load_net(args.weights)
    report = harness.compare(
        cfg, trace, policies, seeds, net=net, period_steps=args.period
    )
    out = _outdir(args.out)
    (out / "compare.json").write_text(report.to_json(), encoding="utf-8")
    report.write_csv(out / "compare.csv")
    plots.save_compare_fig(report, out / "compare.png")
    print(report.to_json())
    return 0


def cmd_sweep(args) -> int:
    if args.from_rps > args.to_rps:
        print("usage error: --from-rps must not exceed --to-rps", file=sys.stderr)
        raise SystemExit(2)
    cfg = SimConfig.load(args.config)
    net = _load_net(args.weights)
    rows = harness.sweep(cfg, args.from_rps, args.to_rps, args.steps,
                         net=net, seed=_seed(args))
    out = _outdir(args.out)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    plots.save_sweep_fig(rows, cfg.constraints.sla_p95_ms, out / "sweep.png")
    print(f"wrote {len(rows)} sweep levels to {out / 'sweep.csv'}")
    return 0


def cmd_adapt(args) -> int:
    cfg = SimConfig.load(args.config)
    trace = workload.load_trace(args.trace)
    net = _load_net(args.weights)
    report = harness.adapt(
        cfg, trace, args.step_at, args.step_to, net=net, seed=_seed(args)
    )
    out = _outdir(args.out)
    doc = {
        "adaptation_time_s": report.adaptation_time_s,
        "recovery_time_s": report.recovery_time_s,
        "decision_t_s": report.decision_t_s,
        "direction": report.direction,
    }
    (out / "adapt.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    report.result.write_csv(out / "adapt.csv")
    plots.save_adapt_fig(report, cfg.constraints.sla_p95_ms, args.step_at,
                         out / "adapt.png")
    print(json.dumps(doc, indent=2))
    return 0


def cmd_rollout_demo(args) -> int:
    cfg = SimConfig.load(args.config)
    result = harness.rollout_demo(cfg, args.fault_rate, _seed(args))
    out = _outdir(args.out)
    result.write_events(out / "rollout_events.jsonl")
    summary = {
        "final_phase": result.final_phase.value,
        "completion_time_s": result.completion_time_s,
        "windows": result.windows,
    }
    (out / "rollout.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    plots.save_rollout_fig(result, out / "rollout.png")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_importance(args) -> int:
    net = nn.load_weights(args.weights)
    data = harness.load_dataset(args.data)
    report = harness.importance_report(net, data, seed=_seed(args))
    out = _outdir(args.out)
    (out / "importance.json").write_text(json.dumps(report, indent=2),
                                         encoding="utf-8")
    plots.save_importance_fig(report, out / "importance.png")
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="servesim")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic workload trace")
    p.add_argument("--pattern", required=True, help="PatternSpec as JSON")
    p.add_argument("--duration", type=int, required=True)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("collect", help="collect training experiences")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the multi-stream predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-weights", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="compare scaling policies")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--policies", default="static,threshold,dnn")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--period", type=int, default=1440)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="load sweep at geometric levels")
    p.add_argument("--config", required=True)
    p.add_argument("--from-rps", dest="from_rps", type=float, default=1000.0)
    p.add_argument("--to-rps", dest="to_rps", type=float, default=100000.0)
    p.add_argument("--steps", type=int, default=9)
    p.add_argument("--weights", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("adapt", help="measure reaction to a load step")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--step-at", dest="step_at", type=int, required=True)
    p.add_argument("--step-to", dest="step_to", type=float, required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("rollout-demo", help="canary rollout demonstration")
    p.add_argument("--config", required=True)
    p.add_argument("--fault-rate", dest="fault_rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout_demo)

    p = sub.add_parser("importance", help="permutation feature importance")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
