"""Report figures rendered to files next to the delimited output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_trace_fig(trace, path, title="Workload trace"):
    fig, ax = plt.subplots(figsize=(9, 3))
    ax.plot([p.t_s for p in trace], [p.rps for p in trace], lw=0.8)
    ax.set_xlabel("t (s)")
    ax.set_ylabel("arrival rate (req/s)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_run_fig(result, sla_p95_ms, path, title="Simulation run"):
    steps = result.steps
    t = [s.t_s for s in steps]
    fig, axes = plt.subplots(3, 1, figsize=(9, 7), sharex=True)
    axes[0].plot(t, [s.arrivals for s in steps], lw=0.7, label="arrivals")
    axes[0].plot(t, [s.served for s in steps], lw=0.7, label="served")
    axes[0].set_ylabel("req / step")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[1].plot(t, [s.p95_latency_ms for s in steps], lw=0.7, color="tab:red")
    axes[1].axhline(sla_p95_ms, ls="--", lw=0.8, color="k", label="SLA")
    axes[1].set_ylabel("p95 latency (ms)")
    axes[1].legend(loc="upper right", fontsize=8)
    axes[2].plot(t, [s.target_replicas for s in steps], lw=0.9, color="tab:green")
    axes[2].set_ylabel("target replicas")
    axes[2].set_xlabel("t (s)")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_compare_fig(report, path):
    names = list(report.rows)
    metrics = [
        ("mean_utilization", "mean utilization"),
        ("p95_latency_ms", "p95 latency (ms)"),
        ("sla_violation_fraction", "SLA violations"),
        ("cost_per_inference_usd", "cost / inference ($)"),
    ]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.2))
    for ax, (key, label) in zip(axes, metrics):
        ax.bar(names, [report.rows[n][key] for n in names], color="tab:blue")
        ax.set_title(label, fontsize=9)
        ax.tick_params(axis="x", rotation=30, labelsize=8)
    fig.suptitle("Policy comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_fig(rows, sla_p95_ms, path):
    rps = [r["rps"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(rps, [r["p95_latency_ms"] for r in rows], "o-", color="tab:red")
    ax1.axhline(sla_p95_ms, ls="--", lw=0.8, color="k")
    ax1.set_xscale("log")
    ax1.set_xlabel("load (req/s)")
    ax1.set_ylabel("p95 latency (ms)", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(rps, [r["sla_violation_fraction"] for r in rows], "s-", color="tab:blue")
    ax2.set_ylabel("SLA-violation fraction", color="tab:blue")
    fig.suptitle("Load sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_adapt_fig(report, sla_p95_ms, step_at_s, path):
    steps = report.result.steps
    t = [s.t_s for s in steps]
    fig, axes = plt.subplots(2, 1, figsize=(9, 5), sharex=True)
    axes[0].plot(t, [s.arrivals for s in steps], lw=0.8, label="arrivals")
    axes[0].plot(t, [s.target_replicas for s in steps], lw=0.8, label="target replicas")
    axes[0].axvline(step_at_s, color="k", ls=":", lw=0.8)
    if report.decision_t_s is not None:
        axes[0].axvline(report.decision_t_s, color="tab:green", ls="--", lw=0.8,
                        label="scaling decision")
    axes[0].legend(fontsize=8)
    axes[1].plot(t, [s.p95_latency_ms for s in steps], lw=0.8, color="tab:red")
    axes[1].axhline(sla_p95_ms, ls="--", lw=0.8, color="k")
    axes[1].axvline(step_at_s, color="k", ls=":", lw=0.8)
    axes[1].set_ylabel("p95 latency (ms)")
    axes[1].set_xlabel("t (s)")
    fig.suptitle("Load-step adaptation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_rollout_fig(result, path):
    t = [e["t_s"] for e in result.events]
    frac = [e["fraction"] for e in result.events]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.step(t, frac, where="post", lw=1.2)
    for e in result.events:
        if e["verdict"] == "Unhealthy":
            ax.axvline(e["t_s"], color="tab:red", ls="--", lw=0.8)
    ax.set_xlabel("t (s)")
    ax.set_ylabel("canary traffic fraction")
    ax.set_title(f"Rollout ({result.final_phase.value})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_fig(log, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r["epoch"] for r in log], [r["train_loss"] for r in log], label="train")
    ax.plot([r["epoch"] for r in log], [r["val_loss"] for r in log], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_importance_fig(report, path):
    groups = list(report["measured"])
    measured = [report["measured"][g] for g in groups]
    reference = [report["reference_distribution"][g] for g in groups]
    x = range(len(groups))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([i - 0.2 for i in x], measured, width=0.4, label="measured")
    ax.bar([i + 0.2 for i in x], reference, width=0.4, label="reference")
    ax.set_xticks(list(x))
    ax.set_xticklabels(groups)
    ax.set_ylabel("importance fraction")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
