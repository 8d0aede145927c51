"""Report figures rendered next to the CSV/JSON outputs of a run directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

WINDOW = 30


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_exploration(metrics_csv, out_png) -> Path:
    rows = _read_csv(metrics_csv)
    step = [int(r["step"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    for key in ("loss_t", "e_pred"):
        ax1.plot(step, [float(r[key]) for r in rows], label=key)
    ax1.set_xlabel("gradient step")
    ax1.set_yscale("symlog", linthresh=1e-3)
    ax1.legend()
    for key in ("actor_hit_rate", "sampler_hit_rate"):
        ax2.plot(step, [float(r[key]) for r in rows], label=key)
    ax2.set_xlabel("gradient step")
    ax2.set_ylabel("object hit rate")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def plot_deformation_grid(grid_json, out_png) -> Path:
    data = json.loads(Path(grid_json).read_text())
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, which in zip(axes, ("position", "motion")):
        src = np.array([g["source"] for g in data[which]])
        dst = np.array([g["target"] for g in data[which]])
        ax.quiver(src[:, 0], src[:, 1], dst[:, 0] - src[:, 0], dst[:, 1] - src[:, 1],
                  angles="xy", scale_units="xy", scale=1.0, width=0.004)
        if which == "position":
            for s in data["sprites"]:
                ax.plot(s["x"], s["y"], "o", ms=8, mfc="none", mec="tab:red")
        ax.set_xlim(0, 1)
        ax.set_ylim(1, 0)  # y grows downwards, as in the rendered frame
        ax.set_aspect("equal")
        ax.set_title(which)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def plot_learning_curves(task_dirs: dict, out_png, window: int = WINDOW) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, d in task_dirs.items():
        rows = _read_csv(Path(d) / "task_metrics.csv")
        if not rows:
            continue
        steps = np.array([int(r["cumulative_steps"]) for r in rows])
        success = np.array([r["success"] == "True" for r in rows], dtype=float)
        k = min(window, len(success))
        smooth = np.convolve(success, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, label=name)
    ax.axhline(0.9, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(f"success ({window}-episode mean)")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def plot_success(report_json, out_png) -> Path:
    report = json.loads(Path(report_json).read_text())
    names = list(report["tasks"])
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.5))
    ax.bar(x - 0.2, [report["tasks"][n]["train_success"] for n in names], 0.4, label="train")
    ax.bar(x + 0.2, [report["tasks"][n]["robustness_success"] for n in names], 0.4, label="robustness")
    ax.set_xticks(x, names, rotation=20, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("success rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def render_report(run_dir) -> list[Path]:
    """Draw every figure whose inputs exist under `run_dir`."""
    run = Path(run_dir)
    figs = run / "figures"
    figs.mkdir(exist_ok=True)
    made = []
    explore = run / "exploration" if (run / "exploration").is_dir() else run
    if (explore / "explore_metrics.csv").exists():
        made.append(plot_exploration(explore / "explore_metrics.csv", figs / "exploration.png"))
    if (explore / "deformation_grid.json").exists():
        made.append(plot_deformation_grid(explore / "deformation_grid.json", figs / "deformation_grid.png"))
    task_dirs = {p.name: p for p in sorted((run / "tasks").glob("*")) if (p / "task_metrics.csv").exists()}
    if task_dirs:
        made.append(plot_learning_curves(task_dirs, figs / "learning_curves.png"))
    if (run / "report.json").exists():
        made.append(plot_success(run / "report.json", figs / "success.png"))
    return made
