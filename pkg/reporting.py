# SPDX-License-Identifier: Apache-2.0
"""Benchmark report records, plain-text table and static plots."""

import os
import platform
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

import selector_core as core  # noqa: E402

REPORT_JSON = "report.json"
REPORT_TIMING = "report_timing.json"
REPORT_TABLE = "report.txt"
LOSS_PLOT = "loss_curves.png"
TRAJECTORY_PLOT = "search_trajectories.png"
IMPORTANCE_PLOT = "feature_importance.png"


@dataclass
class MethodRow:
    method: str
    subset: list
    score: float
    redundancy: float
    wall_time: float = 0.0

    @property
    def size(self):
        return len(self.subset)

    def to_dict(self, include_timing=True):
        row = {
            "method": self.method,
            "subset": [int(i) for i in self.subset],
            "size": self.size,
            "score": float(self.score),
            "redundancy": float(self.redundancy),
        }
        if include_timing:
            row["wall_time"] = float(self.wall_time)
        return row


@dataclass
class BenchmarkReport:
    dataset: str
    task: str
    rows: list
    config: dict
    fingerprint: dict = field(default_factory=dict)
    feature_importances: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self, include_timing=False):
        return core.sanitize_for_json({
            "dataset": self.dataset,
            "task": self.task,
            "rows": [r.to_dict(include_timing) for r in self.rows],
            "config": self.config,
            "fingerprint": self.fingerprint,
            "feature_importances": self.feature_importances,
            "history": self.history,
            "trajectories": [[list(point) for point in t] for t in self.trajectories],
            "extras": self.extras,
        })

    @classmethod
    def from_dict(cls, payload, timing=None):
        timing = timing or {}
        rows = [
            MethodRow(
                method=r["method"],
                subset=list(r["subset"]),
                score=r["score"],
                redundancy=r["redundancy"],
                wall_time=r.get("wall_time", timing.get(r["method"], 0.0)),
            )
            for r in payload["rows"]
        ]
        return cls(
            dataset=payload["dataset"],
            task=payload["task"],
            rows=rows,
            config=payload["config"],
            fingerprint=payload.get("fingerprint", {}),
            feature_importances=payload.get("feature_importances", {}),
            history=payload.get("history", []),
            trajectories=[[tuple(point) for point in t] for t in payload.get("trajectories", [])],
            extras=payload.get("extras", {}),
        )


def environment_fingerprint():
    """Library versions and platform; no timestamps or host names."""
    import sklearn
    import torch

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "scikit-learn": sklearn.__version__,
        "machine": platform.machine(),
    }


def format_table(report):
    """Aligned plain-text table; redundancy is shown relative to the full set (= 100)."""
    header = ("Method", "Size", "Score(B)", "Redundancy", "Time(s)")
    lines = [
        (
            row.method,
            str(row.size),
            f"{row.score:.4f}",
            f"{row.redundancy * 100:.1f}",
            f"{row.wall_time:.1f}",
        )
        for row in report.rows
    ]
    widths = [max(len(h), *(len(line[i]) for line in lines)) for i, h in enumerate(header)]
    def render(cells):
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join([first] + rest)
    out = [f"Dataset: {report.dataset} ({report.task})", render(header)]
    out.append("  ".join("-" * w for w in widths))
    out.extend(render(line) for line in lines)
    return "\n".join(out) + "\n"


def plot_loss_curves(history, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [h["epoch"] for h in history]
    for key in ("total", "performance", "reconstruction", "kl", "redundancy"):
        ax.plot(epochs, [h[key] for h in history], label=key)
    stage_change = next((h["epoch"] for h in history if h["stage"] == "finetune"), None)
    if stage_change is not None:
        ax.axvline(stage_change, color="grey", linestyle="--", linewidth=0.8)
    ax.set_yscale("symlog")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trajectories(trajectories, path):
    fig, (ax_v, ax_u) = plt.subplots(1, 2, figsize=(9, 4))
    for trajectory in trajectories:
        steps = [p[0] for p in trajectory]
        ax_v.plot(steps, [p[1] for p in trajectory], alpha=0.6)
        ax_u.plot(steps, [p[2] for p in trajectory], alpha=0.6)
    ax_v.set_title("predicted performance")
    ax_u.set_title("predicted redundancy")
    for ax in (ax_v, ax_u):
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_importances(importances, path):
    names = list(importances)
    values = [importances[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(names) + 2), 4))
    ax.bar(range(len(names)), values)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("importance")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(report, output_dir, formats=("json", "txt", "png")):
    """Writes the report files and returns their paths.

    report.json carries no timing fields, so identical runs produce identical
    bytes; wall times go to report_timing.json.
    """
    if not report.rows:
        raise ValueError("Refusing to emit a report with no method rows")
    os.makedirs(output_dir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(output_dir, REPORT_JSON)
        core.write_json(path, report.to_dict(include_timing=False))
        written.append(path)
        timing_path = os.path.join(output_dir, REPORT_TIMING)
        core.write_json(timing_path, {r.method: r.wall_time for r in report.rows})
        written.append(timing_path)
    if "txt" in formats:
        path = os.path.join(output_dir, REPORT_TABLE)
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_table(report))
        written.append(path)
    if "png" in formats:
        if report.history:
            path = os.path.join(output_dir, LOSS_PLOT)
            plot_loss_curves(report.history, path)
            written.append(path)
        if report.trajectories:
            path = os.path.join(output_dir, TRAJECTORY_PLOT)
            plot_trajectories(report.trajectories, path)
            written.append(path)
        if report.feature_importances:
            path = os.path.join(output_dir, IMPORTANCE_PLOT)
            plot_importances(report.feature_importances, path)
            written.append(path)
    core.log_message(f"Report written to {output_dir} ({len(written)} files)")
    return written


def load_report(output_dir):
    payload = core.read_json(os.path.join(output_dir, REPORT_JSON))
    timing_path = os.path.join(output_dir, REPORT_TIMING)
    timing = core.read_json(timing_path) if os.path.exists(timing_path) else {}
    return BenchmarkReport.from_dict(payload, timing)
