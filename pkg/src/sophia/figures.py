"""Figure rendering for report and history files.

Every CLI report path renders a PNG next to its line-delimited output so
a run can be eyeballed without loading anything into a notebook.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from sophia.rewards import REJECTION_REASONS  # noqa: E402


def render_history_figure(history_rows: list[dict], out_path: str | Path) -> Path:
    """Plot reward curves and the learning-rate schedule from history rows."""
    out_path = Path(out_path)
    rounds = [row["round"] for row in history_rows]
    eval_rewards = [row["eval_mean_reward"] for row in history_rows]
    behavior = [
        (row["round"], row["behavior_mean_reward"])
        for row in history_rows
        if row["behavior_mean_reward"] is not None
    ]
    lrs = [row["lr"] for row in history_rows]

    fig, (ax_reward, ax_lr) = plt.subplots(1, 2, figsize=(10, 4))
    ax_reward.plot(rounds, eval_rewards, marker="o", markersize=3, label="exact eval reward")
    if behavior:
        ax_reward.plot(
            [r for r, _ in behavior],
            [v for _, v in behavior],
            alpha=0.6,
            label="behavior mean reward",
        )
    ax_reward.set_xlabel("round")
    ax_reward.set_ylabel("mean reward")
    ax_reward.set_ylim(-0.02, 1.02)
    ax_reward.legend()
    ax_reward.set_title("training progress")

    ax_lr.plot(rounds, lrs)
    ax_lr.set_xlabel("round")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_title("cosine schedule")

    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_selection_figure(report_rows: list[dict], out_path: str | Path) -> Path:
    """Plot the selection outcome histogram and selected lengths."""
    out_path = Path(out_path)
    summary = next((row for row in report_rows if row.get("kind") == "summary"), {})
    task_rows = [row for row in report_rows if row.get("kind") == "task"]

    labels = ["selected", *REJECTION_REASONS]
    counts = [summary.get(label, 0) for label in labels]
    lengths = [
        entry["length_tokens"]
        for row in task_rows
        for entry in row.get("selected", [])
    ]

    fig, (ax_counts, ax_lengths) = plt.subplots(1, 2, figsize=(10, 4))
    positions = range(len(labels))
    ax_counts.bar(positions, counts)
    ax_counts.set_xticks(list(positions))
    ax_counts.set_xticklabels(labels, rotation=20, ha="right")
    ax_counts.set_ylabel("trajectories")
    ax_counts.set_title("selection outcome")

    if lengths:
        ax_lengths.hist(lengths, bins=min(20, max(5, len(set(lengths)))))
    ax_lengths.set_xlabel("selected trajectory length (tokens)")
    ax_lengths.set_ylabel("count")
    ax_lengths.set_title("selected lengths")

    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
