"""Figure and CSV emission for the analysis subcommand.

Every figure gets a sibling CSV with the raw numbers so results stay
inspectable without matplotlib.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_CMAP = plt.get_cmap("tab10")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def save_pca_scatter(coords: np.ndarray, labels: np.ndarray, label_name: str,
                     path: Path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.2))
    for i, value in enumerate(np.unique(labels)):
        mask = labels == value
        ax.scatter(coords[mask, 0], coords[mask, 1], s=9, alpha=0.7,
                   color=_CMAP(i % 10), label=f"{label_name} {value}")
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.set_title(title)
    ax.legend(fontsize=7, markerscale=1.5)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_cycle_trajectories(cycles: dict, path: Path) -> None:
    actions = cycles["actions"]
    n = max(len(actions), 1)
    fig, axes = plt.subplots(1, n, figsize=(3.0 * n, 3.0), squeeze=False)
    for ax, (action_id, entry) in zip(axes[0], sorted(actions.items())):
        for j, clip in enumerate(entry["clips"]):
            xy = np.asarray(clip["coordinates"])
            if xy.shape[1] < 2:
                xy = np.concatenate([xy, np.zeros_like(xy)], axis=1)
            ax.plot(xy[:, 0], xy[:, 1], "-o", ms=3, lw=1, color=_CMAP(j % 10))
        ax.set_title(f"action {action_id} ({entry['kind']})\n"
                     f"cycle score {entry['mean_cycle_score']:.2f}", fontsize=8)
        ax.tick_params(labelsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_reversibility_bars(rev: dict, path: Path) -> None:
    ids = sorted(rev.keys())
    seps = [rev[i]["separation"] for i in ids]
    colors = ["tab:green" if rev[i]["reversible"] else "tab:red" for i in ids]
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    ax.bar(range(len(ids)), seps, color=colors)
    ax.axhline(0.5, color="gray", lw=1, ls="--")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels([f"{i}\n{rev[i]['kind']}" for i in ids], fontsize=7)
    ax.set_ylabel("forward/backward separation")
    ax.set_ylim(0, 1.05)
    ax.set_title("red = non-reversible program, green = reversible", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def emit_analysis(out_dir: Path, pooled_coords: np.ndarray, labels: dict,
                  cycles: dict, reversibility: dict) -> list[str]:
    """Write all analysis figures + CSVs; returns the written file names."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    save_pca_scatter(pooled_coords, labels["action_id"], "action",
                     out_dir / "pca_actions.png", "pooled embeddings by action")
    save_pca_scatter(pooled_coords, labels["identity_id"], "identity",
                     out_dir / "pca_identities.png", "pooled embeddings by identity")
    written += ["pca_actions.png", "pca_identities.png"]

    rows = [[i, float(pooled_coords[i, 0]), float(pooled_coords[i, 1]),
             int(labels["action_id"][i]), int(labels["identity_id"][i]),
             int(labels["cam_id"][i])] for i in range(len(pooled_coords))]
    write_csv(out_dir / "pca_coords.csv",
              ["index", "pc1", "pc2", "action_id", "identity_id", "cam_id"], rows)
    written.append("pca_coords.csv")

    save_cycle_trajectories(cycles, out_dir / "cycles.png")
    cycle_rows = []
    for action_id, entry in sorted(cycles["actions"].items()):
        for clip in entry["clips"]:
            cycle_rows.append([action_id, entry["kind"], clip["clip_id"],
                               round(clip["cycle_score"], 6)])
    write_csv(out_dir / "cycle_scores.csv",
              ["action_id", "kind", "clip_id", "cycle_score"], cycle_rows)
    written += ["cycles.png", "cycle_scores.csv"]

    save_reversibility_bars(reversibility, out_dir / "reversibility.png")
    rev_rows = [[i, reversibility[i]["kind"], reversibility[i]["reversible"],
                 round(reversibility[i]["separation"], 6), reversibility[i]["n_pairs"]]
                for i in sorted(reversibility.keys())]
    write_csv(out_dir / "reversibility.csv",
              ["action_id", "kind", "reversible", "separation", "n_pairs"], rev_rows)
    written += ["reversibility.png", "reversibility.csv"]
    return written
