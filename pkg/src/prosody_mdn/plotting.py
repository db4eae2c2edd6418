"""Figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (9, 3.6),
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "prosody-mdn",
}


def plot_sweep(result, path) -> None:
    """Per-epoch train / held-out log-likelihood, one line per component count."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, sharey=True)
        for ax, split in zip(axes, ("train", "heldout")):
            for e in result.entries:
                curve = e.train_curve if split == "train" else e.heldout_curve
                if curve:
                    ax.plot(range(1, len(curve) + 1), curve, label=f"M={e.n_components}")
            if split == "heldout":
                ax.axhline(result.truth_heldout, color="k", ls="--", lw=0.8, label="true density")
            ax.set_title("training set" if split == "train" else "held-out set")
            ax.set_xlabel("epoch")
        axes[0].set_ylabel("log-likelihood per phoneme")
        axes[1].legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
        plt.close(fig)


def plot_diversity(reports, path) -> None:
    with plt.rc_context(STYLE | {"figure.figsize": (4, 3.2)}):
        fig, ax = plt.subplots()
        labels = [r.label for r in reports]
        ax.bar(labels, [r.mean_distance for r in reports], yerr=[r.half_width for r in reports],
               capsize=4, color=["C0", "C1", "C2"][:len(reports)])
        ax.set_ylabel("mean pairwise distance")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
        plt.close(fig)
