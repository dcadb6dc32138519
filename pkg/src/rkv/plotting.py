"""Figures written next to the CSV tables of the CLI reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def plot_head_counts(labels, counts, path, max_heads=None):
    """One heat strip per report: darker means more heads keep the token."""
    counts = np.atleast_2d(np.asarray(counts))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(10, 0.6 + 0.5 * len(labels)))
        vmax = max_heads or max(int(counts.max()), 1)
        im = ax.imshow(counts, aspect="auto", cmap="Reds", vmin=0, vmax=vmax,
                       interpolation="nearest")
        ax.set_yticks(range(len(labels)))
        ax.set_yticklabels(labels)
        ax.set_xlabel("token position")
        fig.colorbar(im, ax=ax, label="heads selecting")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_sweep(rows, path):
    lams = np.array([r["lambda"] for r in rows])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for key, label in (("spike_retained", "planted spikes retained"),
                           ("duplicates_evicted", "old duplicates evicted"),
                           ("overlap_attention_only", "overlap with attention-only")):
            ax.plot(lams, [r[key] for r in rows], marker="o", label=label)
        ax.set_xscale("symlog", linthresh=0.01)
        ax.set_xlabel("lambda")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_occupancy(report, path):
    steps = [r.step for r in report.per_step]
    occ = [r.retained_len[0] + r.buffer_len for r in report.per_step]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(steps, occ, lw=1)
        for ev in report.per_event:
            ax.axvline(ev.step, color="0.85", lw=0.5, zorder=0)
        ax.set_xlabel("decode step")
        ax.set_ylabel("cached tokens (layer 0)")
        ax.set_title(report.policy)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
