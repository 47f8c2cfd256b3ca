"""Figures rendered from the CSV/JSON tables a run directory already holds."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def accuracy_vs_timesteps(path, fixed_rows, sweep_rows=(), seenn2_rows=(), aet=None):
    """Accuracy against (average) timesteps: fixed-T line, SEENN points, AET marker."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    if fixed_rows:
        rows = sorted(fixed_rows, key=lambda r: r["avg_T"])
        ax.plot([r["avg_T"] for r in rows], [100 * r["accuracy"] for r in rows],
                "o-", color="0.3", label="fixed T")
    if sweep_rows:
        ax.plot([r["avg_t"] for r in sweep_rows], [100 * r["accuracy"] for r in sweep_rows],
                "s--", color="tab:blue", ms=4, label="confidence exit (alpha sweep)")
    if seenn2_rows:
        ax.plot([r["avg_T"] for r in seenn2_rows], [100 * r["accuracy"] for r in seenn2_rows],
                "*", color="tab:red", ms=11, label="learned exit")
    if aet is not None:
        ax.axvline(aet, color="tab:green", ls=":", label=f"AET = {aet:.3f}")
    ax.set_xlabel("average timesteps")
    ax.set_ylabel("accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def exit_composition(path, rows, candidates, label_key="alpha"):
    """Stacked bars: share of samples exiting at each candidate timestep."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    labels = [f"{r[label_key]:g}" if isinstance(r[label_key], float) else str(r[label_key])
              for r in rows]
    bottom = [0.0] * len(rows)
    cmap = plt.get_cmap("viridis", max(len(candidates), 2))
    for i, t in enumerate(candidates):
        totals = [sum(r[f"n_exit_t{c}"] for c in candidates) or 1 for r in rows]
        share = [100 * r[f"n_exit_t{t}"] / n for r, n in zip(rows, totals)]
        ax.bar(labels, share, bottom=bottom, color=cmap(i), label=f"t={t}")
        bottom = [b + s for b, s in zip(bottom, share)]
    ax.set_xlabel(label_key)
    ax.set_ylabel("samples (%)")
    ax.legend(fontsize=8, loc="upper left", bbox_to_anchor=(1.01, 1.0))
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def energy_comparison(path, rows):
    """Bar chart of estimated energy per evaluated configuration."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    names = [r["label"] for r in rows]
    ax.bar(names, [r["energy_j"] * 1e6 for r in rows], color="tab:orange")
    for i, r in enumerate(rows):
        ax.text(i, r["energy_j"] * 1e6, f"T={r['avg_T']:.2f}", ha="center", va="bottom", fontsize=7)
    ax.set_ylabel("energy (uJ, whole test set)")
    ax.tick_params(axis="x", labelrotation=30, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def training_curves(path, rows, T):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    epochs = [r["epoch"] for r in rows]
    for t in range(1, T + 1):
        key = f"acc_t{t}"
        if key in rows[0]:
            ax.plot(epochs, [100 * r[key] for r in rows], label=f"t={t}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
