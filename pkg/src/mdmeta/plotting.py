"""SVG figures: xy phase plots and per-state time histories.

Output is deterministic: the SVG id salt is fixed and date metadata dropped,
so identical data produce byte-identical files.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STATE_LABELS = ("x [m]", "y [m]", "phi [rad]")
_SVG_META = {"Date": None, "Creator": None}


def _style():
    matplotlib.rcParams["svg.hashsalt"] = "mdmeta"
    matplotlib.rcParams["svg.fonttype"] = "path"
    matplotlib.rcParams["font.size"] = 9


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def phase_plot(trajectories: dict, path, title: str = ""):
    """x-y plane: the (shared) reference dashed, each labelled run solid."""
    _style()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    first = next(iter(trajectories.values()))
    ax.plot(first.q_r[:, 0], first.q_r[:, 1], "k--", lw=1.2, label="reference")
    for label, tr in trajectories.items():
        ax.plot(tr.q[:, 0], tr.q[:, 1], lw=1.0, label=label)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def state_history(tr, path, title: str = ""):
    """One panel per configuration coordinate: actual against reference over time."""
    _style()
    fig, axes = plt.subplots(3, 1, figsize=(6, 6), sharex=True)
    for i, ax in enumerate(axes):
        ax.plot(tr.t, tr.q_r[:, i], "k--", lw=1.0, label="reference")
        ax.plot(tr.t, tr.q[:, i], lw=1.0, label="actual")
        ax.set_ylabel(STATE_LABELS[i])
    axes[0].legend(loc="upper right", fontsize=7)
    axes[-1].set_xlabel("t [s]")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    _save(fig, path)


def loss_history(steps, losses, path, title: str = ""):
    _style()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(steps, losses, lw=1.0)
    ax.set_xlabel("meta step")
    ax.set_ylabel("meta loss")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
