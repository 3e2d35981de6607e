"""Figures rendered next to the CSV/JSON outputs when ``--plot`` is given."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import relative_error_series  # noqa: E402


def _shade_attacks(ax, times, mode):
    if not np.any(mode):
        return
    edges = np.diff(np.concatenate([[0], mode.astype(int), [0]]))
    starts, stops = np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]
    for a, b in zip(starts, stops):
        ax.axvspan(times[a], times[min(b, len(times) - 1)], color="tab:red", alpha=0.12, lw=0)


def plot_trace(trace, path, title: str = "") -> None:
    """Own actions of every player and the relative error, attack mode shaded."""
    N = len(trace.action_dims)
    n = sum(trace.action_dims)
    X = trace.states.reshape(len(trace.times), N, n)
    off = np.concatenate([[0], np.cumsum(trace.action_dims)])

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=True)
    for i in range(N):
        for k in range(trace.action_dims[i]):
            ax1.plot(trace.times, X[:, i, off[i] + k], lw=1.2, label=f"$x_{{{i + 1}}}$")
            if trace.x_star is not None:
                ax1.axhline(trace.x_star[off[i] + k], color="0.6", lw=0.6, ls="--")
    _shade_attacks(ax1, trace.times, trace.mode)
    ax1.set_ylabel("own action")
    if N <= 10:
        ax1.legend(ncol=min(N, 5), fontsize=8, frameon=False)

    if trace.x_star is not None:
        rel, is_rel = relative_error_series(trace, trace.x_star)
        ax2.semilogy(trace.times, np.maximum(rel, 1e-16), color="k", lw=1.2)
        ax2.set_ylabel("relative error" if is_rel else "absolute error")
    else:
        ax2.semilogy(trace.times, np.maximum(trace.consensus_gap, 1e-16), color="k", lw=1.2)
        ax2.set_ylabel("consensus gap")
    _shade_attacks(ax2, trace.times, trace.mode)
    ax2.set_xlabel("time [s]")
    if title:
        ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_sweep(rows, axis: str, path) -> None:
    """Fitted rate and final error against the swept value."""
    labels = [str(r["value"]) for r in rows]
    x = np.arange(len(rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ax1.bar(x, [r["eta_hat"] if r["eta_hat"] is not None else np.nan for r in rows], color="tab:blue")
    ax1.set_ylabel(r"fitted rate $\hat\eta$")
    ax2.bar(x, [max(r["final_relative_error"], 1e-16) for r in rows], color="tab:gray")
    ax2.set_yscale("log")
    ax2.set_ylabel("final relative error")
    for ax in (ax1, ax2):
        ax.set_xticks(x, labels)
        ax.set_xlabel(axis)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
