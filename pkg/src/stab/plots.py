"""Matplotlib (Agg) figures for a trajectory log."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .stabilize import TrajectoryLog  # noqa: E402

__all__ = ["trajectory_figures"]


def trajectory_figures(lg: TrajectoryLog, out_dir, r: float | None = None, R: float | None = None,
                       T: float | None = None) -> list[Path]:
    """Distance to target, phi / phi_kappa and shell index against time, one PNG each."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = lg.column("t")
    knots = np.array(lg.knots())
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(t, np.maximum(lg.column("w2_to_target"), 1e-16), lw=1.2, label="W2 to target")
    if r is not None:
        ax.axhline(r, color="tab:green", ls="--", lw=0.8, label="r")
    if R is not None:
        ax.axhline(R, color="tab:red", ls="--", lw=0.8, label="R")
    if T is not None and np.isfinite(T):
        ax.axvline(T, color="0.4", ls=":", lw=0.8, label="reach time")
    ax.set_xlabel("t")
    ax.set_ylabel("W2")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    paths.append(out / "w2.png")
    fig.savefig(paths[-1], dpi=110)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(t, np.maximum(lg.column("phi"), 1e-300), lw=1.0, label="phi")
    if knots.size:
        pk = lg.column("phi_kappa")[knots]
        ax.semilogy(t[knots], np.maximum(pk, 1e-300), ".", ms=2, label="phi_kappa (knots)")
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    fig.tight_layout()
    paths.append(out / "phi.png")
    fig.savefig(paths[-1], dpi=110)
    plt.close(fig)

    shell = lg.column("shell_index")
    if np.any(~np.isnan(shell)):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.step(t, shell, where="post", lw=1.2)
        ax.set_xlabel("t")
        ax.set_ylabel("shell index")
        fig.tight_layout()
        paths.append(out / "shells.png")
        fig.savefig(paths[-1], dpi=110)
        plt.close(fig)
    return paths
