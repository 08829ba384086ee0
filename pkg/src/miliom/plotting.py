"""PNG report figures rendered off-screen."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_axis_errors(path, t: np.ndarray, errors: np.ndarray, rmse: float | None = None):
    """Per-axis position error against time."""
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8, 6))
    for ax, series, name in zip(axes, np.asarray(errors).T, "xyz"):
        ax.plot(t, series, lw=0.8)
        ax.axhline(0.0, color="0.6", lw=0.5)
        ax.set_ylabel(f"e{name} [m]")
    axes[-1].set_xlabel("t [s]")
    if rmse is not None:
        axes[0].set_title(f"ATE RMSE {rmse:.4f} m")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_timing(path, t: np.ndarray, extraction: np.ndarray, frontend: np.ndarray, backend: np.ndarray,
                loop: np.ndarray):
    """Per-frame processing times in milliseconds with their means."""
    fig, ax = plt.subplots(figsize=(8, 4))
    for series, label in ((extraction, "extraction"), (frontend, "frontend"), (backend, "backend"), (loop, "loop")):
        series = np.asarray(series) * 1e3
        ok = np.isfinite(series)
        mean = float(np.mean(series[ok])) if np.any(ok) else float("nan")
        ax.plot(np.asarray(t)[ok], series[ok], lw=0.8, label=f"{label} (mean {mean:.1f} ms)")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("time [ms]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_trajectories(path, p_est: np.ndarray, p_gt: np.ndarray | None = None):
    """Top view of the estimated and reference paths."""
    fig, ax = plt.subplots(figsize=(6, 6))
    if p_gt is not None:
        ax.plot(p_gt[:, 0], p_gt[:, 1], color="0.5", lw=1.5, label="reference")
    ax.plot(p_est[:, 0], p_est[:, 1], lw=0.8, label="estimate")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
