"""Quick-look PNGs written next to the reports.  Headless (Agg) only."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .flow import area_law  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_flow_series(series: dict, path):
    """``series`` maps a curve label to rows with t, length, left_area, max_kappa."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for label, rows in series.items():
        t = np.array([r["t"] for r in rows])
        axes[0].plot(t, [r["length"] for r in rows], label=label)
        a = np.array([r["left_area"] for r in rows])
        axes[1].plot(t, a, label=label)
        if abs(a[0] - 2 * np.pi) > 1e-6:
            axes[1].plot(t, area_law(a[0], t), "k:", lw=1)
        axes[2].semilogy(t, np.maximum([r["max_kappa"] for r in rows], 1e-16), label=label)
    axes[0].set_ylabel("length")
    axes[1].set_ylabel("left area")
    axes[2].set_ylabel("max |curvature|")
    for ax in axes:
        ax.set_xlabel("t")
    axes[0].legend(fontsize=7)
    return _save(fig, path)


def plot_retraction_summary(rows, path):
    tau = [r["tau"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    axes[0].plot(tau, [r["error_vs_round"] for r in rows], "o-", label="vs round")
    axes[0].plot(tau, [r["error_vs_input"] for r in rows], "s--", label="vs input")
    axes[0].set_xlabel("tau")
    axes[0].set_ylabel("sup relative error")
    axes[0].legend()
    axes[1].plot(tau, [r["mean_member_length"] / (2 * np.pi) for r in rows], "o-")
    axes[1].set_xlabel("tau")
    axes[1].set_ylabel("mean member length / 2 pi")
    return _save(fig, path)


def plot_periods(periods, tol, path):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    p = np.asarray([x for x in periods if x is not None and np.isfinite(x)]) - 2 * np.pi
    ax.hist(p, bins=20)
    for s in (-tol, tol):
        ax.axvline(s, color="k", ls=":")
    ax.set_xlabel("period - 2 pi")
    ax.set_ylabel("geodesics")
    return _save(fig, path)


def plot_indicatrices(metric, path, n_points: int = 24, n_dir: int = 128, scale: float = 0.08):
    """Unit circles of the metric at points along a meridian, in a longitude/colatitude chart."""
    th = np.linspace(0.15, np.pi - 0.15, n_points)
    x = np.stack([np.sin(th), np.zeros_like(th), np.cos(th)], 1)
    e_th = np.stack([np.cos(th), np.zeros_like(th), -np.sin(th)], 1)
    e_ph = np.tile([0.0, 1.0, 0.0], (n_points, 1))
    a = np.linspace(0, 2 * np.pi, n_dir)
    fig, ax = plt.subplots(figsize=(3.5, 8))
    for i in range(n_points):
        v = np.cos(a)[:, None] * e_th[i] + np.sin(a)[:, None] * e_ph[i]
        r = 1.0 / metric.norm(np.broadcast_to(x[i], v.shape), v)
        ax.plot(scale * r * np.sin(a), th[i] + scale * r * np.cos(a), lw=0.8)
    ax.set_aspect("equal")
    ax.set_xlabel("longitude offset")
    ax.set_ylabel("colatitude")
    ax.invert_yaxis()
    return _save(fig, path)
