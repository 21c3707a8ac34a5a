"""PNG figures for calibration reports (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import transfer_errors, truth_xi  # noqa: E402

_LABELS = ("roll [deg]", "pitch [deg]", "yaw [deg]", "height [cm]")


def plot_calibration(report, scenario, path):
    """Reported extrinsic per event against truth (if a scenario is given)."""
    fig, axes = plt.subplots(4, 1, figsize=(7, 8), sharex=True, layout="constrained")
    ev = report.events
    t = np.array([e.timestamp for e in ev])
    xi = np.array([e.xi for e in ev]).reshape(-1, 6)
    vals = [np.degrees(xi[:, 0]), np.degrees(xi[:, 1]), np.degrees(xi[:, 2]), 100 * xi[:, 5]]
    tt = None
    if scenario is not None and report.keyframes:
        tt = np.array([k.timestamp for k in report.keyframes])
        tr = np.array([truth_xi(scenario.truth, s) for s in tt])
        truth_vals = [np.degrees(tr[:, 0]), np.degrees(tr[:, 1]), np.degrees(tr[:, 2]), 100 * tr[:, 5]]
    for i, ax in enumerate(axes):
        if tt is not None:
            ax.plot(tt, truth_vals[i], color="0.5", lw=1, label="truth")
        ax.plot(t, vals[i], ".", ms=4, label="reported")
        ax.set_ylabel(_LABELS[i])
        for f in report.failures:
            ax.axvline(f.timestamp, color="tab:red", lw=0.8, ls="--")
    axes[0].legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("time [s]")
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_features(report, path):
    """Coarse and fine feature counts per keyframe."""
    fig, ax = plt.subplots(figsize=(7, 3), layout="constrained")
    kf = [k.keyframe for k in report.keyframes]
    ax.plot(kf, [k.coarse for k in report.keyframes], label="coarse")
    ax.plot(kf, [k.fine for k in report.keyframes], label="fine")
    bad = [k.keyframe for k in report.keyframes if k.failure]
    if bad:
        ax.plot(bad, np.zeros(len(bad)), "x", color="tab:red", label="flagged")
    ax.set_xlabel("keyframe")
    ax.set_ylabel("matches")
    ax.legend(fontsize=8)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_transfer_histogram(report, path, bins=20):
    fig, ax = plt.subplots(figsize=(5, 3), layout="constrained")
    ef = transfer_errors(report)
    if ef.size:
        ax.hist(ef, bins=bins, color="tab:blue")
    ax.set_xlabel("transfer error [px]")
    ax.set_ylabel("pairs")
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def render_report(report, scenario, out_dir, stem="report"):
    """Write all figures into ``out_dir`` and return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        plot_calibration(report, scenario, out / f"{stem}_extrinsic.png"),
        plot_features(report, out / f"{stem}_features.png"),
        plot_transfer_histogram(report, out / f"{stem}_transfer_error.png"),
    ]
