"""Figures from a run directory (``metrics.csv`` + ``trajectories/*.traj``)."""

from __future__ import annotations

import csv
import glob
import math
import os

import numpy as np

BOX_METRICS = (("iate", "iATE"), ("iprecision", "iPrecision"), ("irecall", "iRecall"),
               ("total_time", "total time [s]"))


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("iate", "iprecision", "irecall", "total_time", "max_iter_time",
                  "median_iter_time"):
            if k in r:
                r[k] = float(r[k]) if r[k] not in ("", None) else math.nan
        r["failed"] = r.get("failed", "0") not in ("0", "", "False")
    return rows


def read_trajectory(path):
    """Return ``{k: (keys, coords)}`` from a trajectory dump."""
    data = np.loadtxt(path, ndmin=2)
    out = {}
    if data.size == 0:
        return out
    for k in np.unique(data[:, 0]).astype(int):
        sel = data[data[:, 0] == k]
        out[int(k)] = (sel[:, 1].astype(int), sel[:, 2:])
    return out


def _xy(coords):
    # SE(2) rows are (x, y, theta); SE(3) rows are (qw, qx, qy, qz, tx, ty, tz)
    return (coords[:, 0], coords[:, 1]) if coords.shape[1] == 3 else (coords[:, 4], coords[:, 5])


def render(out_dir, fig_dir=None):
    """Write box plots per metric and one trajectory plot per dump; return the file list."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics_path = os.path.join(out_dir, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise OSError(f"{metrics_path} not found; run the benchmark first")
    fig_dir = fig_dir or os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    rows = [r for r in read_metrics(metrics_path) if not r["failed"]]
    written = []

    groups = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["method"]), []).append(r)
    for key, label in BOX_METRICS:
        names = sorted(groups)
        if not names:
            break
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names)), 4.0))
        vals = [[g[key] for g in groups[n] if not math.isnan(g[key])] for n in names]
        ax.boxplot(vals, showfliers=True)
        ax.set_xticks(range(1, len(names) + 1))
        ax.set_xticklabels([f"{m}\n{d}" if len(set(n[0] for n in names)) > 1 else m
                            for d, m in names], fontsize=7, rotation=20)
        ax.set_ylabel(label)
        if key == "iate" and all(v > 0 for vs in vals for v in vs) and any(vals):
            ax.set_yscale("log")
        fig.tight_layout()
        p = os.path.join(fig_dir, f"box_{key}.png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)

    for path in sorted(glob.glob(os.path.join(out_dir, "trajectories", "*.traj"))):
        traj = read_trajectory(path)
        if not traj:
            continue
        k = max(traj)
        keys, coords = traj[k]
        order = np.argsort(keys)
        x, y = _xy(coords[order])
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.plot(x, y, "-", lw=0.8)
        ax.plot(x[:1], y[:1], "go", ms=4)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_title(f"{os.path.basename(path)[:-5]} @ k={k}", fontsize=8)
        fig.tight_layout()
        p = os.path.join(fig_dir, os.path.basename(path)[:-5] + ".png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)
    return written
