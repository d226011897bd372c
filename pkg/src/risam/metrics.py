"""Incremental trajectory and classification metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo


@dataclass
class KeyframeSnapshot:
    k: int
    estimate: dict
    classifications: list = field(default_factory=list)
    truth: list = field(default_factory=list)
    update_time: float = 0.0


@dataclass
class TrialMetrics:
    iate: float = math.nan
    iprecision: float = math.nan
    irecall: float = math.nan
    times: list = field(default_factory=list)
    failed: bool = False
    error: str = ""
    nonfinite: int = 0
    convex_total: int = 0
    inner_iterations: int = 0

    @property
    def total_time(self):
        return float(np.sum(self.times)) if self.times else 0.0

    @property
    def max_time(self):
        return float(np.max(self.times)) if self.times else 0.0

    @property
    def median_time(self):
        return float(np.median(self.times)) if self.times else 0.0


def ate(x, x_pgt):
    """RMS translation error after anchoring both trajectories at their first pose."""
    if set(x) != set(x_pgt):
        raise KeyError("estimate and reference cover different keys")
    if not x:
        raise ValueError("empty trajectory")
    keys = sorted(x)
    k0 = keys[0]
    align = geo.compose(x_pgt[k0], geo.inverse(x[k0]))
    G = align.group
    A = align.to_array()
    est = np.stack([x[k].to_array() for k in keys])
    ref = np.stack([x_pgt[k].to_array() for k in keys])
    moved = G.compose(np.broadcast_to(A, est.shape), est)
    t = slice(0, 2) if G is geo.SE2 else slice(4, 7)
    err = moved[:, t] - ref[:, t]
    return float(math.sqrt(np.mean(np.sum(err * err, axis=1))))


def incremental_metric(snapshots, metric_fn=None, uniform=False):
    """Keyframe-weighted average with weights ``k / sum(k)``.

    ``snapshots`` holds objects with a ``k`` attribute (evaluated through
    ``metric_fn``) or plain ``(k, value)`` pairs when ``metric_fn`` is None.
    ``uniform=True`` weighs all keyframes equally instead.
    """
    snapshots = list(snapshots)
    if not snapshots:
        raise ValueError("no keyframes")
    if metric_fn is None:
        ks = np.array([float(k) for k, _ in snapshots])
        vals = np.array([float(v) for _, v in snapshots])
    else:
        ks = np.array([float(s.k) for s in snapshots])
        vals = np.array([float(metric_fn(s)) for s in snapshots])
    if uniform or ks.sum() == 0:
        w = np.full(len(ks), 1.0 / len(ks))
    else:
        w = ks / ks.sum()
    return float(w @ vals)


def precision_recall(classifications, truth_tags):
    """Precision and recall with inliers as the positive class.

    Both arguments are sequences of booleans, True meaning inlier.
    """
    c = np.asarray(classifications, dtype=bool)
    t = np.asarray(truth_tags, dtype=bool)
    if c.shape != t.shape:
        raise ValueError("classification and truth lengths differ")
    tp = int(np.sum(c & t))
    fp = int(np.sum(c & ~t))
    fn = int(np.sum(~c & t))
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def keyframe_indices(num_iterations, interval):
    """Every ``interval``-th iteration plus the final one (indices are 1-based counts)."""
    if interval < 1:
        raise ValueError("keyframe interval must be positive")
    last = num_iterations - 1
    ks = list(range(interval, last + 1, interval))
    if last > 0 and (not ks or ks[-1] != last):
        ks.append(last)
    return ks


def pseudo_ground_truth(d, keyframes, relin_threshold=0.1):
    """Non-robust incremental solution of the inlier-only graph at each keyframe."""
    from .harness import feed_dataset, build_factors
    from .optimizer import IncrementalSolver

    inl = [e for e in d.edges if not e.is_outlier]
    keys = set(d.poses)
    reach = {min(keys)}
    for e in sorted(inl, key=lambda e: e.iteration):
        if e.i in reach or e.j in reach:
            reach.update((e.i, e.j))
    if reach != keys:
        raise ValueError("inlier subgraph is disconnected")
    solver = IncrementalSolver(group=d.group, relin_threshold=relin_threshold)
    out = []
    want = set(keyframes)
    for k, factors, init in feed_dataset(d, build_factors(d, "quadratic"), inliers_only=True):
        solver.update(factors, init(solver))
        if k in want:
            out.append(solver.estimate())
    return out
