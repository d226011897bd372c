"""Benchmark harness: run methods over datasets and seeds, compute metrics.

A trial feeds the dataset one iteration at a time: iteration ``i`` adds pose
``i`` with its odometry edge plus every loop closure whose newer endpoint is
``i``.  Iteration 0 adds a tight prior on the first pose.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import chi2

from . import geometry as geo
from . import kernels
from .bayes_tree import BayesTree
from .datasets import (DatasetRecord, GridWorldParams, SphereParams, generate_gridworld,
                       generate_sphere, group_edges_by_iteration, inject_outliers, load_g2o)
from .factors import Factor, NoiseModel, between_factor, prior_factor
from .metrics import (KeyframeSnapshot, TrialMetrics, ate, incremental_metric, keyframe_indices,
                      precision_recall)
from .optimizer import IncrementalSolver, RiSAM, RiSAMConfig, UpdateInfo, efficient_gnc

log = logging.getLogger(__name__)

METHODS = ("risam", "batch_gnc", "gm", "huber", "maxmix", "quadratic")
PRIOR_SIGMA = 1e-3


# ----------------------------------------------------------------------
# factors and feeding


def _loop_kernel(method, c):
    if method in ("risam", "batch_gnc"):
        return kernels.sig(c, 0.0)
    if method == "gm":
        return kernels.geman_mcclure(c)
    if method == "huber":
        return kernels.huber(c)
    if method == "maxmix":
        return kernels.max_mixture(c)
    if method == "quadratic":
        return kernels.quadratic()
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def build_factors(d: DatasetRecord, method, c=kernels.DEFAULT_C):
    """One factor per edge (same order as ``d.edges``); odometry is a known inlier."""
    k = _loop_kernel(method, c)
    out = []
    for e in d.edges:
        if e.is_odometry:
            out.append(between_factor(e.i, e.j, e.measurement, e.noise, known_inlier=True))
        else:
            out.append(between_factor(e.i, e.j, e.measurement, e.noise, kernel=k))
    return out


def _prior(d: DatasetRecord):
    k0 = min(d.poses)
    noise = NoiseModel.from_sigmas([PRIOR_SIGMA] * d.group.dim)
    return prior_factor(k0, d.poses[k0], noise, known_inlier=True)


def feed_dataset(d: DatasetRecord, factors, inliers_only=False):
    """Yield ``(k, new_factors, init)`` per iteration.

    ``init(solver)`` returns initial estimates for the new pose, chained from
    the solver's current estimate of the previous pose through odometry.
    """
    index = {id(e): f for e, f in zip(d.edges, factors)}
    batches = group_edges_by_iteration(d)
    keys = sorted(d.poses)
    k0 = keys[0]
    yield k0, [_prior(d)], (lambda s, p=d.poses[k0]: {k0: p})
    for k in keys[1:]:
        edges = [e for e in batches.get(k, []) if not (inliers_only and e.is_outlier)]
        odo = next((e for e in edges if e.is_odometry and min(e.i, e.j) == k - 1), None)
        if odo is None:
            raise ValueError(f"pose {k} has no odometry edge from {k - 1}")
        yield k, [index[id(e)] for e in edges], _chain_init(k, odo)


def _chain_init(k, odo):
    def init(solver):
        prev = solver.pose(k - 1)
        z = odo.measurement if odo.j == k else geo.inverse(odo.measurement)
        return {k: geo.compose(prev, z)}
    return init


# ----------------------------------------------------------------------
# solvers behind a common interface


class _TreeRunner:
    def __init__(self, solver):
        self.solver = solver
        self.info = UpdateInfo()

    def pose(self, key):
        return self.solver.tree.estimate_of(key)

    def update(self, factors, x):
        self.info = self.solver.update(factors, x)

    def keyframe(self):
        pass

    def estimate(self):
        return self.solver.estimate()

    @property
    def nonfinite(self):
        return self.solver.nonfinite


class _RiSAMRunner(_TreeRunner):
    def keyframe(self):
        self.solver.adjust_initial_mu()


class _BatchRunner:
    """Batch efficient GNC re-solved at keyframes (or every iteration)."""

    def __init__(self, group, cfg, every_iteration=False):
        self.group = group
        self.cfg = cfg
        self.every = every_iteration
        self.factors = []
        self.values = {}
        self.info = UpdateInfo()
        self.nonfinite = 0
        self.solves = 0

    def pose(self, key):
        return self.values[key]

    def update(self, factors, x):
        self.factors.extend(factors)
        self.values.update(x)
        if self.every:
            self._solve()

    def keyframe(self):
        if not self.every:
            self._solve()

    def _solve(self):
        from .factors import FactorGraph
        g = FactorGraph(self.group)
        # fresh factor objects: the batch solve has no per-factor history
        for f in self.factors:
            g.add(Factor(f.keys, f.measurement, f.noise, f.kernel, 0.0, f.known_inlier))
        info = UpdateInfo()
        self.values = efficient_gnc(g, self.values, self.cfg, info=info)
        self.nonfinite += info.nonfinite
        self.info = info
        self.solves += 1

    def estimate(self):
        return dict(self.values)


def make_runner(method, group, cfg: RiSAMConfig, every_iteration=False):
    if method == "risam":
        return _RiSAMRunner(RiSAM(cfg, group=group))
    if method == "batch_gnc":
        return _BatchRunner(group, cfg, every_iteration)
    if method in METHODS:
        return _TreeRunner(IncrementalSolver(group=group, relin_threshold=cfg.relin_threshold))
    raise ValueError(f"unknown method {method!r}")


# ----------------------------------------------------------------------
# trials


@dataclass
class RunSpec:
    method: str = "risam"
    dataset: str | None = None
    gridworld: dict | None = None
    sphere: dict | None = None
    outlier_fraction: float | None = None
    seeds: list = field(default_factory=lambda: [0])
    keyframe_interval: int = 25
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        sources = sum(x is not None for x in (self.dataset, self.gridworld, self.sphere))
        if sources != 1:
            raise ValueError("exactly one of dataset, gridworld, sphere must be given")

    def solver_config(self):
        names = {f.name for f in fields(RiSAMConfig)}
        return RiSAMConfig(**{k: v for k, v in self.config.items() if k in names})

    @property
    def condition(self):
        if self.dataset is not None:
            src = os.path.basename(self.dataset)
        elif self.gridworld is not None:
            src = "gridworld(" + ",".join(f"{k}={v}" for k, v in sorted(self.gridworld.items())) + ")"
        else:
            src = "sphere(" + ",".join(f"{k}={v}" for k, v in sorted(self.sphere.items())) + ")"
        if self.outlier_fraction is not None:
            src += f"+outliers={self.outlier_fraction}"
        return src


def resolve_dataset(spec: RunSpec, seed):
    if spec.gridworld is not None:
        params = dict(spec.gridworld)
        if spec.outlier_fraction is not None:
            params["outlier_probability"] = spec.outlier_fraction
        return generate_gridworld(GridWorldParams(seed=seed, **params))
    if spec.sphere is not None:
        d = generate_sphere(SphereParams(seed=seed, **spec.sphere))
    else:
        d = load_g2o(spec.dataset)
    if spec.outlier_fraction:
        d = inject_outliers(d, spec.outlier_fraction, seed=seed)
    return d


@dataclass
class TrialRecord:
    method: str
    dataset: str
    seed: int
    metrics: TrialMetrics
    snapshots: list
    config: dict


def _classify(d: DatasetRecord, est, k):
    cls, truth = [], []
    for e in d.edges:
        if e.is_odometry or e.iteration > k:
            continue
        r = e.noise.sqrt_info @ geo.local(e.measurement, geo.between(est[e.i], est[e.j]))
        cls.append(bool(chi2.cdf(r @ r, len(r)) < 0.95))
        truth.append(not e.is_outlier)
    return cls, truth


def run_dataset(d: DatasetRecord, method, cfg: RiSAMConfig | None = None, keyframe_interval=25,
                every_iteration=False, pgt=None, uniform_weights=False):
    """Run one method over a dataset; return ``(TrialMetrics, snapshots)``.

    ``pgt`` may carry precomputed pseudo-ground-truth estimates (one per
    keyframe) so that several methods can share them.
    """
    cfg = cfg or RiSAMConfig()
    keys = sorted(d.poses)
    kfs = keyframe_indices(len(keys), keyframe_interval)
    want = set(kfs)
    m = TrialMetrics()
    snaps = []
    runner = make_runner(method, d.group, cfg, every_iteration)
    factors = build_factors(d, method, cfg.c)
    try:
        for k, new, init in feed_dataset(d, factors):
            x = init(runner)
            t0 = time.perf_counter()
            runner.update(new, x)
            if k in want:
                runner.keyframe()
            dt = time.perf_counter() - t0
            m.times.append(dt)
            m.inner_iterations += runner.info.iterations
            m.convex_total += runner.info.convex_vars
            if k in want:
                est = runner.estimate()
                if not all(np.all(np.isfinite(p.to_array())) for p in est.values()):
                    raise FloatingPointError(f"non-finite estimate at iteration {k}")
                cls, truth = _classify(d, est, k)
                snaps.append(KeyframeSnapshot(k, est, cls, truth, dt))
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        m.failed = True
        m.error = f"{type(exc).__name__}: {exc}"
        m.nonfinite = runner.nonfinite
        log.warning("trial failed: %s", m.error)
        return m, snaps
    m.nonfinite = runner.nonfinite
    if pgt is None:
        from .metrics import pseudo_ground_truth
        pgt = pseudo_ground_truth(d, kfs, relin_threshold=cfg.relin_threshold)
    m.iate = incremental_metric(
        [(s.k, ate(s.estimate, _restrict(ref, s.estimate))) for s, ref in zip(snaps, pgt)],
        uniform=uniform_weights)
    pr = [(s.k, precision_recall(s.classifications, s.truth)) for s in snaps]
    m.iprecision = incremental_metric([(k, v[0]) for k, v in pr], uniform=uniform_weights)
    m.irecall = incremental_metric([(k, v[1]) for k, v in pr], uniform=uniform_weights)
    return m, snaps


def _restrict(ref, est):
    return {k: ref[k] for k in est}


def run_trial(spec: RunSpec, seed) -> TrialRecord:
    cfg = spec.solver_config()
    d = resolve_dataset(spec, seed)
    m, snaps = run_dataset(d, spec.method, cfg, spec.keyframe_interval,
                           every_iteration=bool(spec.config.get("batch_every_iteration", False)),
                           uniform_weights=bool(spec.config.get("uniform_weights", False)))
    resolved = asdict(cfg)
    resolved.update(keyframe_interval=spec.keyframe_interval,
                    outlier_fraction=spec.outlier_fraction,
                    batch_every_iteration=bool(spec.config.get("batch_every_iteration", False)),
                    uniform_weights=bool(spec.config.get("uniform_weights", False)))
    return TrialRecord(spec.method, spec.condition, int(seed), m, snaps, resolved)


def _run_one(args):
    spec, seed = args
    return run_trial(spec, seed)


def worker_count(n_jobs):
    env = os.environ.get("RISAM_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_jobs))


def run_suite(specs, workers=None):
    """Run every (spec, seed) pair; returns the list of :class:`TrialRecord`."""
    specs = list(specs)
    if not specs:
        raise ValueError("no run specs")
    jobs = [(s, seed) for s in specs for seed in s.seeds]
    workers = worker_count(len(jobs)) if workers is None else workers
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, jobs))


# ----------------------------------------------------------------------
# tables


METRIC_FIELDS = ("method", "dataset", "seed", "iate", "iprecision", "irecall", "total_time",
                 "max_iter_time", "median_iter_time", "failed", "error", "nonfinite",
                 "convex_total", "config")


def record_row(r: TrialRecord):
    m = r.metrics
    return {
        "method": r.method, "dataset": r.dataset, "seed": r.seed,
        "iate": m.iate, "iprecision": m.iprecision, "irecall": m.irecall,
        "total_time": m.total_time, "max_iter_time": m.max_time,
        "median_iter_time": m.median_time, "failed": int(m.failed), "error": m.error,
        "nonfinite": m.nonfinite, "convex_total": m.convex_total,
        "config": ";".join(f"{k}={v}" for k, v in sorted(r.config.items())),
    }


def summarize(records):
    """Median and quartiles per (method, dataset), excluding failed trials."""
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.dataset), []).append(r)
    rows = []
    for (method, dataset), rs in groups.items():
        ok = [r for r in rs if not r.metrics.failed]
        row = {"method": method, "dataset": dataset, "trials": len(rs), "failed": len(rs) - len(ok)}
        for name in ("iate", "iprecision", "irecall", "total_time", "max_iter_time"):
            vals = [record_row(r)[name] for r in ok]
            if vals:
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
            else:
                q1 = med = q3 = math.nan
            row[f"{name}_q1"], row[f"{name}_median"], row[f"{name}_q3"] = q1, med, q3
        rows.append(row)
    return rows


def write_csv(path, rows, fieldnames=None):
    rows = list(rows)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def dump_trajectories(r: TrialRecord, path):
    """One pose per line: ``k key`` followed by the pose coordinates."""
    with open(path, "w") as fh:
        for s in r.snapshots:
            for key in sorted(s.estimate):
                p = s.estimate[key]
                vals = " ".join(f"{v:.10g}" for v in p.to_array())
                fh.write(f"{s.k} {key} {vals}\n")


def trajectory_filename(r: TrialRecord):
    safe = "".join(ch if ch.isalnum() or ch in "-_.=" else "_" for ch in r.dataset)
    return f"{r.method}__{safe}__s{r.seed}.traj"
