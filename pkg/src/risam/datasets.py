"""Pose-graph datasets: g2o text I/O, outlier injection and synthetic trajectories.

g2o conventions used here
-------------------------
``VERTEX_SE2 id x y theta``
``EDGE_SE2 i j dx dy dtheta I11 I12 I13 I22 I23 I33``
``VERTEX_SE3:QUAT id x y z qx qy qz qw``
``EDGE_SE3:QUAT i j x y z qx qy qz qw`` followed by the 21 upper-triangular
information entries, row-major (translation block first).

Information entries are upper-triangular, row-major.  Numbers are written
with 17 significant digits so that a write/parse roundtrip is lossless.  An
edge known to be an outlier carries a trailing ``# outlier`` comment token
(``# inlier`` otherwise), which g2o readers ignore.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from . import geometry as geo
from .factors import NoiseModel


class G2OFormatError(ValueError):
    pass


@dataclass
class Edge:
    i: int
    j: int
    measurement: geo.Pose
    noise: NoiseModel
    is_outlier: bool = False

    @property
    def is_odometry(self):
        return abs(self.j - self.i) == 1

    @property
    def iteration(self):
        """Update iteration at which the edge becomes available."""
        return max(self.i, self.j)


@dataclass
class DatasetRecord:
    """Poses (initial estimate), edges, and optional ground truth."""

    group: type
    poses: dict
    edges: list
    ground_truth: dict | None = None
    name: str = ""

    @property
    def odometry(self):
        return [e for e in self.edges if e.is_odometry]

    @property
    def loop_closures(self):
        return [e for e in self.edges if not e.is_odometry]

    @property
    def num_poses(self):
        return len(self.poses)

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (self.group is other.group and self.poses == other.poses
                and len(self.edges) == len(other.edges)
                and all(_edge_eq(a, b) for a, b in zip(self.edges, other.edges)))


def _edge_eq(a: Edge, b: Edge):
    return (a.i, a.j, a.is_outlier) == (b.i, b.j, b.is_outlier) and \
        a.measurement == b.measurement and a.noise == b.noise


# ----------------------------------------------------------------------
# g2o


_UT = {3: np.triu_indices(3), 6: np.triu_indices(6)}


def _info_from_upper(vals, dim):
    info = np.zeros((dim, dim))
    iu = _UT[dim]
    info[iu] = vals
    info.T[iu] = vals
    return info


def _fmt(v):
    return "%.17g" % v


def parse_g2o(text, name=""):
    """Parse g2o text (SE2 or SE3:QUAT, not mixed)."""
    poses = {}
    edges = []
    group = None

    def need(kind, lineno):
        nonlocal group
        if group is None:
            group = kind
        elif group is not kind:
            raise G2OFormatError(f"line {lineno}: cannot mix SE2 and SE3 records")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line, _, comment = raw.partition("#")
        tok = line.split()
        if not tok:
            continue
        tag = tok[0]
        try:
            if tag == "VERTEX_SE2":
                need(geo.SE2, lineno)
                if len(tok) != 5:
                    raise G2OFormatError(f"line {lineno}: VERTEX_SE2 expects 4 values")
                poses[int(tok[1])] = geo.Pose2(*map(float, tok[2:5]))
            elif tag == "VERTEX_SE3:QUAT":
                need(geo.SE3, lineno)
                if len(tok) != 9:
                    raise G2OFormatError(f"line {lineno}: VERTEX_SE3:QUAT expects 8 values")
                v = list(map(float, tok[2:9]))
                poses[int(tok[1])] = geo.Pose3((v[6], v[3], v[4], v[5]), v[0:3])
            elif tag == "EDGE_SE2":
                need(geo.SE2, lineno)
                if len(tok) != 12:
                    raise G2OFormatError(f"line {lineno}: EDGE_SE2 expects 11 values")
                v = list(map(float, tok[3:12]))
                z = geo.Pose2(*v[:3])
                noise = _noise(v[3:], 3, lineno)
                edges.append(Edge(int(tok[1]), int(tok[2]), z, noise, _outlier_tag(comment)))
            elif tag == "EDGE_SE3:QUAT":
                need(geo.SE3, lineno)
                if len(tok) != 31:
                    raise G2OFormatError(f"line {lineno}: EDGE_SE3:QUAT expects 30 values")
                v = list(map(float, tok[3:31]))
                z = geo.Pose3((v[6], v[3], v[4], v[5]), v[0:3])
                noise = _noise(v[7:], 6, lineno)
                edges.append(Edge(int(tok[1]), int(tok[2]), z, noise, _outlier_tag(comment)))
            elif tag == "FIX":
                continue
            else:
                raise G2OFormatError(f"line {lineno}: unknown record {tag!r}")
        except G2OFormatError:
            raise
        except ValueError as exc:
            raise G2OFormatError(f"line {lineno}: {exc}") from None
    if group is None:
        raise G2OFormatError("no vertices or edges found")
    return DatasetRecord(group, poses, edges, name=name)


def _noise(vals, dim, lineno):
    try:
        return NoiseModel.from_information(_info_from_upper(vals, dim))
    except ValueError as exc:
        raise G2OFormatError(f"line {lineno}: {exc}") from None


def _outlier_tag(comment):
    return "outlier" in comment.split()


def write_g2o(d: DatasetRecord):
    out = []
    se2 = d.group is geo.SE2
    for k in sorted(d.poses):
        p = d.poses[k]
        if se2:
            out.append(" ".join(["VERTEX_SE2", str(k)] + [_fmt(v) for v in (p.x, p.y, p.theta)]))
        else:
            w, x, y, z = p.quaternion
            vals = list(p.translation) + [x, y, z, w]
            out.append(" ".join(["VERTEX_SE3:QUAT", str(k)] + [_fmt(v) for v in vals]))
    for e in d.edges:
        m = e.measurement
        info = e.noise.information
        upper = info[_UT[info.shape[0]]]
        if se2:
            vals = [m.x, m.y, m.theta]
            tag = "EDGE_SE2"
        else:
            w, x, y, z = m.quaternion
            vals = list(m.translation) + [x, y, z, w]
            tag = "EDGE_SE3:QUAT"
        fields = [tag, str(e.i), str(e.j)] + [_fmt(v) for v in vals] + [_fmt(v) for v in upper]
        fields += ["#", "outlier" if e.is_outlier else "inlier"]
        out.append(" ".join(fields))
    return "\n".join(out) + "\n"


def load_g2o(path):
    with open(path) as fh:
        return parse_g2o(fh.read(), name=str(path))


def save_g2o(d, path):
    with open(path, "w") as fh:
        fh.write(write_g2o(d))


# ----------------------------------------------------------------------
# outliers


def _chi2_pct(edge_meas, noise, a, b):
    e = geo.local(edge_meas, geo.between(a, b))
    r = noise.sqrt_info @ e
    return float(chi2.cdf(r @ r, len(r)))


def _outlier_noise(d: DatasetRecord):
    lc = [e for e in d.edges if not e.is_odometry and not e.is_outlier]
    src = lc[0] if lc else (d.edges[0] if d.edges else None)
    if src is None:
        raise ValueError("dataset has no edges to copy a noise model from")
    return src.noise


def inject_outliers(d: DatasetRecord, fraction, seed=0, max_tries=1000):
    """Add identity loop closures between random non-adjacent pose pairs.

    The number ``n`` of added edges makes ``n / (n + inlier closures)`` equal
    ``fraction`` after rounding.  Each edge is checked to be an actual outlier
    (chi-square percentile above 0.95 against ground truth, or the stored
    poses when no ground truth is attached).
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    inliers = sum(1 for e in d.edges if not e.is_odometry and not e.is_outlier)
    n = int(round(fraction * inliers / (1.0 - fraction)))
    if n == 0:
        return replace(d, edges=list(d.edges))
    ref = d.ground_truth if d.ground_truth is not None else d.poses
    keys = sorted(ref)
    if len(keys) < 3:
        raise ValueError("graph too small to inject non-adjacent outliers")
    noise = _outlier_noise(d)
    used = {frozenset((e.i, e.j)) for e in d.edges}
    free = len(keys) * (len(keys) - 1) // 2 - (len(keys) - 1) - len(used)
    if n > free:
        raise ValueError(f"cannot place {n} outliers: only {free} free pose pairs")
    rng = np.random.default_rng(seed)
    ident = geo.identity_like(ref[keys[0]])
    edges = list(d.edges)
    for _ in range(n):
        for _ in range(max_tries):
            i, j = sorted(int(k) for k in rng.choice(keys, size=2, replace=False))
            if abs(i - j) <= 1 or frozenset((i, j)) in used:
                continue
            if _chi2_pct(ident, noise, ref[i], ref[j]) > 0.95:
                break
        else:
            raise ValueError("could not sample an outlier pair failing the chi-square test")
        used.add(frozenset((i, j)))
        edges.append(Edge(i, j, ident, noise, True))
    edges.sort(key=lambda e: (e.iteration, e.is_outlier, min(e.i, e.j)))
    return replace(d, edges=edges)


# ----------------------------------------------------------------------
# synthetic trajectories


_HEADINGS = (0.0, math.pi / 2, math.pi, -math.pi / 2)
_SIGMA_FLOOR = 1e-4


@dataclass
class GridWorldParams:
    num_poses: int = 200
    step: float = 1.0
    sigma_theta: float = 0.05          # degrees
    sigma_xy: float | None = None      # meters; default 0.01 * step
    outlier_probability: float = 0.1
    grid_size: int = 25
    seed: int = 0
    action_probs: tuple = (0.5, 0.25, 0.25)  # forward, left, right

    def __post_init__(self):
        if self.num_poses < 2:
            raise ValueError("num_poses must be at least 2")
        if self.sigma_theta < 0 or (self.sigma_xy is not None and self.sigma_xy < 0):
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.outlier_probability <= 1.0:
            raise ValueError("outlier_probability must lie in [0, 1]")
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")

    @property
    def sigma_xy_m(self):
        return 0.01 * self.step if self.sigma_xy is None else self.sigma_xy


def _odometry_noise(sig_xy, sig_th, dim):
    if dim == 3:
        s = [sig_xy, sig_xy, sig_th]
    else:
        s = [sig_xy] * 3 + [sig_th] * 3
    return NoiseModel.from_sigmas([max(v, _SIGMA_FLOOR) for v in s])


def _perturb2(rng, sig_xy, sig_th):
    return geo.Pose2(rng.normal(0, sig_xy) if sig_xy else 0.0,
                     rng.normal(0, sig_xy) if sig_xy else 0.0,
                     rng.normal(0, sig_th) if sig_th else 0.0)


def generate_gridworld(p: GridWorldParams):
    """Random walk on a unit grid with revisit closures and random outliers.

    Every step picks forward / turn-left / turn-right (turns happen in place,
    followed by one unit of forward motion) among the actions that keep the
    robot inside the grid.  Revisiting a cell adds an inlier closure to the
    most recent earlier visit; otherwise an identity outlier closure to a
    random non-adjacent earlier pose is added with ``outlier_probability``.
    """
    rng = np.random.default_rng(p.seed)
    sig_th = math.radians(p.sigma_theta)
    sig_xy = p.sigma_xy_m
    noise = _odometry_noise(sig_xy, sig_th, 3)
    n = p.grid_size
    cell = (n // 2, n // 2)
    h = 0
    gt = {0: geo.Pose2(cell[0] * p.step, cell[1] * p.step, 0.0)}
    visits = {cell: 0}
    edges = []
    probs = np.asarray(p.action_probs, dtype=float)
    turns = (0, 1, -1)
    ident = geo.Pose2()
    for i in range(1, p.num_poses):
        ok = []
        for t in turns:
            hh = (h + t) % 4
            dx, dy = round(math.cos(_HEADINGS[hh])), round(math.sin(_HEADINGS[hh]))
            nx, ny = cell[0] + dx, cell[1] + dy
            ok.append(0 <= nx < n and 0 <= ny < n)
        w = probs * np.array(ok, dtype=float)
        if w.sum() == 0:  # dead end: turn around
            h = (h + 2) % 4
            t = 0
        else:
            t = turns[int(rng.choice(3, p=w / w.sum()))]
        h = (h + t) % 4
        cell = (cell[0] + round(math.cos(_HEADINGS[h])), cell[1] + round(math.sin(_HEADINGS[h])))
        gt[i] = geo.Pose2(cell[0] * p.step, cell[1] * p.step, _HEADINGS[h])
        z = geo.compose(geo.between(gt[i - 1], gt[i]), _perturb2(rng, sig_xy, sig_th))
        edges.append(Edge(i - 1, i, z, noise))
        j = visits.get(cell)
        if j is not None:
            z = geo.compose(geo.between(gt[j], gt[i]), _perturb2(rng, sig_xy, sig_th))
            edges.append(Edge(j, i, z, noise))
        elif i >= 3 and rng.random() < p.outlier_probability:
            for _ in range(100):
                j = int(rng.integers(0, i - 1))
                if _chi2_pct(ident, noise, gt[j], gt[i]) > 0.95:
                    edges.append(Edge(j, i, ident, noise, True))
                    break
        visits[cell] = i
    poses = _dead_reckon(gt[0], edges, p.num_poses)
    return DatasetRecord(geo.SE2, poses, edges, ground_truth=gt,
                         name=f"gridworld-{p.num_poses}-s{p.seed}")


def _dead_reckon(start, edges, n):
    poses = {0: start}
    odo = {e.j: e for e in edges if e.j == e.i + 1}
    for i in range(1, n):
        poses[i] = geo.compose(poses[i - 1], odo[i].measurement)
    return poses


@dataclass
class SphereParams:
    rings: int = 10
    poses_per_ring: int = 30
    radius: float = 10.0
    sigma_xyz: float = 0.05
    sigma_rot: float = 0.01  # radians
    seed: int = 0


def _perturb3(rng, sig_t, sig_r):
    d = np.concatenate([rng.normal(0, sig_t, 3) if sig_t else np.zeros(3),
                        rng.normal(0, sig_r, 3) if sig_r else np.zeros(3)])
    return geo.Pose3.from_array(geo.SE3.exp(d))


def generate_sphere(p: SphereParams):
    """Stacked rings on a sphere; each pose closes a loop to the ring below.

    The trajectory walks each ring of constant latitude then climbs to the
    next ring.  Poses face along the direction of travel.  Odometry and
    closures carry Gaussian noise; all closures are inliers.
    """
    rng = np.random.default_rng(p.seed)
    gt = {}
    k = 0
    for r in range(p.rings):
        lat = -0.8 * math.pi / 2 + 0.8 * math.pi * r / max(p.rings - 1, 1)
        for m in range(p.poses_per_ring):
            lon = 2 * math.pi * m / p.poses_per_ring
            pos = p.radius * np.array([math.cos(lat) * math.cos(lon),
                                       math.cos(lat) * math.sin(lon), math.sin(lat)])
            fwd = np.array([-math.sin(lon), math.cos(lon), 0.0])
            up = pos / np.linalg.norm(pos)
            left = np.cross(up, fwd)
            Rm = np.column_stack([fwd, left, up])
            gt[k] = geo.Pose3(Rm, pos)
            k += 1
    noise = _odometry_noise(p.sigma_xyz, p.sigma_rot, 6)
    edges = []
    n = p.poses_per_ring
    for i in range(1, k):
        z = geo.compose(geo.between(gt[i - 1], gt[i]), _perturb3(rng, p.sigma_xyz, p.sigma_rot))
        edges.append(Edge(i - 1, i, z, noise))
        if i >= n:
            j = i - n
            z = geo.compose(geo.between(gt[j], gt[i]), _perturb3(rng, p.sigma_xyz, p.sigma_rot))
            edges.append(Edge(j, i, z, noise))
    poses = _dead_reckon(gt[0], edges, k)
    return DatasetRecord(geo.SE3, poses, edges, ground_truth=gt,
                         name=f"sphere-{p.rings}x{p.poses_per_ring}-s{p.seed}")


def group_edges_by_iteration(d: DatasetRecord):
    """``{iteration: [edges]}`` with the odometry edge first in every batch."""
    out = {}
    for e in d.edges:
        out.setdefault(e.iteration, []).append(e)
    for k, v in out.items():
        v.sort(key=lambda e: (not e.is_odometry, e.is_outlier))
    return dict(sorted(out.items()))
