"""SE(2) and SE(3) pose arithmetic.

Two layers live here.  ``SE2`` and ``SE3`` are stateless namespaces of
vectorized operations on stacked array representations (leading batch
dimensions are allowed everywhere); the solver uses these directly.
``Pose2`` and ``Pose3`` are small immutable value types for the public API,
and the module-level ``compose``/``between``/``retract``/``local`` functions
dispatch on them.

Conventions
-----------
* SE(2) arrays are ``[x, y, theta]``, tangent vectors ``[vx, vy, omega]``.
* SE(3) arrays are ``[qw, qx, qy, qz, tx, ty, tz]``, tangent vectors
  ``[rho(3), phi(3)]`` (translation first, matching the g2o information
  ordering).
* ``retract(p, d) = p * Exp(d)`` and ``local(a, b) = Log(a^-1 * b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

_SMALL = 1e-1


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    if isinstance(theta, float):
        if -math.pi < theta <= math.pi:
            return theta
        out = math.remainder(theta, 2.0 * math.pi)
        return math.pi if out == -math.pi else out
    theta = np.asarray(theta, dtype=float)
    out = np.remainder(theta + np.pi, 2.0 * np.pi) - np.pi
    # remainder maps +pi to -pi; keep the closed upper end
    out = np.where(out == -np.pi, np.pi, out)
    # values already in range are returned untouched (exact roundtrips)
    return np.where((theta > -np.pi) & (theta <= np.pi), theta, out)


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


class SE2:
    dim = 3
    rep = 3
    name = "SE2"

    @staticmethod
    def identity(shape=()):
        return np.zeros(tuple(shape) + (3,))

    @staticmethod
    def compose(a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
        out = np.empty(np.broadcast_shapes(a.shape, b.shape))
        out[..., 0] = a[..., 0] + c * b[..., 0] - s * b[..., 1]
        out[..., 1] = a[..., 1] + s * b[..., 0] + c * b[..., 1]
        out[..., 2] = wrap_angle(a[..., 2] + b[..., 2])
        return out

    @staticmethod
    def inverse(a):
        a = np.asarray(a, dtype=float)
        c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
        out = np.empty_like(a)
        out[..., 0] = -(c * a[..., 0] + s * a[..., 1])
        out[..., 1] = -(-s * a[..., 0] + c * a[..., 1])
        out[..., 2] = wrap_angle(-a[..., 2])
        return out

    @staticmethod
    def between(a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
        dx = b[..., 0] - a[..., 0]
        dy = b[..., 1] - a[..., 1]
        out = np.empty(np.broadcast_shapes(a.shape, b.shape))
        out[..., 0] = c * dx + s * dy
        out[..., 1] = -s * dx + c * dy
        out[..., 2] = wrap_angle(b[..., 2] - a[..., 2])
        return out

    @staticmethod
    def _v_coeffs(w):
        """sin(w)/w and (1 - cos(w))/w with series near zero."""
        small = np.abs(w) < _SMALL
        ws = np.where(small, 1.0, w)
        w2 = w * w
        a = np.where(small, 1.0 - w2 / 6.0 + w2 * w2 / 120.0, np.sin(ws) / ws)
        b = np.where(small, w / 2.0 - w * w2 / 24.0 + w * w2 * w2 / 720.0,
                     (1.0 - np.cos(ws)) / ws)
        return a, b

    @staticmethod
    def _half_cot(w):
        """(w/2) * cot(w/2), finite on (-2pi, 2pi)."""
        small = np.abs(w) < _SMALL
        ws = np.where(small, 1.0, w)
        w2 = w * w
        return np.where(small, 1.0 - w2 / 12.0 - w2 * w2 / 720.0,
                        0.5 * ws * np.cos(0.5 * ws) / np.sin(0.5 * ws))

    @staticmethod
    def exp(v):
        v = np.asarray(v, dtype=float)
        w = v[..., 2]
        a, b = SE2._v_coeffs(w)
        out = np.empty_like(v)
        out[..., 0] = a * v[..., 0] - b * v[..., 1]
        out[..., 1] = b * v[..., 0] + a * v[..., 1]
        out[..., 2] = wrap_angle(w)
        return out

    @staticmethod
    def log(p):
        p = np.asarray(p, dtype=float)
        w = wrap_angle(p[..., 2])
        h = SE2._half_cot(w)
        out = np.empty_like(p)
        out[..., 0] = h * p[..., 0] + 0.5 * w * p[..., 1]
        out[..., 1] = -0.5 * w * p[..., 0] + h * p[..., 1]
        out[..., 2] = w
        return out

    @staticmethod
    def retract(p, d):
        return SE2.compose(p, SE2.exp(d))

    @staticmethod
    def local(a, b):
        return SE2.log(SE2.between(a, b))

    @staticmethod
    def adjoint(p):
        p = np.asarray(p, dtype=float)
        c, s = np.cos(p[..., 2]), np.sin(p[..., 2])
        out = np.zeros(p.shape[:-1] + (3, 3))
        out[..., 0, 0] = c
        out[..., 0, 1] = -s
        out[..., 1, 0] = s
        out[..., 1, 1] = c
        out[..., 0, 2] = p[..., 1]
        out[..., 1, 2] = -p[..., 0]
        out[..., 2, 2] = 1.0
        return out

    @staticmethod
    def right_jacobian_inv(v):
        """Inverse of the right Jacobian of Exp at tangent ``v``."""
        v = np.asarray(v, dtype=float)
        r1, r2, w = v[..., 0], v[..., 1], v[..., 2]
        small = np.abs(w) < _SMALL
        ws = np.where(small, 1.0, w)
        w2 = w * w
        # third column of the right Jacobian
        g1 = np.where(small, w / 6.0 - w * w2 / 120.0, (ws - np.sin(ws)) / (ws * ws))
        g2 = np.where(small, 0.5 - w2 / 24.0 + w2 * w2 / 720.0,
                      (1.0 - np.cos(ws)) / (ws * ws))
        b1 = r1 * g1 - r2 * g2
        b2 = r1 * g2 + r2 * g1
        h = SE2._half_cot(w)
        out = np.zeros(v.shape[:-1] + (3, 3))
        out[..., 0, 0] = h
        out[..., 0, 1] = -0.5 * w
        out[..., 1, 0] = 0.5 * w
        out[..., 1, 1] = h
        out[..., 0, 2] = -(h * b1 - 0.5 * w * b2)
        out[..., 1, 2] = -(0.5 * w * b1 + h * b2)
        out[..., 2, 2] = 1.0
        return out


def quat_multiply(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (w >= 0)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
             (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
             (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
             (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def _so3_coeffs(th):
    """(1-cos)/th^2, (th-sin)/th^3 and the inverse-Jacobian coefficient."""
    small = th < _SMALL
    ts = np.where(small, 1.0, th)
    t2 = th * th
    a = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(ts)) / (ts * ts))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                 (ts - np.sin(ts)) / (ts ** 3))
    # 1/th^2 - cot(th/2) / (2 th); finite up to th = pi
    c = np.where(small, 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
                 1.0 / (ts * ts) - np.cos(0.5 * ts) / (2.0 * ts * np.sin(0.5 * ts)))
    return a, b, c


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)
    a, b, _ = _so3_coeffs(th)
    K = skew(phi)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)
    _, _, c = _so3_coeffs(th)
    K = skew(phi)
    return np.eye(3) - 0.5 * K + c[..., None, None] * (K @ K)


def _se3_q(rho, phi):
    """Coupling block of the SE(3) left Jacobian."""
    th = np.linalg.norm(phi, axis=-1)
    small = th < _SMALL
    ts = np.where(small, 1.0, th)
    t2 = th * th
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                  (ts - np.sin(ts)) / ts ** 3)
    c2 = np.where(small, 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
                  (0.5 * ts * ts + np.cos(ts) - 1.0) / ts ** 4)
    c3 = np.where(small, 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
                  (2.0 * ts - 3.0 * np.sin(ts) + ts * np.cos(ts)) / (2.0 * ts ** 5))
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    c1 = c1[..., None, None]
    c2 = c2[..., None, None]
    c3 = c3[..., None, None]
    return (0.5 * Rh + c1 * (PR + RP + PRP)
            + c2 * (PP @ Rh + RP @ P - 3.0 * PRP)
            + c3 * (PRP @ P + P @ PRP))


class SE3:
    dim = 6
    rep = 7
    name = "SE3"

    @staticmethod
    def identity(shape=()):
        out = np.zeros(tuple(shape) + (7,))
        out[..., 0] = 1.0
        return out

    @staticmethod
    def normalize(p):
        p = np.array(p, dtype=float)
        p[..., :4] /= np.linalg.norm(p[..., :4], axis=-1, keepdims=True)
        return p

    @staticmethod
    def rotation(p):
        return quat_to_matrix(np.asarray(p)[..., :4])

    @staticmethod
    def compose(a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        q = quat_multiply(a[..., :4], b[..., :4])
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        t = a[..., 4:] + np.einsum("...ij,...j->...i", quat_to_matrix(a[..., :4]), b[..., 4:])
        return np.concatenate([q, t], axis=-1)

    @staticmethod
    def inverse(a):
        a = np.asarray(a, dtype=float)
        q = a[..., :4] * np.array([1.0, -1.0, -1.0, -1.0])
        t = -np.einsum("...ji,...j->...i", quat_to_matrix(a[..., :4]), a[..., 4:])
        return np.concatenate([q, t], axis=-1)

    @staticmethod
    def between(a, b):
        return SE3.compose(SE3.inverse(a), b)

    @staticmethod
    def exp(v):
        v = np.asarray(v, dtype=float)
        rho, phi = v[..., :3], v[..., 3:]
        th = np.linalg.norm(phi, axis=-1)
        small = th < _SMALL
        ts = np.where(small, 1.0, th)
        t2 = th * th
        # sin(th/2)/th
        k = np.where(small, 0.5 - t2 / 48.0 + t2 * t2 / 3840.0, np.sin(0.5 * ts) / ts)
        q = np.concatenate([np.cos(0.5 * th)[..., None], k[..., None] * phi], axis=-1)
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
        return np.concatenate([q, t], axis=-1)

    @staticmethod
    def log_rotation(q):
        """Rotation vector of a unit quaternion, angle in [0, pi].

        At exactly pi the axis sign is chosen so that its first nonzero
        component is positive.
        """
        q = np.array(q, dtype=float)
        flip = q[..., 0] < 0
        q[flip] = -q[flip]
        w = q[..., 0]
        v = q[..., 1:]
        n = np.linalg.norm(v, axis=-1)
        th = 2.0 * np.arctan2(n, w)
        small = n < 1e-10
        ns = np.where(small, 1.0, n)
        ws = np.where(small, w, 1.0)
        # 2/w * (1 - n^2/(3 w^2)) is the series of th/n for small n
        fac = np.where(small, 2.0 / ws * (1.0 - n * n / (3.0 * ws * ws)), th / ns)
        phi = fac[..., None] * v
        at_pi = w == 0.0
        if np.any(at_pi):
            idx = np.argwhere(at_pi)
            for ix in map(tuple, idx):
                axis = phi[ix]
                nz = np.flatnonzero(np.abs(axis) > 0)
                if nz.size and axis[nz[0]] < 0:
                    phi[ix] = -axis
        return phi

    @staticmethod
    def log(p):
        p = np.asarray(p, dtype=float)
        phi = SE3.log_rotation(p[..., :4])
        rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), p[..., 4:])
        return np.concatenate([rho, phi], axis=-1)

    @staticmethod
    def retract(p, d):
        return SE3.compose(p, SE3.exp(d))

    @staticmethod
    def local(a, b):
        return SE3.log(SE3.between(a, b))

    @staticmethod
    def adjoint(p):
        p = np.asarray(p, dtype=float)
        R = quat_to_matrix(p[..., :4])
        out = np.zeros(p.shape[:-1] + (6, 6))
        out[..., :3, :3] = R
        out[..., 3:, 3:] = R
        out[..., :3, 3:] = skew(p[..., 4:]) @ R
        return out

    @staticmethod
    def right_jacobian_inv(v):
        v = np.asarray(v, dtype=float)
        # J_r(xi) = J_l(-xi)
        rho, phi = -v[..., :3], -v[..., 3:]
        Jinv = so3_left_jacobian_inv(phi)
        Q = _se3_q(rho, phi)
        out = np.zeros(v.shape[:-1] + (6, 6))
        out[..., :3, :3] = Jinv
        out[..., 3:, 3:] = Jinv
        out[..., :3, 3:] = -Jinv @ Q @ Jinv
        return out


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    group = SE2

    def to_array(self):
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, a):
        return cls(a[0], a[1], a[2])

    @property
    def translation(self):
        return np.array([self.x, self.y])

    def __repr__(self):
        return f"Pose2({self.x:.6g}, {self.y:.6g}, {self.theta:.6g})"


@dataclass(frozen=True)
class Pose3:
    """SE(3) pose: unit quaternion ``(w, x, y, z)`` plus translation.

    A 3x3 rotation matrix is also accepted for ``quaternion``.
    """

    quaternion: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float)
        if q.shape == (3, 3):
            q = matrix_to_quat(q)
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > 1e-12:
            q = q / n
        object.__setattr__(self, "quaternion", tuple(float(v) for v in q))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    group = SE3

    @property
    def rotation_matrix(self):
        return quat_to_matrix(np.array(self.quaternion))

    def to_array(self):
        return np.array(self.quaternion + self.translation)

    @classmethod
    def from_array(cls, a):
        return cls(tuple(a[:4]), tuple(a[4:7]))

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.quaternion)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"Pose3(q=({q}), t=({t}))"


Pose = Union[Pose2, Pose3]


def pose_type(group):
    return Pose2 if group is SE2 else Pose3


def group_of(p):
    return p.group


def _check_same(a, b):
    if type(a) is not type(b):
        raise TypeError(f"group mismatch: {type(a).__name__} vs {type(b).__name__}")


def identity_like(p):
    return type(p).from_array(p.group.identity())


def compose(a, b):
    _check_same(a, b)
    return type(a).from_array(a.group.compose(a.to_array(), b.to_array()))


def inverse(a):
    return type(a).from_array(a.group.inverse(a.to_array()))


def between(a, b):
    _check_same(a, b)
    return type(a).from_array(a.group.between(a.to_array(), b.to_array()))


def retract(p, delta):
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (p.group.dim,):
        raise ValueError(f"tangent dimension {delta.shape} does not match {p.group.name}")
    return type(p).from_array(p.group.retract(p.to_array(), delta))


def local(a, b):
    _check_same(a, b)
    return a.group.local(a.to_array(), b.to_array())
