"""Factor graph container, robust error and robust linearization.

The public per-factor functions (``whitened_residual``, ``linearize_factor``,
...) are straightforward and used by tests and tooling.  The solver goes
through :class:`FactorTable`, a columnar copy of the graph's factors that
evaluates residuals, Jacobians and robust costs for many factors at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import geometry as geo
from .kernels import KernelKind, KernelSpec, quadratic
from . import kernels


class MissingVariableError(KeyError):
    pass


class NoiseModel:
    """Gaussian noise model stored as an upper-triangular square-root information."""

    def __init__(self, sqrt_info, information=None):
        sqrt_info = np.array(sqrt_info, dtype=float)
        if sqrt_info.ndim != 2 or sqrt_info.shape[0] != sqrt_info.shape[1]:
            raise ValueError("sqrt information must be square")
        self.sqrt_info = sqrt_info
        self._information = None if information is None else np.array(information, dtype=float)

    @property
    def dim(self):
        return self.sqrt_info.shape[0]

    @property
    def information(self):
        if self._information is None:
            return self.sqrt_info.T @ self.sqrt_info
        return self._information

    @classmethod
    def from_information(cls, info):
        info = np.array(info, dtype=float)
        if not np.allclose(info, info.T, rtol=0, atol=1e-12 * max(1.0, np.abs(info).max())):
            raise ValueError("information matrix is not symmetric")
        try:
            L = np.linalg.cholesky(info)
        except np.linalg.LinAlgError as exc:
            raise ValueError("information matrix is not positive definite") from exc
        return cls(L.T, information=info)

    @classmethod
    def from_sigmas(cls, sigmas):
        sigmas = np.asarray(sigmas, dtype=float)
        if np.any(sigmas <= 0):
            raise ValueError("sigmas must be positive")
        return cls(np.diag(1.0 / sigmas))

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim))

    def __eq__(self, other):
        return isinstance(other, NoiseModel) and np.array_equal(self.information, other.information)

    def __repr__(self):
        return f"NoiseModel(dim={self.dim})"


@dataclass(eq=False)
class Factor:
    """Prior (one key) or between (two keys) measurement on poses."""

    keys: tuple
    measurement: geo.Pose
    noise: NoiseModel
    kernel: KernelSpec = field(default_factory=quadratic)
    mu_init_local: float = 0.0
    known_inlier: bool = False

    def __post_init__(self):
        self.keys = tuple(int(k) for k in self.keys)
        if len(self.keys) not in (1, 2):
            raise ValueError("factors connect one or two variables")
        if self.noise.dim != self.measurement.group.dim:
            raise ValueError("noise dimension does not match measurement group")
        if not 0.0 <= self.mu_init_local <= 1.0:
            raise ValueError("mu_init_local must lie in [0, 1]")
        if self.known_inlier and self.kernel.kind != KernelKind.QUADRATIC:
            raise ValueError("known inliers carry a quadratic kernel")

    @property
    def dim(self):
        return self.noise.dim

    @property
    def is_prior(self):
        return len(self.keys) == 1


def prior_factor(key, pose, noise, **kw):
    return Factor((key,), pose, noise, **kw)


def between_factor(a, b, measurement, noise, **kw):
    return Factor((a, b), measurement, noise, **kw)


def effective_kernel(f: Factor, mu):
    if f.kernel.kind == KernelKind.SIG:
        return f.kernel.with_mu(max(mu, f.mu_init_local))
    return f.kernel


def _pose(v, key):
    try:
        return v[key]
    except KeyError:
        raise MissingVariableError(key) from None


def _predicted(f, v):
    if f.is_prior:
        return _pose(v, f.keys[0])
    return geo.between(_pose(v, f.keys[0]), _pose(v, f.keys[1]))


def whitened_residual(f: Factor, v):
    e = geo.local(f.measurement, _predicted(f, v))
    return f.noise.sqrt_info @ e


def factor_error(f: Factor, v, mu):
    r = np.linalg.norm(whitened_residual(f, v))
    return kernels.evaluate(effective_kernel(f, mu), r, f.dim)


def chi2_percentile(f: Factor, v):
    r = whitened_residual(f, v)
    return float(chi2.cdf(r @ r, f.dim))


def chi2_classify(f: Factor, v, threshold=0.95):
    """True when the factor is an inlier at the given chi-square percentile."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return chi2_percentile(f, v) < threshold


@dataclass
class LinearFactor:
    """Whitened Gaussian factor ``0.5 * |A dx - b|^2`` over ``keys``."""

    keys: tuple
    A: np.ndarray
    b: np.ndarray


def linearize_factor(f: Factor, v, mu):
    """Robustly weighted linearization (IRLS: both sides scaled by sqrt(w))."""
    G = f.measurement.group
    z = f.measurement.to_array()
    if f.is_prior:
        a = G.identity()
        b = _pose(v, f.keys[0]).to_array()
    else:
        a = _pose(v, f.keys[0]).to_array()
        b = _pose(v, f.keys[1]).to_array()
    ab = G.between(a, b)
    e = G.log(G.between(z, ab))
    Jr = G.right_jacobian_inv(e)
    L = f.noise.sqrt_info
    r = L @ e
    w = kernels.weight(effective_kernel(f, mu), np.linalg.norm(r), f.dim)
    sw = np.sqrt(w)
    Jb = sw * (L @ Jr)
    if f.is_prior:
        A = Jb
    else:
        Ja = -sw * (L @ Jr @ G.adjoint(G.inverse(ab)))
        A = np.hstack([Ja, Jb])
    return LinearFactor(f.keys, A, -sw * r)


class FactorGraph:
    """Ordered factors over pose variables of a single group.

    Variables get dense integer slots in order of first appearance; the
    solver indexes its arrays by slot.
    """

    def __init__(self, group=None):
        self.group = group
        self.factors: list[Factor] = []
        self.keys: list[int] = []
        self.slot: dict[int, int] = {}
        self.table = None

    @property
    def variables(self):
        return set(self.keys)

    def __len__(self):
        return len(self.factors)

    def add_variable(self, key):
        key = int(key)
        s = self.slot.get(key)
        if s is None:
            s = len(self.keys)
            self.slot[key] = s
            self.keys.append(key)
        return s

    def add(self, f: Factor):
        G = f.measurement.group
        if self.group is None:
            self.group = G
        elif G is not self.group:
            raise TypeError(f"cannot mix {G.name} factors into a {self.group.name} graph")
        if self.table is None:
            self.table = FactorTable(self.group)
        slots = tuple(self.add_variable(k) for k in f.keys)
        self.factors.append(f)
        self.table.append(f, slots)
        return len(self.factors) - 1

    def extend(self, factors):
        return [self.add(f) for f in factors]

    def set_mu_init_local(self, index, value):
        value = float(min(1.0, max(0.0, value)))
        self.factors[index].mu_init_local = value
        self.table.mu_init_local[index] = value

    def values_to_array(self, values):
        arr = self.group.identity((len(self.keys),))
        for k, s in self.slot.items():
            arr[s] = _pose(values, k).to_array()
        return arr

    def array_to_values(self, arr):
        cls = geo.pose_type(self.group)
        return {k: cls.from_array(arr[s]) for k, s in self.slot.items()}


def robust_error(g: FactorGraph, v, mu):
    """Total robust cost; SIG factors use ``max(mu, mu_init_local)``."""
    return float(sum(factor_error(f, v, mu) for f in g.factors))


class FactorTable:
    """Columnar storage of factors for vectorized evaluation."""

    def __init__(self, group, capacity=64):
        self.group = group
        self.n = 0
        d = group.dim
        self._cap = 0
        self.ka = np.zeros(0, dtype=np.int64)
        self.kb = np.zeros(0, dtype=np.int64)
        self.meas = np.zeros((0, group.rep))
        self.sqrt_info = np.zeros((0, d, d))
        self.kind = np.zeros(0, dtype=np.int64)
        self.c = np.zeros(0)
        self.mm_sigma = np.zeros(0)
        self.mm_weight = np.zeros(0)
        self.mu_init_local = np.zeros(0)
        self.known_inlier = np.zeros(0, dtype=bool)
        self._grow(capacity)

    _fields = ("ka", "kb", "meas", "sqrt_info", "kind", "c", "mm_sigma", "mm_weight",
               "mu_init_local", "known_inlier")

    def _grow(self, cap):
        for name in self._fields:
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self.n] = old[: self.n]
            setattr(self, name, new)
        self._cap = cap

    def append(self, f: Factor, slots):
        if self.n == self._cap:
            self._grow(2 * self._cap)
        i = self.n
        if len(slots) == 1:
            self.ka[i], self.kb[i] = -1, slots[0]
        else:
            self.ka[i], self.kb[i] = slots
        self.meas[i] = f.measurement.to_array()
        self.sqrt_info[i] = f.noise.sqrt_info
        self.kind[i] = int(f.kernel.kind)
        self.c[i] = f.kernel.c
        self.mm_sigma[i] = f.kernel.mm_outlier_sigma
        self.mm_weight[i] = f.kernel.mm_outlier_weight
        self.mu_init_local[i] = f.mu_init_local
        self.known_inlier[i] = f.known_inlier
        self.n += 1

    def slots(self, i):
        return (int(self.kb[i]),) if self.ka[i] < 0 else (int(self.ka[i]), int(self.kb[i]))

    def effective_mu(self, idx, mu):
        """Per-factor control parameter; non-SIG factors report 1."""
        idx = np.asarray(idx, dtype=np.int64)
        return np.where(self.kind[idx] == KernelKind.SIG,
                        np.maximum(mu, self.mu_init_local[idx]), 1.0)

    def is_sig(self, idx):
        return self.kind[np.asarray(idx, dtype=np.int64)] == KernelKind.SIG

    def _endpoints(self, theta, idx):
        G = self.group
        ka = self.ka[idx]
        b = theta[self.kb[idx]]
        a = np.where((ka >= 0)[:, None], theta[np.maximum(ka, 0)], G.identity((len(idx),)))
        return a, b

    def raw_residuals(self, theta, idx):
        idx = np.asarray(idx, dtype=np.int64)
        G = self.group
        a, b = self._endpoints(theta, idx)
        ab = G.between(a, b)
        return G.log(G.between(self.meas[idx], ab)), ab

    def whitened(self, theta, idx):
        e, _ = self.raw_residuals(theta, idx)
        return np.einsum("nij,nj->ni", self.sqrt_info[np.asarray(idx, dtype=np.int64)], e)

    def kernel_cost_weight(self, idx, r, mu_eff):
        """Robust cost and IRLS weight for whitened norms ``r``."""
        idx = np.asarray(idx, dtype=np.int64)
        kind = self.kind[idx]
        c = self.c[idx]
        d = self.group.dim
        cost = 0.5 * r * r
        w = np.ones_like(r)
        m = kind == KernelKind.HUBER
        if m.any():
            cm, rm = c[m], r[m]
            inside = rm <= cm
            cost[m] = np.where(inside, 0.5 * rm * rm, cm * rm - 0.5 * cm * cm)
            w[m] = np.where(inside, 1.0, cm / np.maximum(rm, cm))
        m = (kind == KernelKind.GEMAN_MCCLURE) | (kind == KernelKind.SIG)
        if m.any():
            mu = np.where(kind[m] == KernelKind.SIG, mu_eff[m], 1.0)
            cost[m] = kernels.sig_cost(r[m], c[m], mu)
            w[m] = kernels.sig_weight(r[m], c[m], mu)
        m = kind == KernelKind.MAX_MIXTURE
        if m.any():
            s = self.mm_sigma[idx][m]
            off = d * np.log(s) - np.log(self.mm_weight[idx][m])
            rm = r[m]
            out = 0.5 * rm * rm / (s * s) + off
            inl = 0.5 * rm * rm <= out
            cost[m] = np.where(inl, 0.5 * rm * rm, out)
            w[m] = np.where(inl, 1.0, 1.0 / (s * s))
        return cost, w

    def costs(self, theta, idx, mu_eff):
        r = np.linalg.norm(self.whitened(theta, idx), axis=1)
        return self.kernel_cost_weight(idx, r, mu_eff)[0]

    def linearize(self, theta, idx, mu_eff):
        """Weighted Jacobian blocks and right-hand sides for factors ``idx``.

        Returns ``(Ja, Jb, rhs)``; ``Ja`` rows are meaningless for priors.
        """
        idx = np.asarray(idx, dtype=np.int64)
        G = self.group
        e, ab = self.raw_residuals(theta, idx)
        L = self.sqrt_info[idx]
        r = np.einsum("nij,nj->ni", L, e)
        rn = np.linalg.norm(r, axis=1)
        _, w = self.kernel_cost_weight(idx, rn, mu_eff)
        sw = np.sqrt(w)[:, None, None]
        LJ = L @ G.right_jacobian_inv(e)
        Jb = sw * LJ
        Ja = -sw * (LJ @ G.adjoint(G.inverse(ab)))
        return Ja, Jb, -sw[:, :, 0] * r
