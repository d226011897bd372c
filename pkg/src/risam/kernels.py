"""Robust kernels on whitened residual norms, and the graduation schedule.

Every kernel maps a whitened residual norm ``r >= 0`` to a cost ``rho(r)``
with ``rho(0) = 0`` and an IRLS weight ``w(r) = rho'(r) / r``.  Both
functions accept scalars or numpy arrays.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

DEFAULT_C = 3.0


class KernelKind(enum.IntEnum):
    QUADRATIC = 0
    HUBER = 1
    GEMAN_MCCLURE = 2
    MAX_MIXTURE = 3
    SIG = 4


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind = KernelKind.QUADRATIC
    c: float = DEFAULT_C
    mu: float = 1.0
    mm_outlier_sigma: float = 1e7
    mm_outlier_weight: float = 1e-7

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"kernel shape c must be positive, got {self.c}")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        object.__setattr__(self, "kind", KernelKind(self.kind))

    def with_mu(self, mu):
        return replace(self, mu=float(mu))


def quadratic():
    return KernelSpec(KernelKind.QUADRATIC)


def huber(c=DEFAULT_C):
    return KernelSpec(KernelKind.HUBER, c=c)


def geman_mcclure(c=DEFAULT_C):
    return KernelSpec(KernelKind.GEMAN_MCCLURE, c=c)


def max_mixture(c=DEFAULT_C, outlier_sigma=1e7, outlier_weight=1e-7):
    return KernelSpec(KernelKind.MAX_MIXTURE, c=c, mm_outlier_sigma=outlier_sigma,
                      mm_outlier_weight=outlier_weight)


def sig(c=DEFAULT_C, mu=0.0):
    return KernelSpec(KernelKind.SIG, c=c, mu=mu)


def _max_mixture_offset(sigma, weight, dim):
    """Outlier-minus-inlier NLL constant for the whitened two-component mixture."""
    return dim * math.log(sigma) - math.log(weight)


def sig_cost(r, c, mu):
    s = np.square(r)
    c2 = c * c
    return 0.5 * c2 * s / (c2 + np.power(s, mu))


def sig_weight(r, c, mu):
    sm = np.power(np.square(r), mu)
    c2 = c * c
    return c2 * (c2 + (1.0 - mu) * sm) / np.square(c2 + sm)


def evaluate(k: KernelSpec, r, dim=3):
    """Robust cost of whitened residual norm ``r``.

    ``dim`` is the residual dimension; only the Max-Mixture normalization
    depends on it.
    """
    r = np.abs(np.asarray(r, dtype=float))
    c = k.c
    if k.kind == KernelKind.QUADRATIC:
        out = 0.5 * r * r
    elif k.kind == KernelKind.HUBER:
        out = np.where(r <= c, 0.5 * r * r, c * r - 0.5 * c * c)
    elif k.kind == KernelKind.GEMAN_MCCLURE:
        out = sig_cost(r, c, 1.0)
    elif k.kind == KernelKind.SIG:
        out = sig_cost(r, c, k.mu)
    elif k.kind == KernelKind.MAX_MIXTURE:
        s = k.mm_outlier_sigma
        off = _max_mixture_offset(s, k.mm_outlier_weight, dim)
        out = np.minimum(0.5 * r * r, 0.5 * r * r / (s * s) + off)
    else:  # pragma: no cover
        raise ValueError(k.kind)
    return out if out.ndim else float(out)


def weight(k: KernelSpec, r, dim=3):
    """IRLS weight ``rho'(r) / r`` with the ``r -> 0`` limit taken analytically."""
    r = np.abs(np.asarray(r, dtype=float))
    c = k.c
    if k.kind == KernelKind.QUADRATIC:
        out = np.ones_like(r)
    elif k.kind == KernelKind.HUBER:
        out = np.where(r <= c, 1.0, c / np.maximum(r, c))
    elif k.kind == KernelKind.GEMAN_MCCLURE:
        out = sig_weight(r, c, 1.0)
    elif k.kind == KernelKind.SIG:
        out = sig_weight(r, c, k.mu)
    elif k.kind == KernelKind.MAX_MIXTURE:
        s = k.mm_outlier_sigma
        off = _max_mixture_offset(s, k.mm_outlier_weight, dim)
        inlier = 0.5 * r * r <= 0.5 * r * r / (s * s) + off
        out = np.where(inlier, 1.0, 1.0 / (s * s))
    else:  # pragma: no cover
        raise ValueError(k.kind)
    return out if out.ndim else float(out)


def update_mu(mu_i, mu_init):
    """One step of the control-parameter schedule."""
    return min(1.0, mu_i + 1.2 * (mu_i - mu_init + 0.1))


def is_converged(mu, mu_final):
    return mu >= mu_final


def mu_schedule(mu_init=0.0, mu_final=1.0):
    """All control-parameter values visited from ``mu_init`` to ``mu_final``."""
    out = [mu_init]
    mu = mu_init
    while not is_converged(mu, mu_final):
        mu = min(update_mu(mu, mu_init), mu_final)
        out.append(mu)
    return out
