"""Independent reference computations used by the tests."""

import dataclasses

import numpy as np

from risam import geometry as geo, kernels
from risam.factors import NoiseModel, between_factor, linearize_factor, prior_factor


def dense_gn_step(tree):
    """Dense least-squares solve of the tree's stored linearization.

    Every factor is relinearized from scratch at the tree's linearization
    point with the control parameter it was last eliminated with.
    """
    g = tree.graph
    n, d = tree.n_vars, tree.dim
    vals = g.array_to_values(tree.theta[:n])
    rows, rhs = [], []
    for i, f in enumerate(g.factors[: tree.n_factors]):
        mu = tree.lin_mu[i]
        mu = 1.0 if np.isnan(mu) else float(mu)
        if f.kernel.kind == kernels.KernelKind.SIG:
            f = dataclasses.replace(f, mu_init_local=0.0)
        lf = linearize_factor(f, vals, mu)
        A = np.zeros((len(lf.b), n * d))
        for j, k in enumerate(f.keys):
            s = g.slot[k]
            A[:, s * d:(s + 1) * d] = lf.A[:, j * d:(j + 1) * d]
        rows.append(A)
        rhs.append(lf.b)
    return np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]


def random_se2_updates(rng, num_poses, loop_prob=0.3, outlier_prob=0.3):
    """Yield ``(new_factors, new_values)`` batches of a random SE(2) graph."""
    N = NoiseModel.from_sigmas([0.1, 0.1, 0.05])
    gt = [geo.Pose2()]
    yield [prior_factor(0, gt[0], N)], {0: gt[0]}
    for i in range(1, num_poses):
        p = geo.compose(gt[-1], geo.Pose2(1, 0, rng.normal(0, 0.3)))
        gt.append(p)
        z = geo.compose(geo.between(gt[i - 1], gt[i]), geo.Pose2(*rng.normal(0, 0.05, 3)))
        fs = [between_factor(i - 1, i, z, N)]
        if i > 5 and rng.random() < loop_prob:
            j = int(rng.integers(0, i - 2))
            if rng.random() < outlier_prob:
                m = geo.Pose2(*rng.normal(0, 3, 3))
            else:
                m = geo.between(gt[j], gt[i])
            fs.append(between_factor(j, i, m, N, kernel=kernels.sig(3.0, 0.0)))
        init = geo.compose(p, geo.Pose2(*rng.normal(0, 0.2, 3)))
        yield fs, {i: init}


def scalar_gnc_cost(x, data, c=1.0, mu=1.0):
    """Robust cost of the 1D location problem used for the graduation demo."""
    r2 = (np.asarray(x, dtype=float)[..., None] - np.asarray(data)) ** 2
    return np.sum(0.5 * c * c * r2 / (c * c + r2 ** mu), axis=-1)


def brute_force_minimum(data, c=1.0, mu=1.0, lo=-20.0, hi=30.0, step=1e-4):
    """Grid scan at ``step`` followed by golden-section refinement."""
    xs = np.arange(lo, hi + step, step)
    costs = np.concatenate([scalar_gnc_cost(xs[i:i + 100000], data, c, mu)
                            for i in range(0, len(xs), 100000)])
    k = int(np.argmin(costs))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, len(xs) - 1)]
    gr = (np.sqrt(5) - 1) / 2
    for _ in range(100):
        x1, x2 = b - gr * (b - a), a + gr * (b - a)
        if scalar_gnc_cost(x1, data, c, mu) < scalar_gnc_cost(x2, data, c, mu):
            b = x2
        else:
            a = x1
    x = 0.5 * (a + b)
    return float(x), float(scalar_gnc_cost(x, data, c, mu))
