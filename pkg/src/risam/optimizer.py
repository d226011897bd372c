"""Graduated optimizers: batch efficient GNC, riSAM and plain incremental baselines.

All solvers share the Bayes-tree back end: the batch solver simply re-eliminates
every variable at each iteration, so timing comparisons between batch and
incremental methods measure the algorithms rather than two different linear
algebra stacks.

Sign conventions: the tree stores ``R x = d`` such that the Gauss-Newton step
is ``R^-1 d`` and the linear model cost of a step ``x`` is ``0.5 |R x - d|^2``.
The steepest-descent direction at zero is therefore ``+R^T d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import kernels
from .bayes_tree import BayesTree, DisconnectedFactorError
from .factors import Factor, FactorGraph
from .kernels import KernelKind


class DivergenceError(FloatingPointError):
    """The optimizer produced a non-finite cost."""


@dataclass
class RiSAMConfig:
    mu_init: float = 0.0
    mu_final: float = 1.0
    c: float = kernels.DEFAULT_C
    alpha_min: float = 1.0
    alpha_max: float = 100.0
    alpha_growth: float = 1.5
    wolfe_c1: float = 1e-4
    strong_inlier_thresh: float = 0.25
    strong_outlier_thresh: float = 0.9
    relin_threshold: float = 0.1
    convergence_delta_norm: float = 1e-4
    max_polish_iters: int = 10
    adjust_mu: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mu_init < self.mu_final <= 1.0:
            raise ValueError("need 0 <= mu_init < mu_final <= 1")
        if not 0.0 < self.alpha_min <= self.alpha_max:
            raise ValueError("need 0 < alpha_min <= alpha_max")
        if not 0.0 < self.wolfe_c1 < 1.0:
            raise ValueError("wolfe_c1 must lie in (0, 1)")
        if not self.alpha_growth > 1.0:
            raise ValueError("alpha_growth must exceed 1")
        if not 0.0 < self.strong_inlier_thresh < self.strong_outlier_thresh < 1.0:
            raise ValueError("need 0 < strong_inlier_thresh < strong_outlier_thresh < 1")
        if self.max_polish_iters < 1:
            raise ValueError("max_polish_iters must be at least 1")


@dataclass
class StepResult:
    delta: np.ndarray
    cost: float
    accepted: bool
    alpha: float
    cost0: float = math.nan
    predicted: float = 0.0
    satisfied: bool = False
    evaluations: int = 0
    nonfinite: int = 0


# ----------------------------------------------------------------------
# dog-leg line search


def _dogleg_coeffs(n_gn, n_g, g_dot_gn, gg_sq, alpha):
    """Coefficients ``(a, b)`` with dog-leg point ``a * d_g + b * d_gn``."""
    if alpha >= n_gn:
        return 0.0, 1.0
    if alpha <= n_g:
        return (alpha / n_g if n_g > 0 else 0.0), 0.0
    # |d_g + t (d_gn - d_g)| = alpha on the second leg
    a2 = n_gn * n_gn - 2.0 * g_dot_gn + gg_sq
    b2 = 2.0 * (g_dot_gn - gg_sq)
    c2 = gg_sq - alpha * alpha
    disc = max(b2 * b2 - 4.0 * a2 * c2, 0.0)
    t = (-b2 + math.sqrt(disc)) / (2.0 * a2) if a2 > 0 else 1.0
    t = min(max(t, 0.0), 1.0)
    return 1.0 - t, t


def compute_dogleg_point(d_gn, d_g, alpha):
    """Point of norm ``min(alpha, |d_gn|)`` on the dog-leg path through the Cauchy point."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    d_gn = np.asarray(d_gn, dtype=float)
    d_g = np.asarray(d_g, dtype=float)
    a, b = _dogleg_coeffs(np.linalg.norm(d_gn), np.linalg.norm(d_g), d_g @ d_gn, d_g @ d_g, alpha)
    return a * d_g + b * d_gn


def sufficient_decrease(cost0, cost1, predicted_decrease, c1):
    """Armijo test: the achieved decrease is at least ``c1`` of the model decrease.

    A relative slack of a few ulps of ``cost0`` absorbs the rounding of
    ``cost0 - cost1`` at the boundary.
    """
    slack = 1e-12 * max(1.0, abs(cost0))
    return bool(cost0 - cost1 >= c1 * predicted_decrease - slack)


def dogleg_line_search(t, d_gn, d_g, cfg: RiSAMConfig, cost_fn, cost0=None,
                       accept_first=True, fallback=None):
    """Search outward along the dog-leg arc.

    ``t`` supplies ``apply_r`` and ``rhs`` (a :class:`BayesTree`);
    ``cost_fn(delta)`` evaluates the nonlinear cost of a step from the
    linearization point.  The trust radius starts at
    ``min(alpha_min, |d_gn|)`` and grows by ``alpha_growth`` up to
    ``min(alpha_max, |d_gn|)``, which is always evaluated last.  The last point
    satisfying sufficient decrease wins.  Without one, the first point is
    taken when ``accept_first`` is set, else ``fallback`` (default: zero step).
    """
    d_gn = np.asarray(d_gn, dtype=float)
    d_g = np.asarray(d_g, dtype=float)
    zero = np.zeros_like(d_gn)
    if cost0 is None:
        cost0 = cost_fn(zero)
    n_gn = float(np.linalg.norm(d_gn))
    if n_gn == 0.0:
        return StepResult(zero, cost0, True, 0.0, cost0, 0.0, True, 0)
    n_g = float(np.linalg.norm(d_g))
    g_dot_gn = float(d_g @ d_gn)
    gg_sq = n_g * n_g
    # predicted decrease d^T R x - 0.5 |R x|^2 on span{d_g, d_gn}; R d_gn = d
    d = t.rhs()
    u = t.apply_r(d_g)
    uu, ud, dd = u @ u, u @ d, d @ d

    def predicted(a, b):
        return a * ud + b * dd - 0.5 * (a * a * uu + 2 * a * b * ud + b * b * dd)

    alpha = min(cfg.alpha_min, n_gn)
    alpha_f = min(cfg.alpha_max, n_gn)
    first = best = None
    evals = nonfinite = 0
    while True:
        a, b = _dogleg_coeffs(n_gn, n_g, g_dot_gn, gg_sq, alpha)
        delta = a * d_g + b * d_gn
        c1 = cost_fn(delta)
        evals += 1
        pred = max(predicted(a, b), 0.0)
        if not math.isfinite(c1):
            nonfinite += 1
            ok = False
        else:
            ok = sufficient_decrease(cost0, c1, pred, cfg.wolfe_c1)
        cand = (delta, c1, alpha, pred)
        if first is None:
            first = cand
        if ok:
            best = cand
        if alpha >= alpha_f:
            break
        alpha = min(alpha * cfg.alpha_growth, alpha_f)

    if best is not None:
        delta, c1, alpha, pred = best
        return StepResult(delta, c1, True, alpha, cost0, pred, True, evals, nonfinite)
    if accept_first and math.isfinite(first[1]):
        delta, c1, alpha, pred = first
        return StepResult(delta, c1, True, alpha, cost0, pred, False, evals, nonfinite)
    if fallback is None:
        return StepResult(zero, cost0, False, 0.0, cost0, 0.0, False, evals, nonfinite)
    delta, c = fallback
    return StepResult(np.asarray(delta, dtype=float).copy(), c, False, 0.0, cost0, 0.0, False,
                      evals, nonfinite)


# ----------------------------------------------------------------------
# helpers shared by the solvers


def _tree_cost_fn(tree: BayesTree, mu=None):
    """Nonlinear cost of steps from the tree's linearization point.

    Each SIG factor is evaluated at the control parameter it was last
    linearized with (or at ``mu`` if given), so the cost and the stored linear
    model describe the same problem.
    """
    table = tree.graph.table
    nf = tree.n_factors
    nv = tree.n_vars
    dim = tree.dim
    idx = np.arange(nf)
    if mu is None:
        tags = tree.lin_mu[:nf]
        mu_eff = np.where(np.isnan(tags), 1.0, tags)
    else:
        mu_eff = table.effective_mu(idx, mu)
    theta = tree.theta[:nv]
    G = tree.group

    def cost(delta):
        est = G.retract(theta, np.asarray(delta)[: nv * dim].reshape(nv, dim))
        with np.errstate(all="ignore"):
            return float(table.costs(est, idx, mu_eff).sum())

    return cost


def _new_values(tree: BayesTree, factors, x):
    g = tree.graph
    out = {}
    for f in factors:
        for k in f.keys:
            s = g.slot.get(k)
            if (s is None or s >= tree.n_vars) and k not in out:
                if k not in x:
                    raise DisconnectedFactorError(f"no initial estimate for new key {k}")
                out[k] = x[k]
    return out


@dataclass
class UpdateInfo:
    """Diagnostics of one incremental update."""

    fast_path: bool = False
    iterations: int = 0
    polish_iterations: int = 0
    converged: bool = True
    convex_vars: int = 0
    nonfinite: int = 0
    cost: float = math.nan
    mu_history: list = field(default_factory=list)


# ----------------------------------------------------------------------
# batch efficient GNC


def efficient_gnc(g: FactorGraph, x0, cfg: RiSAMConfig | None = None, graduated=True,
                  max_iters=None, info: UpdateInfo | None = None):
    """Batch graduated optimization with one step per control-parameter value.

    After the schedule reaches ``mu_final`` the problem is polished at fixed
    ``mu_final`` until the step changes the estimate by less than
    ``convergence_delta_norm`` (at most ``max_iters`` polish steps, default
    ``cfg.max_polish_iters``).  ``graduated=False`` skips the schedule and
    only polishes, i.e. plain robust optimization of the final kernel.

    Raises :class:`DivergenceError` when the cost becomes non-finite.
    """
    cfg = cfg or RiSAMConfig()
    max_iters = cfg.max_polish_iters if max_iters is None else max_iters
    info = info if info is not None else UpdateInfo()
    tree = BayesTree(group=g.group)
    keys = sorted({k for f in g.factors for k in f.keys})
    sub = tree.graph
    idx = sub.extend(g.factors)
    mu = cfg.mu_init if graduated else cfg.mu_final
    tree.update(idx, new_values={k: x0[k] for k in keys}, mu=mu, mu_final=cfg.mu_final)
    all_keys = list(keys)
    polish = 0
    while True:
        graduating = mu < cfg.mu_final
        info.mu_history.append(mu)
        d_gn = tree.solve_gn()
        d_g = tree.solve_gradient()
        cost_fn = _tree_cost_fn(tree)
        cost0 = cost_fn(np.zeros_like(d_gn))
        if not math.isfinite(cost0):
            raise DivergenceError(f"non-finite cost {cost0} at mu={mu}")
        step = dogleg_line_search(tree, d_gn, d_g, cfg, cost_fn, cost0=cost0,
                                  accept_first=graduating)
        info.nonfinite += step.nonfinite
        if not math.isfinite(step.cost):
            raise DivergenceError(f"non-finite cost after step at mu={mu}")
        tree.delta[: len(step.delta)] = step.delta
        info.iterations += 1
        info.cost = step.cost
        if graduating:
            mu = min(kernels.update_mu(mu, cfg.mu_init), cfg.mu_final)
        else:
            polish += 1
            if np.linalg.norm(step.delta) < cfg.convergence_delta_norm:
                info.converged = True
                break
            if polish >= max_iters:
                info.converged = False
                break
        tree.update(relin=all_keys, mu=mu, mu_final=cfg.mu_final)
    info.polish_iterations = polish
    est = tree.estimate()
    return {k: est[k] for k in keys}


# ----------------------------------------------------------------------
# riSAM


def _all_known_inliers(factors):
    return len(factors) > 0 and all(f.known_inlier for f in factors)


def risam_update(tree: BayesTree, x, new_factors, cfg: RiSAMConfig, info: UpdateInfo | None = None):
    """One riSAM update: add ``new_factors`` and run the graduated inner loop.

    ``x`` supplies initial estimates for keys the tree has not seen yet.
    Returns ``(tree, estimate, info)``.
    """
    info = _risam_update(tree, x, new_factors, cfg, info)
    return tree, tree.estimate(), info


def _risam_update(tree, x, new_factors, cfg, info=None):
    info = info if info is not None else UpdateInfo()
    new_factors = list(new_factors)
    new_values = _new_values(tree, new_factors, x)
    relin = tree.mark_fluid(tree.delta, cfg.relin_threshold) if tree.n_vars else set()
    idx = tree.graph.extend(new_factors)

    if _all_known_inliers(new_factors) or not new_factors:
        info.fast_path = True
        tree.update(idx, new_values=new_values, relin=relin, mu=cfg.mu_final, mu_final=cfg.mu_final)
        n = tree.n_vars * tree.dim
        tree.delta[:n] = tree.solve_gn()
        return info

    mu = cfg.mu_init
    convex = tree.update(idx, new_values=new_values, relin=relin, mu=mu, mu_final=cfg.mu_final)
    info.convex_vars += len(convex)
    polish = 0
    n = tree.n_vars * tree.dim
    while True:
        graduating = mu < cfg.mu_final
        info.mu_history.append(mu)
        d_gn = tree.solve_gn()
        d_g = tree.solve_gradient()
        cost_fn = _tree_cost_fn(tree)
        current = tree.delta[:n].copy()
        cost0 = cost_fn(np.zeros(n))
        fallback = None
        if not graduating:
            c_cur = cost_fn(current)
            if c_cur <= cost0:
                fallback = (current, c_cur)
        step = dogleg_line_search(tree, d_gn, d_g, cfg, cost_fn, cost0=cost0,
                                  accept_first=graduating, fallback=fallback)
        info.nonfinite += step.nonfinite
        change = float(np.linalg.norm(step.delta - current))
        tree.delta[:n] = step.delta
        info.iterations += 1
        info.cost = step.cost
        if graduating:
            mu = min(kernels.update_mu(mu, cfg.mu_init), cfg.mu_final)
        else:
            polish += 1
            if change < cfg.convergence_delta_norm:
                info.converged = True
                break
            if polish >= cfg.max_polish_iters:
                info.converged = False
                break
        relin = tree.mark_fluid(tree.delta, cfg.relin_threshold)
        affected = convex | relin
        convex = tree.update(affected=affected, relin=relin, mu=mu, mu_final=cfg.mu_final)
        info.convex_vars += len(convex)
    info.polish_iterations = polish
    return info


def adjust_initial_mu(g: FactorGraph, x, cfg: RiSAMConfig):
    """Per-factor starting control parameter from the current estimate.

    Strong outliers advance one schedule step, strong inliers fall back by 0.1.
    Returns the indices of the factors whose value changed.
    """
    table = g.table
    if table is None or table.n == 0:
        return []
    idx = np.flatnonzero(table.kind[: table.n] == KernelKind.SIG)
    if len(idx) == 0:
        return []
    theta = g.values_to_array(x) if isinstance(x, dict) else x
    r = table.whitened(theta, idx)
    pct = chi2.cdf(np.einsum("ni,ni->n", r, r), g.group.dim)
    changed = []
    for i, p in zip(idx, pct):
        old = table.mu_init_local[i]
        if p > cfg.strong_outlier_thresh:
            new = kernels.update_mu(old, cfg.mu_init)
        elif p < cfg.strong_inlier_thresh:
            new = max(0.0, old - 0.1)
        else:
            continue
        new = min(1.0, max(0.0, new))
        if new != old:
            g.set_mu_init_local(int(i), new)
            changed.append(int(i))
    return changed


class RiSAM:
    """Stateful riSAM solver owning one Bayes tree."""

    def __init__(self, cfg: RiSAMConfig | None = None, group=None):
        self.cfg = cfg or RiSAMConfig()
        self.tree = BayesTree(group=group)
        self.last_info: UpdateInfo | None = None
        self.convex_total = 0
        self.nonfinite = 0

    @property
    def graph(self):
        return self.tree.graph

    def update(self, new_factors, x=None):
        info = _risam_update(self.tree, x or {}, new_factors, self.cfg)
        self.last_info = info
        self.convex_total += info.convex_vars
        self.nonfinite += info.nonfinite
        return info

    def estimate(self):
        return self.tree.estimate()

    def pose(self, key):
        return self.tree.estimate_of(key)

    def adjust_initial_mu(self):
        """Run the per-factor adjustment if the last update converged."""
        if not self.cfg.adjust_mu or self.last_info is None or not self.last_info.converged:
            return []
        return adjust_initial_mu(self.graph, self.tree.estimate_array(), self.cfg)


class IncrementalSolver:
    """Non-graduated incremental Gauss-Newton (one tree update per measurement batch).

    Robust kernels are applied through IRLS weights at relinearization; this is
    the baseline used for the quadratic, Huber, Geman-McClure and Max-Mixture
    back ends and for pseudo-ground-truth.
    """

    def __init__(self, group=None, relin_threshold=0.1):
        self.tree = BayesTree(group=group)
        self.relin_threshold = relin_threshold
        self.nonfinite = 0

    @property
    def graph(self):
        return self.tree.graph

    def update(self, new_factors, x=None):
        tree = self.tree
        new_factors = list(new_factors)
        new_values = _new_values(tree, new_factors, x or {})
        relin = tree.mark_fluid(tree.delta, self.relin_threshold) if tree.n_vars else set()
        idx = tree.graph.extend(new_factors)
        tree.update(idx, new_values=new_values, relin=relin)
        n = tree.n_vars * tree.dim
        tree.delta[:n] = tree.solve_gn()
        if not np.all(np.isfinite(tree.delta[:n])):
            self.nonfinite += 1
            raise DivergenceError("non-finite Gauss-Newton step")
        return UpdateInfo(fast_path=True, iterations=1)

    def estimate(self):
        return self.tree.estimate()

    def pose(self, key):
        return self.tree.estimate_of(key)
