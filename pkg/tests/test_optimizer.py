import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from risam import geometry as geo, kernels, optimizer
from risam.bayes_tree import BayesTree
from risam.factors import FactorGraph, NoiseModel, between_factor, prior_factor
from risam.geometry import Pose2
from risam.metrics import ate
from risam.optimizer import (DivergenceError, IncrementalSolver, RiSAM, RiSAMConfig,
                             adjust_initial_mu, compute_dogleg_point, dogleg_line_search,
                             efficient_gnc, risam_update, sufficient_decrease)

from oracles import brute_force_minimum, random_se2_updates, scalar_gnc_cost

I3 = NoiseModel.identity(3)
FIG2 = [0.1, -0.05, -0.1, 12.0, 13.0]


# ----------------------------------------------------------------------
# dog-leg pieces


def test_dogleg_point_cases():
    d_gn = np.array([4.0, 0.0])
    d_g = np.array([1.0, 1.0])
    assert np.allclose(compute_dogleg_point(d_gn, d_g, 5.0), d_gn)
    half = np.linalg.norm(d_g) / 2
    p = compute_dogleg_point(d_gn, d_g, half)
    assert np.allclose(p, d_g * half / np.linalg.norm(d_g))
    p = compute_dogleg_point(d_gn, d_g, 3.0)
    assert np.linalg.norm(p) == pytest.approx(3.0, abs=1e-10)
    # on the segment between the Cauchy and Newton points
    t = (p - d_g) @ (d_gn - d_g) / np.sum((d_gn - d_g) ** 2)
    assert np.allclose(d_g + t * (d_gn - d_g), p) and 0 <= t <= 1
    with pytest.raises(ValueError):
        compute_dogleg_point(d_gn, d_g, 0.0)


vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=300, deadline=None)
@given(vec, vec, st.floats(1e-3, 50))
def test_dogleg_norm_bound(a, b, alpha):
    d_gn, d_g = np.array(a), np.array(b)
    p = compute_dogleg_point(d_gn, d_g, alpha)
    assert np.linalg.norm(p) <= alpha + 1e-9
    if alpha >= np.linalg.norm(d_gn):
        assert np.array_equal(p, d_gn)


def test_sufficient_decrease_examples():
    assert sufficient_decrease(10.0, 9.0, 1.0, 1e-4)
    assert not sufficient_decrease(10.0, 10.5, 1.0, 1e-4)
    assert sufficient_decrease(10.0, 9.9999, 1.0, 1e-4)


def _tree(fs, vals, mu=1.0):
    t = BayesTree(group=geo.SE2)
    t.update(t.graph.extend(fs), new_values=vals, mu=mu)
    return t


def test_line_search_short_newton_step():
    t = _tree([prior_factor(0, Pose2(0.2, 0.1, 0.05), I3)], {0: Pose2()})
    d_gn, d_g = t.solve_gn(), t.solve_gradient()
    step = dogleg_line_search(t, d_gn, d_g, RiSAMConfig(), optimizer._tree_cost_fn(t))
    assert np.allclose(step.delta, d_gn)
    assert step.accepted and step.satisfied


def test_line_search_quadratic_problem_takes_newton_step():
    rng = np.random.default_rng(0)
    fs = [prior_factor(0, Pose2(), I3)]
    vals = {0: Pose2()}
    for i in range(1, 8):
        fs.append(between_factor(i - 1, i, Pose2(1, 0, 0), I3))
        vals[i] = Pose2(i + rng.normal(0, 2), rng.normal(0, 2), 0)
    t = _tree(fs, vals)
    d_gn, d_g = t.solve_gn(), t.solve_gradient()
    cost = optimizer._tree_cost_fn(t)
    step = dogleg_line_search(t, d_gn, d_g, RiSAMConfig(), cost)
    assert np.allclose(step.delta, d_gn)
    # translation-only chain: linear problem, so the model decrease is exact
    assert step.cost0 - step.cost == pytest.approx(step.predicted, rel=1e-9)


def test_line_search_norm_never_exceeds_bound():
    rng = np.random.default_rng(5)
    for trial in range(10):
        t = BayesTree(group=geo.SE2)
        for fs, vals in random_se2_updates(rng, 25, outlier_prob=0.8):
            t.update(t.graph.extend(fs), new_values=vals, mu=0.0)
        cfg = RiSAMConfig(alpha_min=0.5, alpha_max=float(rng.uniform(0.5, 5)))
        d_gn, d_g = t.solve_gn(), t.solve_gradient()
        step = dogleg_line_search(t, d_gn, d_g, cfg, optimizer._tree_cost_fn(t))
        assert np.linalg.norm(step.delta) <= min(cfg.alpha_max, np.linalg.norm(d_gn)) + 1e-9


def test_line_search_rejection_falls_back():
    class Flat:
        def rhs(self):
            return np.array([1.0])

        def apply_r(self, x):
            return np.asarray(x)

    cfg = RiSAMConfig()
    up = lambda d: 5.0 + float(np.sum(np.asarray(d) ** 2))  # every step increases the cost
    s = dogleg_line_search(Flat(), np.array([1.0]), np.array([1.0]), cfg, up, accept_first=True)
    assert s.accepted and not s.satisfied and np.allclose(s.delta, 1.0)
    s = dogleg_line_search(Flat(), np.array([1.0]), np.array([1.0]), cfg, up, accept_first=False)
    assert not s.accepted and np.allclose(s.delta, 0.0) and s.cost == 5.0


# ----------------------------------------------------------------------
# batch GNC


def _scalar_graph(data, c=1.0):
    g = FactorGraph()
    for z in data:
        g.add(prior_factor(0, Pose2(z, 0, 0), I3, kernel=kernels.sig(c, 0.0)))
    return g


def test_gnc_on_outlier_free_chain_matches_least_squares():
    rng = np.random.default_rng(2)
    n = 10
    meas = 1.0 + rng.normal(0, 0.1, n - 1)
    loop = float(np.sum(meas) + 0.3)
    g = FactorGraph()
    g.add(prior_factor(0, Pose2(), I3))
    for i in range(1, n):
        g.add(between_factor(i - 1, i, Pose2(meas[i - 1], 0, 0), I3))
    g.add(between_factor(0, n - 1, Pose2(loop, 0, 0), I3))
    # headings and lateral offsets stay zero, so the problem is linear in x
    x0 = {i: Pose2(i * 1.3, 0.0, 0.0) for i in range(n)}
    x0[0] = Pose2(0, 0, 0)
    est = efficient_gnc(g, x0, RiSAMConfig())
    A = np.zeros((n + 1, n))
    b = np.zeros(n + 1)
    A[0, 0] = 1
    for i in range(1, n):
        A[i, i - 1], A[i, i] = -1, 1
        b[i] = meas[i - 1]
    A[n, 0], A[n, n - 1], b[n] = -1, 1, loop
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    got = np.array([est[i].x for i in range(n)])
    assert np.abs(got - x).max() <= 1e-6
    assert all(abs(est[i].y) < 1e-6 and abs(est[i].theta) < 1e-6 for i in range(n))


def test_gnc_escapes_local_minimum_that_traps_plain_gm():
    x_star, c_star = brute_force_minimum(FIG2)
    cfg = RiSAMConfig(c=1.0)
    start = {0: Pose2(12.0, 0, 0)}
    gnc = efficient_gnc(_scalar_graph(FIG2), start, cfg)[0].x
    gm = efficient_gnc(_scalar_graph(FIG2), start, cfg, graduated=False, max_iters=100)[0].x
    assert abs(gnc - x_star) < 1e-3
    assert scalar_gnc_cost(gm, FIG2) > c_star + 0.1


def test_gnc_schedule_is_bounded():
    info = optimizer.UpdateInfo()
    efficient_gnc(_scalar_graph(FIG2), {0: Pose2(5, 0, 0)}, RiSAMConfig(c=1.0), info=info)
    assert info.mu_history[:5] == pytest.approx([0.0, 0.12, 0.384, 0.9648, 1.0])
    assert info.iterations <= 4 + RiSAMConfig().max_polish_iters


def test_gnc_divergence_is_reported():
    g = _scalar_graph(FIG2)
    with pytest.raises(DivergenceError):
        efficient_gnc(g, {0: Pose2(float("nan"), 0, 0)}, RiSAMConfig(c=1.0))


# ----------------------------------------------------------------------
# riSAM


def _chain(n, rng, sigma=0.01):
    N = NoiseModel.from_sigmas([sigma, sigma, sigma / 10])
    gt = [Pose2()]
    for i in range(1, n):
        gt.append(geo.compose(gt[-1], Pose2(1, 0, math.pi / 2 if i % 5 == 0 else 0.0)))
    fs = [prior_factor(0, gt[0], NoiseModel.from_sigmas([1e-3] * 3), known_inlier=True)]
    for i in range(1, n):
        z = geo.compose(geo.between(gt[i - 1], gt[i]),
                        Pose2(*rng.normal(0, [sigma, sigma, sigma / 10])))
        fs.append(between_factor(i - 1, i, z, N, known_inlier=True))
    return gt, fs, N


def _feed(solver, fs):
    solver.update([fs[0]], {0: fs[0].measurement})
    for f in fs[1:]:
        i, j = f.keys
        solver.update([f], {j: geo.compose(solver.pose(i), f.measurement)})


def test_fast_path_matches_plain_incremental_update():
    rng = np.random.default_rng(4)
    gt, fs, _ = _chain(30, rng)
    r = RiSAM(RiSAMConfig(), geo.SE2)
    s = IncrementalSolver(geo.SE2)
    _feed(r, fs)
    _feed(s, fs)
    assert r.last_info.fast_path and r.last_info.iterations == 0
    a, b = r.estimate(), s.estimate()
    for k in a:
        assert np.array_equal(a[k].to_array(), b[k].to_array())


def test_consistent_loop_closure_is_kept():
    rng = np.random.default_rng(8)
    gt, fs, N = _chain(30, rng)
    r = RiSAM(RiSAMConfig(), geo.SE2)
    _feed(r, fs)
    lc = between_factor(3, 29, geo.between(gt[3], gt[29]), N, kernel=kernels.sig())
    info = r.update([lc])
    assert not info.fast_path
    assert info.mu_history[:4] == pytest.approx([0.0, 0.12, 0.384, 0.9648])
    assert info.iterations <= 4 + r.cfg.max_polish_iters
    from risam.factors import chi2_percentile
    assert chi2_percentile(lc, r.estimate()) < 0.95


def test_gross_outlier_is_rejected():
    rng = np.random.default_rng(9)
    gt, fs, N = _chain(40, rng)
    r = RiSAM(RiSAMConfig(), geo.SE2)
    _feed(r, fs)
    before = r.estimate()
    bad = between_factor(2, 37, Pose2(), N, kernel=kernels.sig())
    tree, est, info = risam_update(r.tree, {}, [bad], r.cfg)
    rn = np.linalg.norm(N.sqrt_info @ geo.local(bad.measurement, geo.between(est[2], est[37])))
    assert kernels.weight(kernels.sig(3.0, 1.0), rn) < 1e-3
    assert ate(est, before) < 1e-3
    assert info.nonfinite == 0


def test_final_stage_is_monotone(monkeypatch):
    seen = []
    real = optimizer.dogleg_line_search

    def spy(*a, **kw):
        s = real(*a, **kw)
        if not kw.get("accept_first", True):
            seen.append((s.cost0, s.cost))
        return s

    monkeypatch.setattr(optimizer, "dogleg_line_search", spy)
    rng = np.random.default_rng(12)
    r = RiSAM(RiSAMConfig(), geo.SE2)
    for fs, vals in random_se2_updates(rng, 40, loop_prob=0.4, outlier_prob=0.5):
        r.update(fs, vals)
    assert seen
    assert all(c1 <= c0 + 1e-9 * max(1.0, abs(c0)) for c0, c1 in seen)


def test_adjust_initial_mu_examples():
    g = FactorGraph()
    v = {0: Pose2(), 1: Pose2(1, 0, 0)}
    g.add(prior_factor(0, Pose2(), I3))
    g.add(between_factor(0, 1, Pose2(1, 0, 0), I3, kernel=kernels.sig(), mu_init_local=0.5))
    g.add(between_factor(0, 1, Pose2(-50, 0, 0), I3, kernel=kernels.sig()))
    # chi-square percentile 0.5 in 3 dof
    from scipy.stats import chi2
    r = math.sqrt(chi2.ppf(0.5, 3))
    g.add(between_factor(0, 1, Pose2(1 + r, 0, 0), I3, kernel=kernels.sig(), mu_init_local=0.3))
    changed = adjust_initial_mu(g, v, RiSAMConfig())
    assert sorted(changed) == [1, 2]
    assert g.factors[1].mu_init_local == pytest.approx(0.4)
    assert g.factors[2].mu_init_local == pytest.approx(0.12)
    assert g.factors[3].mu_init_local == 0.3
    for _ in range(10):
        adjust_initial_mu(g, v, RiSAMConfig())
    assert g.factors[1].mu_init_local == 0.0 and g.factors[2].mu_init_local == 1.0


def test_adjustment_waits_for_convergence():
    r = RiSAM(RiSAMConfig(), geo.SE2)
    assert r.adjust_initial_mu() == []
    r2 = RiSAM(RiSAMConfig(adjust_mu=False), geo.SE2)
    r2.last_info = optimizer.UpdateInfo(converged=True)
    assert r2.adjust_initial_mu() == []


def test_config_validation():
    with pytest.raises(ValueError):
        RiSAMConfig(mu_init=1.0)
    with pytest.raises(ValueError):
        RiSAMConfig(alpha_min=5, alpha_max=1)
    with pytest.raises(ValueError):
        RiSAMConfig(wolfe_c1=1.0)
    with pytest.raises(ValueError):
        RiSAMConfig(strong_inlier_thresh=0.95)
