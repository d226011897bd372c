"""Robust incremental pose-graph optimization with graduated non-convexity."""

from .geometry import Pose2, Pose3, SE2, SE3, between, compose, inverse, local, retract
from .kernels import KernelKind, KernelSpec, evaluate, is_converged, update_mu, weight
from .factors import (Factor, FactorGraph, NoiseModel, between_factor, chi2_classify,
                      linearize_factor, prior_factor, robust_error, whitened_residual)
from .bayes_tree import BayesTree, mark_fluid, solve_gn, solve_gradient, update_tree
from .optimizer import (DivergenceError, IncrementalSolver, RiSAM, RiSAMConfig, StepResult,
                        adjust_initial_mu, compute_dogleg_point, dogleg_line_search,
                        efficient_gnc, risam_update, sufficient_decrease)

__version__ = "0.1.0"
