"""Monotone solvers for mean field games with common noise under submodular costs."""

__version__ = "0.1.0"

from .coeffexpr import CompiledExpr, Dims, ExprError, ExprSyntaxError, diff_expr, parse_expr, to_source
from .equilibrium import (BracketInit, ComparisonReport, ConvergenceReport, EquilibriumRun, EquilibriumSettings,
                          bundle_residual, best_reply, comparison_harness, equilibrium_residual, fictitious_play,
                          iterate_best_reply, lower_bound_process, make_bracket, project_flow, upper_bound_process,
                          write_run_artifacts)
from .fbsde import (BsdeSolution, PicardSettings, RegressionBasis, feedback_monotonicity_probe,
                    minimize_hamiltonian, riccati_oracle, solve_bsde_backward, solve_fbsde_picard)
from .meanfield import (ConditionalLawFlow, SummaryFlow, check_dominance_1d_cdf, check_dominance_pathwise,
                        conditional_empirical_law, mix_flows, pathspace_distance, wasserstein2_empirical_1d)
from .model import (ControlBox, InteractionSpec, LQModelParams, ModelSpec, ProbeConfig, build_expression_model,
                    build_lq_model, check_assumption_suite, clamped, coordinate, example_params,
                    validate_regularity)
from .sde import (FeedbackControl, NoisePlan, PathBundle, TimeGrid, generate_noise, simulate_forward,
                  verify_trajectory_lattice)
