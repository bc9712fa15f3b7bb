"""Data-driven synthesis of control barrier functions from state constraints.

Pipeline: sample states uniformly, classify input-feasibility with small box
QPs, track the feasible-fraction (Jaccard) convergence, extract the discrete
class boundary, fit barrier parameters (uniform, non-uniform, or multiple
intersecting candidates), and enforce the result at runtime with a QP safety
filter in closed-loop simulation.
"""

from .system import (BoxSet, CbfCandidate, HardConstraint, SystemModel,
                     build_system, eval_h, eval_h_grad, eval_z, eval_zdot,
                     identity_candidate, make_double_integrator,
                     register_system, registered_systems)
from .qp import (QpProblem, QpSolution, QpStatus, exists_input_nonneg,
                 min_zdot_residual, solve_box_qp)
from .sampler import (JaccardTracker, SampleClass, SampleRecord, SampleSet,
                      classify, draw_batch, load_samples, merge, run_sampling,
                      save_samples)
from .boundary import (BoundarySet, auto_epsilon, extract_boundary,
                       load_boundary, save_boundary)
from .fitter import (FitConfig, FitResult, VerificationReport, bind_hcf,
                     check_redundancy, estimate_set_size, fit_multi,
                     fit_nonuniform, fit_uniform, load_fit, save_fit,
                     verify_candidate)
from .simulator import (FilterConfig, InvarianceReport, SimConfig, Trajectory,
                        check_invariance, hdot_rate_bound, interior_grid,
                        nominal_controller, reference_spline, safety_filter,
                        simulate, step)
from .config import ConfigError, PipelineConfig, load_config, parse_config

__version__ = "0.1.0"
