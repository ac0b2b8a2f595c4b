"""Bias-corrected GEE estimation and smooth-threshold GEE variable
selection for single-index models on clustered data."""

from .correlation import (ResidualSet, WorkingCorrelationSpec, build_R,
                          estimate_alpha_moments, estimate_pooled_sigma, invert_R)
from .data import Cluster, ClusteredDataset, CsvSchema, load_csv, save_csv, validate
from .engine import (FitResult, GeeConfig, InitialFit, asymptotic_covariance,
                     bc_gee_residual, initial_estimate, initial_fit,
                     prepare_bc, solve_bc_gee)
from .errors import SgeeError
from .geometry import IndexParam, choose_r, embed, jacobian, reduce
from .selection import (SelectionResult, ThresholdState, bic_score,
                        compute_delta, default_tuning_grid, solve_sgee, tune)
from .simulate import (ExampleSpec, StudyReport, example_spec, generate_example,
                       r_squared, run_study, tn_tp)
from .smoothing import (SmootherConfig, SmootherFit, cv_bandwidth, estimate_cond_mean,
                        estimate_g, kernel_eval, local_moments, make_smoother_fit)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
