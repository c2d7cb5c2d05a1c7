"""Constraint-free generation on convex sets via exact mirror maps.

The package trains a plain Euclidean denoising diffusion model in the dual
space of a convex constrained set and maps samples back through the inverse
mirror map, so generated points satisfy the constraints by construction. It
also ships the supporting toolkit: synthetic constrained datasets, transport
and kernel evaluation metrics, a tractable likelihood bound, and polytope
watermarking built on private orthonormal tokens.
"""

from .batch import DUAL, PRIMAL, SampleBatch, load_batch, load_csv_matrix, save_batch
from .datasets import (DatasetSpec, dirichlet, gmm_ball, hypercube_corners,
                       spiral_ball)
from .diffusion import (ElboTerms, NoiseSchedule, ancestral_sample, elbo,
                        elbo_breakdown, make_linear_schedule, mu_from_eps,
                        posterior_params, q_sample, regression_target,
                        schedule_from_dict, schedule_to_dict)
from .errors import (ConfigError, DimensionMismatch, EmptyBatch, EmptyInput,
                     InvalidSchedule, MirrorDiffError, NonFiniteElbo,
                     NonFiniteInput, OddDimension, PointOutsideSet,
                     RankDeficient, RejectionBudgetExceeded, StepOutOfRange)
from .geometry import (BallConstraint, ConstraintSet, DualHessian,
                       HypercubeConstraint, PolytopeConstraint,
                       SimplexConstraint, constraint_from_dict,
                       constraint_to_dict, contains, contains_mask,
                       dual_tokens, hessian_dual, load_constraint,
                       log_det_hessian_dual, mirror_forward, mirror_inverse,
                       orthonormalize_tokens, save_constraint)
from .metrics import (MetricReport, evaluate_protocol, mmd_rbf,
                      sliced_wasserstein, violation_rate, wasserstein1)
from .network import (Architecture, Checkpoint, NetworkParams, forward,
                      init_params, load_checkpoint, loss_and_grad,
                      save_checkpoint, timestep_embedding)
from .training import (AdamW, TrainConfig, TrainResult, read_loss_trace,
                       train, write_loss_trace)
from .watermark import (DetectionResult, FpRate, WatermarkKey, detect,
                        detect_mask, fp_rate_gaussian, keygen, load_key,
                        precision_estimate, project, save_key)

__version__ = "0.1.0"
