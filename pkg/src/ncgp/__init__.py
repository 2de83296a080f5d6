"""Matrix-free Laplace inference for non-conjugate Gaussian processes.

Mode-finding runs as a sequence of GP regression problems, each solved by
a probabilistic linear solver whose truncation error surfaces as added
posterior uncertainty. Solver work is recycled across Newton steps and
compressed to bound memory.
"""

from .exceptions import (ArtifactError, CgBreakdown, ConfigError,
                         DimensionMismatch, InvalidInput, NcgpError,
                         NotPositiveDefinite, PolicyExhausted)
from .gp import (Dataset, KernelSpec, MultiOutputPrior, Ordering,
                 cross_covariance, kernel_eval, prior_matvec,
                 read_dataset_csv, reorder, write_dataset_csv)
from .likelihoods import (BernoulliLogisticLikelihood, GaussianLikelihood,
                          Likelihood, PoissonLikelihood, SoftmaxLikelihood,
                          make_likelihood)
from .linalg import (EigenPairs, LowRankRoot, apply_lowrank, cg_reference,
                     dense_spd_solve, sym_eigh_truncated)
from .outer import (FitTrace, OuterConfig, fit, newton_update, outer_stop,
                    pseudo_targets, sod_fit)
from .posterior import (PosteriorBelief, PredictiveSummary, mc_predict,
                        metric_accuracy, metric_ece, metric_nll,
                        poisson_predictive_density, posterior_covariance,
                        posterior_marginal_var, posterior_mean,
                        probit_predict)
from .solver import (InnerConfig, PolicyKind, RegressionSystem,
                     SolverBuffers, SolverOutcome, Termination, inner_stop,
                     itergp_solve, make_policy, virtual_solver_run)

__version__ = "0.1.0"
