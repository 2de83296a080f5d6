"""Newton mode-finding as a sequence of regression problems.

Each outer step turns the current latent iterate into pseudo targets,
solves the induced regression system with the projection solver (recycled
across steps when enabled), and maps the representer weights back to the
next iterate. A dense subset-of-data baseline shares the posterior
representation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import lapack

from .exceptions import DimensionMismatch, InvalidInput, NotPositiveDefinite
from .gp import Dataset, MultiOutputPrior, cross_covariance, prior_matvec
from .likelihoods import Likelihood
from .linalg import LowRankRoot
from .posterior import PosteriorBelief
from .solver import (InnerConfig, RegressionSystem, SolverBuffers, Termination,
                     itergp_solve, make_policy, virtual_solver_run)

OUTER_CONVERGED = "converged"
OUTER_MAX_STEPS = "max_steps"
OUTER_STALLED = "stalled"


@dataclass(frozen=True)
class OuterConfig:
    """Newton-loop controls: stopping, schedule, recycling, compression."""

    max_newton_steps: int
    delta: float = 0.01
    inner_schedule: Union[int, Sequence[int]] = 1
    recycle: bool = True
    compression_rank: Optional[int] = None  # None = unbounded

    def __post_init__(self):
        if self.max_newton_steps < 1:
            raise InvalidInput("at least one Newton step is required")
        if not self.delta > 0:
            raise InvalidInput("delta must be positive")
        schedule = self.inner_schedule
        entries = [schedule] if isinstance(schedule, int) else list(schedule)
        if not entries or any(int(e) < 1 for e in entries):
            raise InvalidInput("schedule entries must be >= 1")
        if self.compression_rank is not None and self.compression_rank < 0:
            raise InvalidInput("compression rank must be nonnegative")

    def budget_for(self, step: int) -> int:
        if isinstance(self.inner_schedule, int):
            return self.inner_schedule
        entries = list(self.inner_schedule)
        return int(entries[min(step, len(entries) - 1)])


@dataclass
class StepRecord:
    step: int
    pseudo_target_norm: float
    inner_iterations: int
    cum_kernel_matvecs: int
    wallclock_s: float
    residual_norm: float
    inner_termination: str


@dataclass
class FitTrace:
    steps: list[StepRecord] = field(default_factory=list)
    termination: str = OUTER_MAX_STEPS
    total_kernel_matvecs: int = 0
    peak_buffer_entries: int = 0
    wallclock_s: float = 0.0
    factorization_size: int = 0  # dense baseline only
    belief: Optional[PosteriorBelief] = None

    def csv_rows(self):
        header = ["step", "inner_iters", "cum_matvecs", "wallclock_s",
                  "residual_norm"]
        rows = [[r.step, r.inner_iterations, r.cum_kernel_matvecs,
                 r.wallclock_s, r.residual_norm] for r in self.steps]
        return header, rows

    def summary(self) -> dict:
        return {
            "termination": self.termination,
            "steps": len(self.steps),
            "total_kernel_matvecs": self.total_kernel_matvecs,
            "peak_buffer_entries": self.peak_buffer_entries,
            "wallclock_s": self.wallclock_s,
            "factorization_size": self.factorization_size,
            "final_residual_norm":
                self.steps[-1].residual_norm if self.steps else None,
        }


class _SolverClock:
    """Accumulates solver wall-clock, pausable around metric callbacks."""

    def __init__(self):
        self.elapsed = 0.0
        self._mark = time.perf_counter()
        self._running = True

    def pause(self):
        if self._running:
            self.elapsed += time.perf_counter() - self._mark
            self._running = False

    def resume(self):
        if not self._running:
            self._mark = time.perf_counter()
            self._running = True

    def read(self) -> float:
        if self._running:
            now = time.perf_counter()
            self.elapsed += now - self._mark
            self._mark = now
        return self.elapsed


def pseudo_targets(likelihood: Likelihood, f: np.ndarray) -> np.ndarray:
    """Regression targets that make a Newton step a GP regression solve."""
    return f + likelihood.w_inv_matvec(f, likelihood.grad_log_lik(f))


def newton_update(prior: MultiOutputPrior, X: np.ndarray, weights: np.ndarray,
                  mean_vec: np.ndarray, tile: int = 256) -> np.ndarray:
    """Next latent iterate K v + m from the representer weights."""
    return prior_matvec(prior, X, weights, tile=tile) + mean_vec


def outer_stop(g_new: np.ndarray, g_old: np.ndarray, delta: float) -> bool:
    """Relative-change rule |g_new - g_old| / |g_new| <= delta."""
    nn = float(np.linalg.norm(g_new))
    diff = float(np.linalg.norm(g_new - g_old))
    if nn == 0.0:
        return diff == 0.0
    return diff / nn <= delta


def fit(prior: MultiOutputPrior, dataset: Dataset, likelihood: Likelihood,
        outer_config: OuterConfig, inner_config: InnerConfig,
        policy_kind="residual", tile: int = 256,
        on_step=None, on_inner=None):
    """Run the full two-loop inference and return (belief, trace).

    ``on_step(step, belief, trace)`` and
    ``on_inner(step, inner_iter, weights, root, cum_matvecs, solver_s)``
    are metric hooks; the solver clock pauses while they run, so metric
    evaluation stays out of the reported wall-clock.
    """
    X = dataset.inputs
    n, C = dataset.n_points, likelihood.num_outputs
    if likelihood.n_points != n:
        raise DimensionMismatch("likelihood and dataset disagree on N")
    if prior.num_outputs != C:
        raise DimensionMismatch(
            f"prior has {prior.num_outputs} outputs, likelihood needs {C}")
    dim = n * C
    mean_vec = prior.mean_vector(n)

    clock = _SolverClock()
    trace = FitTrace()
    cum_matvecs = 0
    peak_entries = 0
    buffers = SolverBuffers.empty(dim)
    f = mean_vec.copy()
    g_old = None
    belief = None
    trace.termination = OUTER_MAX_STEPS

    def apply_kernel(w):
        return prior_matvec(prior, X, w, tile=tile)

    for i in range(outer_config.max_newton_steps):
        yhat = pseudo_targets(likelihood, f)
        rhs = yhat - mean_vec
        apply_noise = partial(likelihood.w_inv_matvec, f)
        if outer_config.recycle:
            root0, buffers = virtual_solver_run(
                buffers, apply_noise, outer_config.compression_rank)
        else:
            buffers = SolverBuffers.empty(dim)
            root0 = LowRankRoot.zero(dim)
        budget = outer_config.budget_for(i)
        count_before = buffers.count

        inner_hook = None
        if on_inner is not None:
            def inner_hook(j, weights, root, solve_matvecs, _i=i):
                clock.pause()
                on_inner(_i, j, weights, root, cum_matvecs + solve_matvecs,
                         clock.elapsed)
                clock.resume()

        outcome = itergp_solve(
            RegressionSystem(apply_kernel, apply_noise, rhs),
            make_policy(policy_kind, dim), buffers,
            InnerConfig(max_iters=budget, abs_tol=inner_config.abs_tol,
                        rel_tol=inner_config.rel_tol),
            initial_root=root0, on_iteration=inner_hook)
        buffers = outcome.buffers
        cum_matvecs += outcome.kernel_matvecs
        peak_entries = max(peak_entries,
                           dim * (2 * buffers.count + outcome.root.rank))

        f_new = newton_update(prior, X, outcome.weights, mean_vec, tile=tile)
        cum_matvecs += 1
        g_new = f_new - mean_vec

        trace.steps.append(StepRecord(
            step=i,
            pseudo_target_norm=float(np.linalg.norm(yhat)),
            inner_iterations=outcome.iterations_run,
            cum_kernel_matvecs=cum_matvecs,
            wallclock_s=clock.read(),
            residual_norm=outcome.residual_norm,
            inner_termination=outcome.termination.value,
        ))
        belief = PosteriorBelief(prior=prior, train_inputs=X,
                                 weights=outcome.weights, root=outcome.root,
                                 newton_step=i,
                                 solver_iterations=outcome.iterations_run)
        if on_step is not None:
            clock.pause()
            on_step(i, belief, trace)
            clock.resume()

        stalled = (outcome.termination == Termination.ETA_BREAKDOWN
                   and outcome.iterations_run == 0)
        if stalled:
            trace.termination = OUTER_STALLED
            f = f_new
            break
        f = f_new
        if likelihood.newton_is_exact:
            # quadratic objective: the first step already lands on the mode
            trace.termination = OUTER_CONVERGED
            break
        if g_old is not None and outer_stop(g_new, g_old, outer_config.delta):
            trace.termination = OUTER_CONVERGED
            break
        g_old = g_new

    trace.total_kernel_matvecs = cum_matvecs
    trace.peak_buffer_entries = peak_entries
    trace.wallclock_s = clock.read()
    trace.belief = belief
    return belief, trace


def _add_noise_blocks(khat: np.ndarray, blocks: np.ndarray) -> None:
    """Add per-point (C, C) noise blocks onto the dense system in place."""
    C = blocks.shape[1]
    for n in range(blocks.shape[0]):
        sl = slice(n * C, (n + 1) * C)
        khat[sl, sl] += blocks[n]


def sod_fit(prior: MultiOutputPrior, dataset: Dataset, likelihood: Likelihood,
            subset_size: int, seed: int, outer_config: OuterConfig,
            subset_indices=None):
    """Exact dense Newton on a random data subset; returns (belief, trace).

    The subset is drawn once per fit, uniformly without replacement;
    ``subset_indices`` overrides the draw with explicit point indices.
    """
    N = dataset.n_points
    if subset_indices is not None:
        idx = np.asarray(subset_indices, dtype=np.int64)
    else:
        if not 1 <= subset_size <= N:
            raise InvalidInput(f"subset size {subset_size} outside [1, {N}]")
        rng = np.random.Generator(np.random.Philox(key=seed))
        idx = np.sort(rng.choice(N, size=subset_size, replace=False))
    X_sub = dataset.inputs[idx]
    lik = likelihood.subset(idx)
    ns, C = idx.shape[0], likelihood.num_outputs
    dim = ns * C

    clock = _SolverClock()
    trace = FitTrace()
    trace.factorization_size = dim
    trace.peak_buffer_entries = 2 * dim * dim

    K_sub = cross_covariance(prior, X_sub, X_sub)
    mean_vec = prior.mean_vector(ns)
    f = mean_vec.copy()
    g_old = None
    weights = np.zeros(dim)
    chol = None
    trace.termination = OUTER_MAX_STEPS

    for i in range(outer_config.max_newton_steps):
        yhat = pseudo_targets(lik, f)
        rhs = yhat - mean_vec
        chol, weights = _solve_dense_step(K_sub, lik.w_inv_dense_blocks(f), rhs)
        g_new = K_sub @ weights
        f = g_new + mean_vec
        trace.steps.append(StepRecord(
            step=i, pseudo_target_norm=float(np.linalg.norm(yhat)),
            inner_iterations=0, cum_kernel_matvecs=i + 1,
            wallclock_s=clock.read(),
            residual_norm=0.0, inner_termination="dense"))
        if lik.newton_is_exact:
            trace.termination = OUTER_CONVERGED
            break
        if g_old is not None and outer_stop(g_new, g_old, outer_config.delta):
            trace.termination = OUTER_CONVERGED
            break
        g_old = g_new

    inv_c, info = lapack.dtrtri(chol, lower=1, overwrite_c=1)
    if info != 0:
        raise NotPositiveDefinite(info, "triangular inversion failed")
    # dpotrf/dtrtri leave the unused triangle untouched; mask it before use
    root_cols = np.ascontiguousarray(np.triu(inv_c.T))
    belief = PosteriorBelief(prior=prior, train_inputs=X_sub, weights=weights,
                             root=LowRankRoot(root_cols),
                             newton_step=len(trace.steps) - 1,
                             solver_iterations=dim)
    trace.total_kernel_matvecs = len(trace.steps)
    trace.wallclock_s = clock.read()
    trace.belief = belief
    return belief, trace


def _solve_dense_step(K_sub, noise_blocks, rhs):
    """Assemble and Cholesky-solve the dense step system.

    Retries once with 1e-12 diagonal jitter on a freshly assembled matrix
    (the failed factorization overwrites its input) before raising.
    """
    def assemble():
        khat = np.array(K_sub, order="F")
        _add_noise_blocks(khat, noise_blocks)
        return khat

    try:
        return _factor_solve(assemble(), rhs)
    except NotPositiveDefinite:
        khat = assemble()
        khat[np.diag_indices_from(khat)] += 1e-12
        try:
            return _factor_solve(khat, rhs)
        except NotPositiveDefinite as err:
            raise NotPositiveDefinite(
                err.dimension,
                f"dense system not positive definite (leading minor "
                f"{err.dimension}), even after 1e-12 diagonal jitter") from err


def _factor_solve(khat, rhs):
    c, info = lapack.dpotrf(khat, lower=1, overwrite_a=1)
    if info > 0:
        raise NotPositiveDefinite(info)
    if info < 0:
        raise InvalidInput(f"illegal value in argument {-info} of dpotrf")
    x, info = lapack.dpotrs(c, rhs, lower=1)
    if info != 0:
        raise InvalidInput(f"dpotrs failed with info={info}")
    return c, x
