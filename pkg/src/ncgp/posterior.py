"""Evaluate the computation-aware posterior at arbitrary inputs and map it
to predictive distributions and evaluation metrics.

The belief is (v, Q): mean m(x) + K(x, X) v, covariance downdate
K(x, x') - K(x, X) Q Q' K(X, x'). A rank-0 root is the prior. Test points
are processed in chunks so the cross-covariance never materializes whole.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, gammaln

from .exceptions import DimensionMismatch, InvalidInput
from .gp import MultiOutputPrior, cross_covariance
from .likelihoods import (BernoulliLogisticLikelihood, GaussianLikelihood,
                          PoissonLikelihood, SoftmaxLikelihood, softmax_rows)
from .linalg import LowRankRoot

NLL_PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class PosteriorBelief:
    """Representer weights and precision root tied to their prior and data."""

    prior: MultiOutputPrior
    train_inputs: np.ndarray
    weights: np.ndarray
    root: LowRankRoot
    newton_step: int = 0
    solver_iterations: int = 0

    def __post_init__(self):
        dim = self.train_inputs.shape[0] * self.prior.num_outputs
        if self.weights.shape != (dim,):
            raise DimensionMismatch(
                f"weights have length {self.weights.shape[0]}, expected {dim}")
        if self.root.dim != dim:
            raise DimensionMismatch(
                f"root has dimension {self.root.dim}, expected {dim}")

    @classmethod
    def prior_only(cls, prior, train_inputs):
        dim = train_inputs.shape[0] * prior.num_outputs
        return cls(prior, train_inputs, np.zeros(dim), LowRankRoot.zero(dim))


def posterior_mean(belief: PosteriorBelief, X_test: np.ndarray,
                   chunk: int = 512) -> np.ndarray:
    """Predictive mean per test point and output, shape (N_test, C)."""
    X_test = np.asarray(X_test, dtype=np.float64)
    C = belief.prior.num_outputs
    nt = X_test.shape[0]
    out = np.empty((nt, C))
    mean_c = np.asarray(belief.prior.mean)
    for lo in range(0, nt, chunk):
        hi = min(lo + chunk, nt)
        G = cross_covariance(belief.prior, belief.train_inputs, X_test[lo:hi])
        out[lo:hi] = (G @ belief.weights).reshape(hi - lo, C) + mean_c
    return out


def posterior_marginal_var(belief: PosteriorBelief, X_test: np.ndarray,
                           chunk: int = 512) -> np.ndarray:
    """Marginal predictive variances, shape (N_test, C), clamped at zero."""
    X_test = np.asarray(X_test, dtype=np.float64)
    C = belief.prior.num_outputs
    nt = X_test.shape[0]
    prior_var = belief.prior.marginal_prior_variance()
    out = np.empty((nt, C))
    for lo in range(0, nt, chunk):
        hi = min(lo + chunk, nt)
        block = np.tile(prior_var, hi - lo).astype(np.float64)
        if belief.root.rank:
            G = cross_covariance(belief.prior, belief.train_inputs,
                                 X_test[lo:hi])
            A = G @ belief.root.columns
            block -= np.sum(A * A, axis=1)
        out[lo:hi] = block.reshape(hi - lo, C)
    return np.maximum(out, 0.0)


def posterior_covariance(belief: PosteriorBelief,
                         X_test: np.ndarray) -> np.ndarray:
    """Full predictive covariance over (point, output) pairs, CN layout.

    Dense in the test dimension; limited to 1000 test points.
    """
    X_test = np.asarray(X_test, dtype=np.float64)
    if X_test.shape[0] > 1000:
        raise InvalidInput("full covariance limited to 1000 test points")
    K_tt = cross_covariance(belief.prior, X_test, X_test)
    if belief.root.rank == 0:
        return K_tt
    G = cross_covariance(belief.prior, belief.train_inputs, X_test)
    A = G @ belief.root.columns
    return K_tt - A @ A.T


def probit_predict(mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Moderated softmax probabilities from per-output means and variances.

    Logits are scaled by 1/sqrt(1 + pi/8 var) elementwise. A single-output
    mean is treated as a binary problem through the logistic link and
    returns two columns [P(y=0), P(y=1)].
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    var = np.atleast_2d(np.asarray(var, dtype=np.float64))
    if mean.shape != var.shape:
        raise DimensionMismatch(f"mean {mean.shape} vs var {var.shape}")
    if (var < 0).any():
        raise InvalidInput("variances must be nonnegative")
    scaled = mean / np.sqrt(1.0 + (np.pi / 8.0) * var)
    if mean.shape[1] == 1:
        p = expit(scaled[:, 0])
        return np.column_stack([1.0 - p, p])
    return softmax_rows(scaled)


@dataclass(frozen=True)
class PredictiveSummary:
    """Latent moments plus the likelihood-mapped predictive quantities."""

    mean: np.ndarray
    variance: np.ndarray
    class_probabilities: Optional[np.ndarray] = None  # (N, K), rows sum to 1
    rate_median: Optional[np.ndarray] = None
    rate_lower: Optional[np.ndarray] = None           # 2.5% quantile
    rate_upper: Optional[np.ndarray] = None           # 97.5% quantile


def _normal_samples(seed: int, point: int, output: int, count: int) -> np.ndarray:
    """Deterministic standard normals for one (point, output) stream.

    Counter-based streams (Philox keyed by the seed, counter tagged with
    the point and output) make results independent of evaluation order;
    the Box-Muller transform maps the raw uniforms to normals.
    """
    bits = np.random.Philox(key=int(seed) & (2**64 - 1),
                            counter=[0, 0, int(output), int(point)])
    gen = np.random.Generator(bits)
    n_pairs = (count + 1) // 2
    u = gen.random(2 * n_pairs)
    u1 = 1.0 - u[:n_pairs]  # in (0, 1], keeps the log finite
    u2 = u[n_pairs:]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
    return z[:count]


def _latent_samples(mean, var, seed, n_samples):
    """Samples per point and output, shape (N, C, n_samples)."""
    N, C = mean.shape
    sd = np.sqrt(var)
    out = np.empty((N, C, n_samples))
    for n in range(N):
        for c in range(C):
            z = _normal_samples(seed, n, c, n_samples)
            out[n, c] = mean[n, c] + sd[n, c] * z
    return out


def mc_predict(mean: np.ndarray, var: np.ndarray, likelihood,
               n_samples: int, seed: int) -> PredictiveSummary:
    """Monte Carlo push of the latent belief through the likelihood.

    Classification models yield averaged class probabilities; the Poisson
    model yields the rate median with a central 95% band. Deterministic
    for a fixed seed regardless of evaluation order.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    var = np.atleast_2d(np.asarray(var, dtype=np.float64))
    if mean.shape != var.shape:
        raise DimensionMismatch(f"mean {mean.shape} vs var {var.shape}")
    if n_samples < 1:
        raise InvalidInput("n_samples must be >= 1")
    samples = _latent_samples(mean, var, seed, n_samples)

    if isinstance(likelihood, PoissonLikelihood):
        rates = np.exp(samples[:, 0, :])
        lo, med, hi = np.percentile(rates, [2.5, 50.0, 97.5], axis=1)
        return PredictiveSummary(mean=mean, variance=var, rate_median=med,
                                 rate_lower=lo, rate_upper=hi)
    if isinstance(likelihood, BernoulliLogisticLikelihood):
        p = expit(samples[:, 0, :]).mean(axis=1)
        probs = np.column_stack([1.0 - p, p])
        return PredictiveSummary(mean=mean, variance=var,
                                 class_probabilities=probs)
    if isinstance(likelihood, SoftmaxLikelihood):
        probs = np.empty((mean.shape[0], mean.shape[1]))
        for n in range(mean.shape[0]):
            probs[n] = softmax_rows(samples[n].T).mean(axis=0)
        return PredictiveSummary(mean=mean, variance=var,
                                 class_probabilities=probs)
    if isinstance(likelihood, GaussianLikelihood):
        return PredictiveSummary(mean=mean, variance=var)
    raise InvalidInput(f"no predictive mapping for {type(likelihood).__name__}")


def poisson_predictive_density(mean, var, targets, n_samples: int,
                               seed: int) -> np.ndarray:
    """MC-averaged Poisson likelihood of each target count.

    Shares the sampling streams of :func:`mc_predict`, so densities and
    rate bands come from the same posterior draws.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    var = np.atleast_2d(np.asarray(var, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64)
    samples = _latent_samples(mean, var, seed, n_samples)[:, 0, :]
    log_pmf = (y[:, None] * samples - np.exp(samples)
               - gammaln(y + 1.0)[:, None])
    return np.exp(log_pmf).mean(axis=1)


def metric_nll(probabilities, targets=None) -> float:
    """Mean negative log probability of the observed targets.

    A 2-D input is a matrix of class probabilities indexed by integer
    targets; a 1-D input already holds per-point predictive densities.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim == 1:
        dens = probs
    else:
        if targets is None:
            raise InvalidInput("class targets required for probability rows")
        dens = probs[np.arange(probs.shape[0]), np.asarray(targets, dtype=np.int64)]
    return float(-np.mean(np.log(np.maximum(dens, NLL_PROB_FLOOR))))


def metric_accuracy(probabilities, targets) -> float:
    """Fraction of points whose most probable class is the target.

    Ties break toward the lowest class index.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    pred = np.argmax(probs, axis=1)
    return float(np.mean(pred == np.asarray(targets, dtype=np.int64)))


def metric_ece(probabilities, targets, n_bins: int = 15) -> float:
    """Expected calibration error on equal-width confidence bins.

    Bins are left-open and right-closed, so boundary confidences fall in
    the lower bin; confidence 1.0 lands in the top bin.
    """
    if n_bins < 1:
        raise InvalidInput("n_bins must be >= 1")
    probs = np.asarray(probabilities, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == targets).astype(np.float64)
    idx = np.ceil(conf * n_bins).astype(np.int64) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    total = conf.shape[0]
    ece = 0.0
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        gap = abs(correct[mask].mean() - conf[mask].mean())
        ece += (count / total) * gap
    return float(ece)
