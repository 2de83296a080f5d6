"""Log-concave observation models.

Each model exposes the log likelihood, its gradient, and matrix-free
products with the negative log-likelihood Hessian W(f) and with its
inverse (pseudo-inverse for the rank-deficient softmax case). All latent
vectors are CN layout, length N*C; the per-point structure of W makes
every product blockwise and O(N*C) to O(N*C^2).

Products accept a vector or a matrix of column vectors, which the virtual
solver run uses to form Gram matrices without loops.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln

from .exceptions import DimensionMismatch, InvalidInput

# Softmax probabilities are floored and logistic probabilities clamped
# before inversion; extreme logits otherwise overflow 1/pi and 1/(s(1-s)).
PROB_FLOOR = 1e-12


class OpCount:
    """Scalar-operation tally for cost accounting."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


def _check_latent(f, dim):
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] != dim:
        raise DimensionMismatch(f"latent length {f.shape[0]} != {dim}")
    if not np.isfinite(f).all():
        raise InvalidInput("latent vector contains non-finite entries")
    return f


class Likelihood:
    """Contract shared by all observation models."""

    #: latent outputs per data point
    num_outputs = 1
    #: True when one exact Newton step lands on the posterior mode
    newton_is_exact = False

    def __init__(self, targets):
        self.targets = np.asarray(targets)
        self.n_points = self.targets.shape[0]

    @property
    def dim(self):
        return self.n_points * self.num_outputs

    def log_lik(self, f) -> float:
        raise NotImplementedError

    def grad_log_lik(self, f) -> np.ndarray:
        raise NotImplementedError

    def w_matvec(self, f, v) -> np.ndarray:
        raise NotImplementedError

    def w_inv_matvec(self, f, v, counter=None) -> np.ndarray:
        raise NotImplementedError

    def w_inv_dense_blocks(self, f) -> np.ndarray:
        """Per-point (C, C) blocks of W(f)^-1; only for dense baselines."""
        raise NotImplementedError

    def subset(self, indices) -> "Likelihood":
        """Restriction of the model to a subset of data points."""
        raise NotImplementedError


class GaussianLikelihood(Likelihood):
    """Gaussian observations with fixed (hetero- or homoskedastic) noise."""

    newton_is_exact = True

    def __init__(self, targets, noise_variances, num_outputs=1):
        super().__init__(np.asarray(targets, dtype=np.float64))
        self.num_outputs = int(num_outputs)
        self.n_points = self.targets.shape[0] // self.num_outputs
        lam = np.broadcast_to(np.asarray(noise_variances, dtype=np.float64),
                              self.targets.shape).copy()
        if (lam <= 0).any():
            raise InvalidInput("noise variances must be positive")
        self.noise_variances = lam

    def log_lik(self, f):
        f = _check_latent(f, self.dim)
        r = f - self.targets
        lam = self.noise_variances
        return float(-0.5 * np.sum(r * r / lam + np.log(2.0 * np.pi * lam)))

    def grad_log_lik(self, f):
        f = _check_latent(f, self.dim)
        return (self.targets - f) / self.noise_variances

    def w_matvec(self, f, v):
        return self._scale(v, 1.0 / self.noise_variances)

    def w_inv_matvec(self, f, v, counter=None):
        return self._scale(v, self.noise_variances)

    def _scale(self, v, w):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.dim:
            raise DimensionMismatch(f"operand length {v.shape[0]} != {self.dim}")
        return v * (w if v.ndim == 1 else w[:, None])

    def w_inv_dense_blocks(self, f):
        C = self.num_outputs
        lam = self.noise_variances.reshape(self.n_points, C)
        blocks = np.zeros((self.n_points, C, C))
        idx = np.arange(C)
        blocks[:, idx, idx] = lam
        return blocks

    def subset(self, indices):
        flat = _cn_indices(indices, self.num_outputs)
        return GaussianLikelihood(self.targets[flat],
                                  self.noise_variances[flat], self.num_outputs)


class _DiagonalHessianLikelihood(Likelihood):
    """Shared plumbing for single-output models with diagonal W."""

    def _w_diag(self, f) -> np.ndarray:
        raise NotImplementedError

    def _w_inv_diag(self, f) -> np.ndarray:
        raise NotImplementedError

    def w_matvec(self, f, v):
        f = _check_latent(f, self.dim)
        return self._apply_diag(self._w_diag(f), v)

    def w_inv_matvec(self, f, v, counter=None):
        f = _check_latent(f, self.dim)
        return self._apply_diag(self._w_inv_diag(f), v)

    def _apply_diag(self, w, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.dim:
            raise DimensionMismatch(f"operand length {v.shape[0]} != {self.dim}")
        return v * (w if v.ndim == 1 else w[:, None])

    def w_inv_dense_blocks(self, f):
        return self._w_inv_diag(_check_latent(f, self.dim)).reshape(-1, 1, 1)


class PoissonLikelihood(_DiagonalHessianLikelihood):
    """Poisson counts with log link: rate = exp(f)."""

    def __init__(self, counts):
        counts = np.asarray(counts)
        if (counts < 0).any():
            raise InvalidInput("Poisson counts must be nonnegative")
        super().__init__(np.asarray(counts, dtype=np.float64))
        # log(y!) kept so log-likelihood values are absolute, not relative
        self._log_norm = float(np.sum(gammaln(self.targets + 1.0)))

    def log_lik(self, f):
        f = _check_latent(f, self.dim)
        return float(np.sum(self.targets * f - np.exp(f)) - self._log_norm)

    def grad_log_lik(self, f):
        f = _check_latent(f, self.dim)
        return self.targets - np.exp(f)

    def _w_diag(self, f):
        return np.exp(f)

    def _w_inv_diag(self, f):
        return np.exp(-f)

    def subset(self, indices):
        return PoissonLikelihood(self.targets[np.asarray(indices)])


class BernoulliLogisticLikelihood(_DiagonalHessianLikelihood):
    """Binary labels in {0, 1} through a single logistic latent."""

    def __init__(self, labels):
        labels = np.asarray(labels)
        if not np.isin(labels, (0, 1)).all():
            raise InvalidInput("binary labels must be in {0, 1}")
        super().__init__(np.asarray(labels, dtype=np.float64))

    def log_lik(self, f):
        f = _check_latent(f, self.dim)
        # y*f - log(1 + e^f), stable via logaddexp
        return float(np.sum(self.targets * f - np.logaddexp(0.0, f)))

    def grad_log_lik(self, f):
        f = _check_latent(f, self.dim)
        return self.targets - expit(f)

    def _w_diag(self, f):
        s = expit(f)
        return s * (1.0 - s)

    def _w_inv_diag(self, f):
        s = np.clip(expit(f), PROB_FLOOR, 1.0 - PROB_FLOOR)
        return 1.0 / (s * (1.0 - s))

    def subset(self, indices):
        return BernoulliLogisticLikelihood(self.targets[np.asarray(indices)])


class SoftmaxLikelihood(Likelihood):
    """Categorical labels through a softmax link over C latent outputs.

    W(f) is block-diagonal with singular per-point blocks
    diag(pi_n) - pi_n pi_n', so products use the explicit Moore-Penrose
    pseudo-inverse (center, scale by 1/pi, center), costing O(N*C).
    """

    def __init__(self, labels, num_classes):
        labels = np.asarray(labels)
        self.num_outputs = int(num_classes)
        if self.num_outputs < 2:
            raise InvalidInput("softmax needs at least two classes")
        if (labels < 0).any() or (labels >= self.num_outputs).any():
            raise InvalidInput(f"labels must lie in [0, {self.num_outputs})")
        super().__init__(np.asarray(labels, dtype=np.int64))

    def probabilities(self, f) -> np.ndarray:
        """Per-point softmax outputs, shape (N, C), max-subtracted."""
        f = _check_latent(f, self.dim)
        return softmax_rows(f.reshape(self.n_points, self.num_outputs))

    def log_lik(self, f):
        f = _check_latent(f, self.dim)
        F = f.reshape(self.n_points, self.num_outputs)
        fmax = F.max(axis=1)
        lse = fmax + np.log(np.exp(F - fmax[:, None]).sum(axis=1))
        return float(np.sum(F[np.arange(self.n_points), self.targets] - lse))

    def grad_log_lik(self, f):
        G = -self.probabilities(f)
        G[np.arange(self.n_points), self.targets] += 1.0
        return G.ravel()

    def w_matvec(self, f, v):
        pi = self.probabilities(f)
        V = self._blocked(v)
        out = pi[..., None] * V - pi[..., None] * (pi[:, None, :] @ V)
        return out.reshape(v.shape)

    def w_inv_matvec(self, f, v, counter=None):
        pi = self.probabilities(f)
        V = self._blocked(v)
        out = softmax_pinv_apply(pi, V, counter=counter)
        return out.reshape(v.shape)

    def _blocked(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.dim:
            raise DimensionMismatch(f"operand length {v.shape[0]} != {self.dim}")
        cols = 1 if v.ndim == 1 else v.shape[1]
        return v.reshape(self.n_points, self.num_outputs, cols)

    def w_inv_dense_blocks(self, f):
        pi = np.clip(self.probabilities(f), PROB_FLOOR, None)
        C = self.num_outputs
        P = np.eye(C) - np.ones((C, C)) / C
        inv_pi = np.zeros((self.n_points, C, C))
        idx = np.arange(C)
        inv_pi[:, idx, idx] = 1.0 / pi
        return np.einsum("ij,njk,kl->nil", P, inv_pi, P)

    def subset(self, indices):
        return SoftmaxLikelihood(self.targets[np.asarray(indices)],
                                 self.num_outputs)


def softmax_rows(F: np.ndarray) -> np.ndarray:
    Z = F - F.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def softmax_pinv_apply(pi: np.ndarray, V: np.ndarray, counter=None) -> np.ndarray:
    """Apply the blockwise softmax pseudo-inverse to (N, C, k) columns.

    Computes (I - 11'/C) diag(1/pi_n) (I - 11'/C) v_n per point. The
    optional counter tallies scalar operations; the total is exactly
    6 * N * C per column, i.e. linear in the number of latent entries.
    """
    scale = 1.0 / np.clip(pi, PROB_FLOOR, None)
    U = V - V.mean(axis=1, keepdims=True)
    U *= scale[..., None]
    U -= U.mean(axis=1, keepdims=True)
    if counter is not None:
        counter.add(pi.size)  # clip
        counter.add(pi.size)  # reciprocal
        counter.add(V.size)   # first row mean
        counter.add(V.size)   # first centering subtraction
        counter.add(V.size)   # diagonal scaling
        counter.add(V.size)   # second row mean
        counter.add(V.size)   # second centering subtraction
    return U


def _cn_indices(point_indices, num_outputs):
    """Flat CN indices covering every output of the given points."""
    base = np.asarray(point_indices, dtype=np.int64) * num_outputs
    return (base[:, None] + np.arange(num_outputs)[None, :]).ravel()


def make_likelihood(family: str, dataset, noise_variance: float = 1.0) -> Likelihood:
    """Build the observation model matching a dataset's target domain."""
    y = dataset.targets
    if family == "gaussian":
        if dataset.domain != "real":
            raise InvalidInput("gaussian likelihood expects real targets")
        return GaussianLikelihood(np.asarray(y, dtype=np.float64), noise_variance)
    if family == "poisson":
        if dataset.domain != "counts":
            raise InvalidInput("poisson likelihood expects count targets")
        return PoissonLikelihood(y)
    if family == "bernoulli_logistic":
        if dataset.domain != "binary":
            raise InvalidInput("logistic likelihood expects binary targets")
        return BernoulliLogisticLikelihood(y)
    if family == "softmax":
        if dataset.domain != "class-index":
            raise InvalidInput("softmax likelihood expects class-index targets")
        return SoftmaxLikelihood(y, dataset.num_classes)
    raise InvalidInput(f"unknown likelihood family {family!r}")
