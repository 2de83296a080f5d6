"""Seeded synthetic data generators for the bundled experiments.

Every generator is a pure function of its spec. Randomness comes from
Philox counter streams: the spec's ``seed`` fixes the data-generating
process (latent GP draw, mixture parameters) while ``draw_seed`` (default:
the same seed) drives the observation noise, so repeats can redraw
observations from an unchanged process. GP draws use a dense Cholesky of
the Gram matrix with 1e-10 jitter and are intended for generator-scale N.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.linalg import lapack
from scipy.special import expit

from .exceptions import InvalidInput, NotPositiveDefinite
from .gp import Dataset, KernelSpec, _sqdist, kernel_from_sqdist

GENERATOR_KINDS = ("gp-poisson-1d", "gp-binary-1d", "gp-binary-2d",
                   "gaussian-mixture-3d")

GP_JITTER = 1e-10


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    seed: int
    n: int = 100
    n_per_class: int = 100
    num_classes: int = 3
    kernel: Optional[KernelSpec] = None
    draw_seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise InvalidInput(f"unknown generator kind {self.kind!r}")
        if self.n < 1 or self.n_per_class < 1:
            raise InvalidInput("sizes must be >= 1")
        if self.kind == "gaussian-mixture-3d" and self.num_classes < 2:
            raise InvalidInput("mixture needs at least two classes")
        if self.draw_seed is None:
            object.__setattr__(self, "draw_seed", self.seed)

    def with_draw_seed(self, draw_seed: int) -> "GeneratorSpec":
        """Same process, different observation draw (repeats, test sets)."""
        return replace(self, draw_seed=draw_seed)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed, "draw_seed": self.draw_seed}
        if self.kind == "gaussian-mixture-3d":
            d["n_per_class"] = self.n_per_class
            d["num_classes"] = self.num_classes
        else:
            d["n"] = self.n
            k = self.kernel or _default_kernel(self.kind)
            d["kernel"] = {"family": k.family, "lengthscale": k.lengthscale,
                           "outputscale": k.outputscale}
        return d


def _default_kernel(kind: str) -> KernelSpec:
    if kind == "gp-poisson-1d":
        return KernelSpec("rbf", lengthscale=0.1, outputscale=5.0)
    return KernelSpec("rbf", lengthscale=1.0, outputscale=5.0)


def _stream(seed: int, *tags: int) -> np.random.Generator:
    """Philox stream at a fixed counter offset; independent across tags."""
    counter = [0, 0, 0, 0]
    for i, t in enumerate(tags[:3]):
        counter[i + 1] = int(t)
    return np.random.Generator(
        np.random.Philox(key=int(seed) & (2**64 - 1), counter=counter))


def _draw_gp(X: np.ndarray, kernel: KernelSpec,
             rng: np.random.Generator) -> np.ndarray:
    gram = kernel_from_sqdist(kernel, _sqdist(X, X))
    gram[np.diag_indices_from(gram)] += GP_JITTER
    chol, info = lapack.dpotrf(gram, lower=1, overwrite_a=1)
    if info != 0:
        raise NotPositiveDefinite(info, "GP gram factorization failed")
    return np.tril(chol) @ rng.standard_normal(X.shape[0])


def gen_gp_poisson_1d(spec: GeneratorSpec):
    """Counts from a Poisson rate whose log is a GP draw on [0, 1].

    Inputs are exactly linspace(0, 1, n). Returns the dataset and the true
    log rate at those inputs.
    """
    if spec.n < 2:
        raise InvalidInput("need at least two grid points")
    kernel = spec.kernel or _default_kernel("gp-poisson-1d")
    X = np.linspace(0.0, 1.0, spec.n)[:, None]
    log_rate = _draw_gp(X, kernel, _stream(spec.seed, 1))
    counts = _stream(spec.draw_seed, 2).poisson(np.exp(log_rate))
    dataset = Dataset(inputs=X, targets=counts, domain="counts")
    return dataset, log_rate


def gen_gp_binary(spec: GeneratorSpec):
    """Bernoulli labels with a logistic link over a GP draw.

    1D inputs are sampled uniformly on [-3, 5]; 2D inputs on
    [-3, 5] x [-4, 1]. Returns the dataset and the true latent.
    """
    dims = 1 if spec.kind == "gp-binary-1d" else 2
    kernel = spec.kernel or _default_kernel(spec.kind)
    rng_x = _stream(spec.seed, 3)
    if dims == 1:
        X = rng_x.uniform(-3.0, 5.0, size=(spec.n, 1))
    else:
        X = np.column_stack([rng_x.uniform(-3.0, 5.0, size=spec.n),
                             rng_x.uniform(-4.0, 1.0, size=spec.n)])
    latent = _draw_gp(X, kernel, _stream(spec.seed, 4))
    labels = (_stream(spec.draw_seed, 5).random(spec.n)
              < expit(latent)).astype(np.int64)
    dataset = Dataset(inputs=X, targets=labels, domain="binary")
    return dataset, latent


def gen_gaussian_mixture_3d(spec: GeneratorSpec):
    """Class-labelled samples from per-class 3D Gaussians.

    Per class: mean uniform in [-1, 1]^3; covariance built from the
    eigenvectors of G G' for a random uniform 3x3 G (redrawn if G G' is
    numerically singular) and eigenvalues uniform in [0.001, 0.1].
    Returns the dataset and the mixture parameters.
    """
    C = spec.num_classes
    means, covs = [], []
    for c in range(C):
        rng = _stream(spec.seed, 6, c)
        means.append(rng.uniform(-1.0, 1.0, size=3))
        while True:
            G = rng.uniform(0.0, 1.0, size=(3, 3))
            gram = G @ G.T
            eigvals, eigvecs = np.linalg.eigh(gram)
            if eigvals[0] > 1e-12 * eigvals[-1]:
                break
        lam = rng.uniform(0.001, 0.1, size=3)
        covs.append(eigvecs @ np.diag(lam) @ eigvecs.T)

    blocks, labels = [], []
    for c in range(C):
        rng = _stream(spec.draw_seed, 7, c)
        chol = np.linalg.cholesky(covs[c])
        z = rng.standard_normal((spec.n_per_class, 3))
        blocks.append(means[c] + z @ chol.T)
        labels.append(np.full(spec.n_per_class, c, dtype=np.int64))
    dataset = Dataset(inputs=np.vstack(blocks), targets=np.concatenate(labels),
                      domain="class-index", num_classes=C)
    params = {"means": [m.tolist() for m in means],
              "covariances": [c.tolist() for c in covs]}
    return dataset, params


def generate(spec: GeneratorSpec):
    """Dispatch on the generator kind; returns (dataset, sidecar dict)."""
    sidecar = {"generator": spec.to_dict()}
    if spec.kind == "gp-poisson-1d":
        dataset, log_rate = gen_gp_poisson_1d(spec)
        sidecar["true_log_rate"] = log_rate.tolist()
    elif spec.kind in ("gp-binary-1d", "gp-binary-2d"):
        dataset, latent = gen_gp_binary(spec)
        sidecar["true_latent"] = latent.tolist()
    else:
        dataset, params = gen_gaussian_mixture_3d(spec)
        sidecar.update(params)
    sidecar["domain"] = dataset.domain
    if dataset.domain == "class-index":
        sidecar["num_classes"] = dataset.num_classes
    return dataset, sidecar
