"""Multi-output GP priors: stationary kernels, the CN/NC layout convention,
and tiled matrix-free products with the prior covariance.

Vectors of length N*C carry one value per (data point, output) pair. The
public convention everywhere is CN layout: the output index moves fastest,
so entry n*C + c belongs to point n and output c. NC layout (point index
fastest) is used internally only, because with independent outputs the
prior covariance is block-diagonal there.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatch, InvalidInput

DOMAIN_TAGS = ("counts", "binary", "class-index", "real")


class Ordering(enum.Enum):
    CN = "cn"  # output index fastest
    NC = "nc"  # point index fastest


def reorder(v: np.ndarray, src: Ordering, dst: Ordering,
            n_points: int, n_outputs: int) -> np.ndarray:
    """Permute a length N*C vector between CN and NC layouts."""
    v = np.asarray(v)
    if v.shape[0] != n_points * n_outputs:
        raise DimensionMismatch(
            f"vector length {v.shape[0]} != {n_points} * {n_outputs}")
    if src == dst:
        return v.copy()
    if src == Ordering.CN:
        return v.reshape(n_points, n_outputs).T.ravel().copy()
    return v.reshape(n_outputs, n_points).T.ravel().copy()


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel: family, lengthscale and variance (outputscale).

    rbf:      s2 * exp(-d^2 / (2 l^2))
    matern32: s2 * (1 + sqrt(3) d / l) * exp(-sqrt(3) d / l)
    """

    family: str
    lengthscale: float
    outputscale: float

    def __post_init__(self):
        if self.family not in ("rbf", "matern32"):
            raise InvalidInput(f"unknown kernel family {self.family!r}")
        if not (self.lengthscale > 0 and np.isfinite(self.lengthscale)):
            raise InvalidInput("lengthscale must be a positive finite real")
        if not (self.outputscale > 0 and np.isfinite(self.outputscale)):
            raise InvalidInput("outputscale must be a positive finite real")


def kernel_eval(spec: KernelSpec, x: np.ndarray, x2: np.ndarray) -> float:
    """Evaluate the kernel on a single pair of input vectors."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x2 = np.atleast_1d(np.asarray(x2, dtype=np.float64))
    if not (np.isfinite(x).all() and np.isfinite(x2).all()):
        raise InvalidInput("kernel inputs must be finite")
    if x.shape != x2.shape:
        raise DimensionMismatch(f"input shapes differ: {x.shape} vs {x2.shape}")
    d2 = float(((x - x2) ** 2).sum())
    return float(kernel_from_sqdist(spec, np.array([d2]))[0])


def kernel_from_sqdist(spec: KernelSpec, d2: np.ndarray) -> np.ndarray:
    """Kernel values from squared Euclidean distances (vectorized).

    Works in place on temporaries; these blocks dominate the cost of every
    covariance product.
    """
    d2 = np.maximum(d2, 0.0)
    if spec.family == "rbf":
        out = d2 / (-2.0 * spec.lengthscale ** 2)
        np.exp(out, out=out)
        out *= spec.outputscale
        return out
    a = d2 * 3.0
    np.sqrt(a, out=a)
    a /= spec.lengthscale
    out = np.negative(a)
    np.exp(out, out=out)
    a += 1.0
    out *= a
    out *= spec.outputscale
    return out


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, rows of A against rows of B.

    Accumulated feature by feature: every entry is computed independently
    of the block shape, which keeps tiled products bit-reproducible (a
    gemm-based a^2+b^2-2ab would round differently per tile height).
    """
    out = np.zeros((A.shape[0], B.shape[0]))
    for d in range(A.shape[1]):
        diff = A[:, d, None] - B[None, :, d]
        diff *= diff
        out += diff
    return out


@dataclass(frozen=True)
class MultiOutputPrior:
    """Independent zero- or constant-mean GPs, one kernel per output."""

    kernels: tuple[KernelSpec, ...]
    mean: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.kernels) < 1:
            raise InvalidInput("at least one output kernel is required")
        if self.mean and len(self.mean) != len(self.kernels):
            raise DimensionMismatch("one mean constant per output is required")
        if not self.mean:
            object.__setattr__(self, "mean", (0.0,) * len(self.kernels))

    @property
    def num_outputs(self) -> int:
        return len(self.kernels)

    def mean_vector(self, n_points: int) -> np.ndarray:
        """Prior mean at n_points inputs, CN layout."""
        return np.tile(np.asarray(self.mean, dtype=np.float64), n_points)

    def marginal_prior_variance(self) -> np.ndarray:
        """k_c(x, x) per output; equals the outputscale for stationary kernels."""
        return np.array([k.outputscale for k in self.kernels])


def prior_matvec(prior: MultiOutputPrior, X: np.ndarray, v: np.ndarray,
                 tile: int = 256) -> np.ndarray:
    """Product of the prior covariance with a CN-layout vector, tiled.

    Row tiles of the per-output Gram matrices are materialized one at a
    time, never the full covariance. Each output row is reduced with
    numpy's pairwise sum over the full row, so the result is bit-identical
    for every tile size.
    """
    X = np.asarray(X, dtype=np.float64)
    n, C = X.shape[0], prior.num_outputs
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != n * C:
        raise DimensionMismatch(f"vector length {v.shape[0]} != {n} * {C}")
    if tile < 1:
        raise InvalidInput("tile size must be >= 1")
    v_nc = v.reshape(n, C).T  # (C, n), contiguous rows per output
    out_nc = np.empty((C, n))
    for lo in range(0, n, tile):
        hi = min(lo + tile, n)
        d2 = _sqdist(X[lo:hi], X)
        blocks: dict[KernelSpec, np.ndarray] = {}
        for c, spec in enumerate(prior.kernels):
            block = blocks.get(spec)
            if block is None:
                block = kernel_from_sqdist(spec, d2)
                blocks[spec] = block
            out_nc[c, lo:hi] = (block * v_nc[c]).sum(axis=1)
    return out_nc.T.ravel()


def cross_covariance(prior: MultiOutputPrior, X_train: np.ndarray,
                     X_test: np.ndarray) -> np.ndarray:
    """Dense cross-covariance, (N_test*C) x (N_train*C), CN layout both ways.

    Outputs are independent, so blocks couple only matching output indices.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_test = np.asarray(X_test, dtype=np.float64)
    if X_train.ndim != 2 or X_test.ndim != 2 or X_train.shape[1] != X_test.shape[1]:
        raise DimensionMismatch(
            f"incompatible input shapes {X_test.shape} vs {X_train.shape}")
    nt, n, C = X_test.shape[0], X_train.shape[0], prior.num_outputs
    d2 = _sqdist(X_test, X_train)
    out = np.zeros((nt * C, n * C))
    blocks: dict[KernelSpec, np.ndarray] = {}
    for c, spec in enumerate(prior.kernels):
        block = blocks.get(spec)
        if block is None:
            block = kernel_from_sqdist(spec, d2)
            blocks[spec] = block
        out[c::C, c::C] = block
    return out


@dataclass(frozen=True)
class Dataset:
    """Inputs, targets and a tag describing the target domain."""

    inputs: np.ndarray       # (N, D)
    targets: np.ndarray      # (N,), dtype per domain
    domain: str              # one of DOMAIN_TAGS
    num_classes: int = 0     # used when domain == "class-index"

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        object.__setattr__(self, "inputs", X)
        if X.ndim != 2 or X.shape[0] < 1:
            raise DimensionMismatch("inputs must be a non-empty (N, D) matrix")
        if self.domain not in DOMAIN_TAGS:
            raise InvalidInput(f"unknown domain tag {self.domain!r}")
        if self.domain == "real":
            y = np.asarray(self.targets, dtype=np.float64)
        else:
            y = np.asarray(self.targets)
            if not np.allclose(y, np.round(np.asarray(y, dtype=np.float64))):
                raise InvalidInput(f"{self.domain} targets must be integers")
            y = np.asarray(np.round(np.asarray(y, dtype=np.float64)), dtype=np.int64)
        object.__setattr__(self, "targets", y)
        if y.shape != (X.shape[0],):
            raise DimensionMismatch("one target per input row is required")
        if self.domain == "counts" and (y < 0).any():
            raise InvalidInput("counts must be nonnegative")
        if self.domain == "binary" and not np.isin(y, (0, 1)).all():
            raise InvalidInput("binary labels must be in {0, 1}")
        if self.domain == "class-index":
            k = int(self.num_classes) if self.num_classes else int(y.max()) + 1
            object.__setattr__(self, "num_classes", k)
            if (y < 0).any() or (y >= k).any():
                raise InvalidInput(f"class indices must lie in [0, {k})")

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]


def _format_value(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_dataset_csv(path, dataset: Dataset) -> None:
    """Write a dataset as CSV with header x_0..x_{D-1}, y."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x_{d}" for d in range(dataset.n_features)] + ["y"])
    int_targets = dataset.domain != "real"
    for row, y in zip(dataset.inputs, dataset.targets):
        writer.writerow([_format_value(x) for x in row]
                        + [str(int(y)) if int_targets else _format_value(y)])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_dataset_csv(path, domain: str, num_classes: int = 0) -> Dataset:
    """Read a dataset CSV written by :func:`write_dataset_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if not header or header[-1] != "y":
        raise InvalidInput(f"{path}: expected header ending in 'y'")
    x_cols = [h for h in header[:-1] if h.startswith("x_")]
    if len(x_cols) != len(header) - 1:
        raise InvalidInput(f"{path}: expected feature columns named x_0..x_{{D-1}}")
    if not rows:
        raise InvalidInput(f"{path}: dataset has no rows")
    data = np.array([[float(x) for x in row] for row in rows])
    return Dataset(inputs=data[:, :-1], targets=data[:, -1],
                   domain=domain, num_classes=num_classes)


def write_sidecar_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
