"""Dense numeric substrate: truncated symmetric eigendecompositions, SPD
solves, a reference conjugate-gradient iteration, and low-rank operators
kept in root form.

Everything here works on plain float64 ndarrays and is pure; the
matrix-free machinery in :mod:`ncgp.solver` builds on these primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .exceptions import CgBreakdown, DimensionMismatch, InvalidInput, NotPositiveDefinite


@dataclass(frozen=True)
class LowRankRoot:
    """Root Q of the PSD operator Q @ Q.T.

    The represented operator is never densified; products are evaluated as
    Q @ (Q.T @ w), costing O(rank * dim). Columns are scaled search
    directions d / sqrt(eta), so the operator is PSD by construction.
    """

    columns: np.ndarray  # (dim, rank)

    @staticmethod
    def zero(dim: int) -> "LowRankRoot":
        return LowRankRoot(np.zeros((dim, 0)))

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    @property
    def rank(self) -> int:
        return self.columns.shape[1]


@dataclass(frozen=True)
class EigenPairs:
    """Orthonormal eigenvectors (columns) with eigenvalues sorted descending."""

    vectors: np.ndarray  # (n, r)
    values: np.ndarray   # (r,)


def apply_lowrank(root: LowRankRoot, w: np.ndarray) -> np.ndarray:
    """Return (Q @ Q.T) @ w without forming the dense operator.

    ``w`` may be a vector or a matrix of column vectors.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape[0] != root.dim:
        raise DimensionMismatch(
            f"operand has leading dimension {w.shape[0]}, expected {root.dim}")
    if root.rank == 0:
        return np.zeros_like(w)
    return root.columns @ (root.columns.T @ w)


def sym_eigh_truncated(M: np.ndarray, rank_bound: int) -> EigenPairs:
    """Eigendecompose a symmetric matrix and keep the largest eigenpairs.

    The input is symmetrized as (M + M.T) / 2 before factorization, so
    round-off asymmetry in Gram matrices is harmless. Among all symmetric
    rank-``rank_bound`` matrices, the returned U @ diag(vals) @ U.T is a
    best Frobenius approximation of M.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {M.shape}")
    if not np.isfinite(M).all():
        raise InvalidInput("matrix contains non-finite entries")
    n = M.shape[0]
    if not 0 <= rank_bound <= n:
        raise DimensionMismatch(f"rank bound {rank_bound} outside [0, {n}]")
    if n == 0 or rank_bound == 0:
        return EigenPairs(np.zeros((n, 0)), np.zeros(0))
    sym = 0.5 * (M + M.T)
    values, vectors = np.linalg.eigh(sym)
    order = np.argsort(values)[::-1][:rank_bound]
    return EigenPairs(np.ascontiguousarray(vectors[:, order]), values[order])


def dense_spd_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b for symmetric positive definite A via Cholesky.

    Raises :class:`NotPositiveDefinite` carrying the order of the first
    non-positive leading minor.
    """
    c, x = spd_factor_solve(A, b)
    return x


def spd_factor_solve(A, b):
    """Cholesky-factor A and solve; returns (lower factor, solution)."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise DimensionMismatch(
            f"right-hand side length {b.shape[0]} != system size {A.shape[0]}")
    c, info = lapack.dpotrf(A, lower=1)
    if info > 0:
        raise NotPositiveDefinite(info)
    if info < 0:
        raise InvalidInput(f"illegal value in argument {-info} of dpotrf")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise InvalidInput(f"dpotrs failed with info={info}")
    return c, x


def cholesky_inverse_root(A):
    """Return upper-triangular Q with Q @ Q.T = inv(A), A symmetric PD.

    Q is the inverse transpose of the lower Cholesky factor; used to carry
    exact dense posteriors in the same root form as iterative ones.
    """
    A = np.asarray(A, dtype=np.float64)
    c, info = lapack.dpotrf(A, lower=1)
    if info > 0:
        raise NotPositiveDefinite(info)
    inv_c, info = lapack.dtrtri(c, lower=1)
    if info != 0:
        raise InvalidInput(f"dtrtri failed with info={info}")
    return inv_c.T


def cg_reference(apply_A, b: np.ndarray, iters: int) -> np.ndarray:
    """Textbook conjugate gradients from a zero initial guess.

    Runs exactly ``iters`` steps (earlier if the residual is exactly zero,
    after which the iterate no longer changes). ``apply_A`` must represent
    an SPD operator; non-positive curvature raises :class:`CgBreakdown`.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    rs = r @ r
    if rs == 0.0:
        return x
    p = r.copy()
    for k in range(iters):
        Ap = apply_A(p)
        curv = p @ Ap
        if curv <= 0.0:
            raise CgBreakdown(k, curv)
        alpha = rs / curv
        x += alpha * p
        r -= alpha * Ap
        rs_new = r @ r
        if rs_new == 0.0:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x
