import numpy as np
import pytest

from ncgp.exceptions import (CgBreakdown, DimensionMismatch, InvalidInput,
                             NotPositiveDefinite)
from ncgp.linalg import (LowRankRoot, apply_lowrank, cg_reference,
                         cholesky_inverse_root, dense_spd_solve,
                         sym_eigh_truncated)


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return A @ A.T + scale * np.eye(n)


class TestApplyLowRank:
    def test_rank_zero_is_zero_operator(self):
        root = LowRankRoot.zero(5)
        out = apply_lowrank(root, np.arange(5.0))
        np.testing.assert_array_equal(out, np.zeros(5))

    def test_single_column_projects_onto_e1(self):
        root = LowRankRoot(np.array([[1.0], [0.0]]))
        out = apply_lowrank(root, np.array([3.0, 5.0]))
        np.testing.assert_allclose(out, [3.0, 0.0])

    def test_matches_dense_materialization(self):
        rng = np.random.default_rng(7)
        Q = rng.normal(size=(8, 3))
        w = rng.normal(size=8)
        dense = Q @ Q.T
        np.testing.assert_allclose(apply_lowrank(LowRankRoot(Q), w),
                                   dense @ w, atol=1e-12)

    def test_result_lies_in_column_span(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            Q = rng.normal(size=(10, 4))
            w = rng.normal(size=10)
            out = apply_lowrank(LowRankRoot(Q), w)
            _, residual, _, _ = np.linalg.lstsq(Q, out, rcond=None)
            assert residual.size == 0 or residual[0] <= 1e-10

    def test_matrix_operand(self):
        rng = np.random.default_rng(11)
        Q = rng.normal(size=(6, 2))
        W = rng.normal(size=(6, 3))
        np.testing.assert_allclose(apply_lowrank(LowRankRoot(Q), W),
                                   Q @ Q.T @ W, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            apply_lowrank(LowRankRoot.zero(4), np.zeros(5))


class TestSymEighTruncated:
    def test_identity(self):
        pairs = sym_eigh_truncated(np.eye(2), 2)
        np.testing.assert_allclose(pairs.values, [1.0, 1.0])
        np.testing.assert_allclose(pairs.vectors.T @ pairs.vectors, np.eye(2),
                                   atol=1e-12)

    def test_diagonal_truncation(self):
        pairs = sym_eigh_truncated(np.diag([3.0, 1.0]), 1)
        np.testing.assert_allclose(pairs.values, [3.0])
        np.testing.assert_allclose(np.abs(pairs.vectors[:, 0]), [1.0, 0.0],
                                   atol=1e-12)

    def test_full_rank_reconstruction(self):
        rng = np.random.default_rng(5)
        M = rng.normal(size=(6, 6))
        M = 0.5 * (M + M.T)
        pairs = sym_eigh_truncated(M, 6)
        recon = pairs.vectors @ np.diag(pairs.values) @ pairs.vectors.T
        assert np.linalg.norm(M - recon) <= 1e-9 * np.linalg.norm(M)

    def test_reconstruction_invariant_random(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            n = rng.integers(2, 9)
            M = rng.normal(size=(n, n))
            M = 0.5 * (M + M.T)
            pairs = sym_eigh_truncated(M, int(n))
            recon = pairs.vectors @ np.diag(pairs.values) @ pairs.vectors.T
            assert (np.linalg.norm(M - recon, "fro")
                    <= 1e-9 * np.linalg.norm(M, "fro"))

    def test_values_sorted_descending(self):
        rng = np.random.default_rng(23)
        M = random_spd(rng, 7)
        pairs = sym_eigh_truncated(M, 5)
        assert np.all(np.diff(pairs.values) <= 0)

    def test_orthonormal_columns(self):
        rng = np.random.default_rng(31)
        M = random_spd(rng, 9)
        pairs = sym_eigh_truncated(M, 6)
        np.testing.assert_allclose(pairs.vectors.T @ pairs.vectors, np.eye(6),
                                   atol=1e-10)

    def test_best_rank_r_approximation(self):
        # truncation must beat any other symmetric rank-R candidate built
        # from a different eigenpair subset
        rng = np.random.default_rng(41)
        M = random_spd(rng, 6)
        pairs = sym_eigh_truncated(M, 6)
        best = pairs.vectors[:, :2] @ np.diag(pairs.values[:2]) @ pairs.vectors[:, :2].T
        worse = pairs.vectors[:, 2:4] @ np.diag(pairs.values[2:4]) @ pairs.vectors[:, 2:4].T
        assert np.linalg.norm(M - best, "fro") <= np.linalg.norm(M - worse, "fro") + 1e-12

    def test_nonfinite_rejected(self):
        M = np.array([[1.0, np.nan], [np.nan, 1.0]])
        with pytest.raises(InvalidInput):
            sym_eigh_truncated(M, 1)

    def test_rank_bounds(self):
        with pytest.raises(DimensionMismatch):
            sym_eigh_truncated(np.eye(3), 4)


class TestDenseSpdSolve:
    def test_identity_system(self):
        b = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(dense_spd_solve(np.eye(3), b), b)

    def test_diagonal_system(self):
        x = dense_spd_solve(np.diag([2.0, 4.0]), np.array([2.0, 4.0]))
        np.testing.assert_allclose(x, [1.0, 1.0])

    def test_random_spd_residual(self):
        rng = np.random.default_rng(2)
        A = random_spd(rng, 10)
        b = rng.normal(size=10)
        x = dense_spd_solve(A, b)
        assert np.linalg.norm(A @ x - b) <= 1e-9 * np.linalg.norm(b)

    def test_not_positive_definite_names_dimension(self):
        A = np.diag([1.0, -1.0, 1.0])
        with pytest.raises(NotPositiveDefinite) as exc:
            dense_spd_solve(A, np.ones(3))
        assert exc.value.dimension == 2

    def test_cholesky_inverse_root(self):
        rng = np.random.default_rng(9)
        A = random_spd(rng, 6)
        Q = cholesky_inverse_root(A)
        np.testing.assert_allclose(Q @ Q.T, np.linalg.inv(A), atol=1e-9)


class TestCgReference:
    def test_one_dimensional_exact_in_one_step(self):
        x = cg_reference(lambda v: 2.0 * v, np.array([4.0]), 1)
        np.testing.assert_allclose(x, [2.0])

    def test_finite_termination_matches_dense(self):
        rng = np.random.default_rng(13)
        n = 12
        A = random_spd(rng, n)
        b = rng.normal(size=n)
        x = cg_reference(lambda v: A @ v, b, n)
        np.testing.assert_allclose(x, dense_spd_solve(A, b), atol=1e-8)

    def test_zero_rhs(self):
        x = cg_reference(lambda v: v, np.zeros(4), 10)
        np.testing.assert_array_equal(x, np.zeros(4))

    def test_krylov_optimality(self):
        # iterate k minimizes the A-norm error over the k-dim Krylov space;
        # brute-force the minimizer from an explicit Krylov basis
        rng = np.random.default_rng(29)
        for trial in range(5):
            n = int(rng.integers(3, 7))
            A = random_spd(rng, n)
            b = rng.normal(size=n)
            x_star = np.linalg.solve(A, b)
            basis = []
            vec = b.copy()
            for k in range(1, n + 1):
                basis.append(vec)
                vec = A @ vec
                # orthonormalize the raw Krylov vectors before minimizing,
                # they are far too ill-conditioned to use directly
                B, _ = np.linalg.qr(np.array(basis).T)
                coef = np.linalg.solve(B.T @ A @ B, B.T @ b)
                brute = B @ coef
                iterate = cg_reference(lambda v: A @ v, b, k)
                err = iterate - brute
                assert np.sqrt(err @ A @ err) <= 1e-6 * np.sqrt(x_star @ A @ x_star)

    def test_breakdown_carries_iteration(self):
        A = np.diag([1.0, -1.0])
        with pytest.raises(CgBreakdown) as exc:
            cg_reference(lambda v: A @ v, np.array([0.0, 1.0]), 5)
        assert exc.value.iteration == 0
