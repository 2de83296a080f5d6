import numpy as np
import pytest

from ncgp.exceptions import DimensionMismatch, InvalidInput
from ncgp.gp import Dataset
from ncgp.likelihoods import (BernoulliLogisticLikelihood, GaussianLikelihood,
                              OpCount, PoissonLikelihood, SoftmaxLikelihood,
                              make_likelihood, softmax_pinv_apply,
                              softmax_rows)

FD_STEP = 1e-5


def fd_gradient(fun, f, step=FD_STEP):
    g = np.zeros_like(f)
    for i in range(f.size):
        up, down = f.copy(), f.copy()
        up[i] += step
        down[i] -= step
        g[i] = (fun(up) - fun(down)) / (2 * step)
    return g


def fd_hessian(fun, f, step=1e-4):
    n = f.size
    H = np.zeros((n, n))
    for i in range(n):
        up, down = f.copy(), f.copy()
        up[i] += step
        down[i] -= step
        H[:, i] = (fd_gradient(fun, up, step) - fd_gradient(fun, down, step)) / (2 * step)
    return 0.5 * (H + H.T)


def sample_models(rng, n=6):
    yield GaussianLikelihood(rng.normal(size=n), 0.5 + rng.random(n))
    yield PoissonLikelihood(rng.poisson(2.0, size=n))
    yield BernoulliLogisticLikelihood(rng.integers(0, 2, size=n))
    yield SoftmaxLikelihood(rng.integers(0, 3, size=n), 3)


class TestLogLik:
    def test_gaussian_zero_residual(self):
        y = np.array([0.4, -1.0, 2.0])
        model = GaussianLikelihood(y, 1.0)
        assert model.log_lik(y) == pytest.approx(-1.5 * np.log(2 * np.pi))

    def test_poisson_scalar_value(self):
        model = PoissonLikelihood(np.array([1]))
        # y log(rate) - rate - log(y!) at rate 1: 0 - 1 - 0
        assert model.log_lik(np.zeros(1)) == pytest.approx(-1.0)

    def test_logistic_symmetric_at_zero(self):
        for labels in ([0, 1, 1], [1, 0, 0]):
            model = BernoulliLogisticLikelihood(np.array(labels))
            assert model.log_lik(np.zeros(3)) == pytest.approx(-3 * np.log(2))

    def test_softmax_uniform_at_zero(self):
        model = SoftmaxLikelihood(np.array([0, 2, 1]), 3)
        assert model.log_lik(np.zeros(9)) == pytest.approx(-3 * np.log(3))

    def test_nonfinite_rejected(self):
        model = PoissonLikelihood(np.array([1, 2]))
        with pytest.raises(InvalidInput):
            model.log_lik(np.array([0.0, np.inf]))


class TestGradients:
    def test_poisson_matched_rate(self):
        model = PoissonLikelihood(np.array([1]))
        np.testing.assert_allclose(model.grad_log_lik(np.zeros(1)), [0.0])

    def test_poisson_scalar(self):
        model = PoissonLikelihood(np.array([3]))
        np.testing.assert_allclose(model.grad_log_lik(np.array([np.log(2.0)])),
                                   [1.0])

    def test_softmax_uniform(self):
        model = SoftmaxLikelihood(np.array([0]), 3)
        np.testing.assert_allclose(model.grad_log_lik(np.zeros(3)),
                                   [2 / 3, -1 / 3, -1 / 3], atol=1e-12)

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(10)
        for model in sample_models(rng):
            f = rng.normal(size=model.dim)
            grad = model.grad_log_lik(f)
            fd = fd_gradient(model.log_lik, f)
            scale = max(np.linalg.norm(fd), 1.0)
            assert np.linalg.norm(grad - fd) <= 1e-6 * scale


class TestWProducts:
    def test_poisson_identity_at_zero(self):
        model = PoissonLikelihood(np.array([1, 2, 0]))
        v = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(model.w_matvec(np.zeros(3), v), v)
        np.testing.assert_array_equal(model.w_inv_matvec(np.zeros(3), v), v)

    def test_softmax_annihilates_constants(self):
        model = SoftmaxLikelihood(np.array([0]), 2)
        out = model.w_matvec(np.zeros(2), np.array([1.0, 1.0]))
        np.testing.assert_allclose(out, [0.0, 0.0], atol=1e-14)

    def test_quadratic_form_nonnegative(self):
        rng = np.random.default_rng(11)
        for model in sample_models(rng):
            for _ in range(50):
                f = rng.normal(size=model.dim)
                v = rng.normal(size=model.dim)
                assert v @ model.w_matvec(f, v) >= -1e-10

    def test_matches_finite_difference_hessian(self):
        rng = np.random.default_rng(12)
        for model in sample_models(rng, n=3):
            f = 0.5 * rng.normal(size=model.dim)
            H = -fd_hessian(model.log_lik, f)
            W = np.column_stack([model.w_matvec(f, e)
                                 for e in np.eye(model.dim)])
            assert np.abs(W - H).max() <= 1e-5 * max(np.abs(H).max(), 1.0)

    def test_matrix_operands(self):
        rng = np.random.default_rng(13)
        for model in sample_models(rng):
            f = rng.normal(size=model.dim)
            V = rng.normal(size=(model.dim, 3))
            cols = np.column_stack([model.w_matvec(f, V[:, k]) for k in range(3)])
            np.testing.assert_allclose(model.w_matvec(f, V), cols, atol=1e-14)
            cols = np.column_stack([model.w_inv_matvec(f, V[:, k]) for k in range(3)])
            np.testing.assert_allclose(model.w_inv_matvec(f, V), cols, atol=1e-14)


class TestWInverse:
    def test_softmax_uniform_block_c2(self):
        model = SoftmaxLikelihood(np.array([0]), 2)
        out = model.w_inv_matvec(np.zeros(2), np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-12)

    def test_softmax_pinv_annihilates_constants(self):
        rng = np.random.default_rng(14)
        model = SoftmaxLikelihood(rng.integers(0, 4, size=5), 4)
        f = rng.normal(size=20)
        out = model.w_inv_matvec(f, np.tile(rng.normal(), 20))
        np.testing.assert_allclose(out, np.zeros(20), atol=1e-9)

    def test_inverse_composition_identity(self):
        rng = np.random.default_rng(15)
        for model in sample_models(rng):
            f = rng.normal(size=model.dim)
            v = rng.normal(size=model.dim)
            out = model.w_inv_matvec(f, model.w_matvec(f, v))
            if isinstance(model, SoftmaxLikelihood):
                blocks = v.reshape(model.n_points, model.num_outputs)
                expect = (blocks - blocks.mean(axis=1, keepdims=True)).ravel()
            else:
                expect = v
            np.testing.assert_allclose(out, expect, atol=1e-10)

    def test_pseudo_inverse_axioms(self):
        rng = np.random.default_rng(16)
        for C in (2, 3, 5):
            for _ in range(30):
                logits = rng.normal(size=C)
                pi = softmax_rows(logits[None, :])[0]
                W = np.diag(pi) - np.outer(pi, pi)
                P = np.eye(C) - np.ones((C, C)) / C
                Wp = P @ np.diag(1.0 / pi) @ P
                np.testing.assert_allclose(W @ Wp @ W, W, atol=1e-9)
                np.testing.assert_allclose(Wp @ W @ Wp, Wp, atol=1e-9)

    def test_matches_dense_moore_penrose(self):
        rng = np.random.default_rng(17)
        for C in (2, 3, 5):
            labels = rng.integers(0, C, size=4)
            model = SoftmaxLikelihood(labels, C)
            f = rng.normal(size=4 * C)
            pi = model.probabilities(f)
            for n in range(4):
                W_n = np.diag(pi[n]) - np.outer(pi[n], pi[n])
                dense_pinv = np.linalg.pinv(W_n)
                v = np.zeros(4 * C)
                block = rng.normal(size=C)
                v[n * C:(n + 1) * C] = block
                out = model.w_inv_matvec(f, v)[n * C:(n + 1) * C]
                np.testing.assert_allclose(out, dense_pinv @ block, atol=1e-9)

    def test_operation_count_is_linear(self):
        rng = np.random.default_rng(18)
        counts = {}
        for n, C in ((50, 4), (100, 4), (50, 8), (200, 16)):
            pi = softmax_rows(rng.normal(size=(n, C)))
            V = rng.normal(size=(n, C, 1))
            counter = OpCount()
            softmax_pinv_apply(pi, V, counter=counter)
            counts[(n, C)] = counter.total
            assert counter.total == 7 * n * C
        assert counts[(100, 4)] == 2 * counts[(50, 4)]
        assert counts[(50, 8)] == 2 * counts[(50, 4)]

    def test_logistic_clamped_at_saturation(self):
        model = BernoulliLogisticLikelihood(np.array([1]))
        out = model.w_inv_matvec(np.array([500.0]), np.array([1.0]))
        assert np.isfinite(out).all()


class TestFactory:
    def test_families_dispatch(self):
        rng = np.random.default_rng(19)
        X = rng.normal(size=(5, 1))
        counts = Dataset(X, rng.poisson(1.0, 5), "counts")
        assert isinstance(make_likelihood("poisson", counts), PoissonLikelihood)
        binary = Dataset(X, rng.integers(0, 2, 5), "binary")
        assert isinstance(make_likelihood("bernoulli_logistic", binary),
                          BernoulliLogisticLikelihood)
        classes = Dataset(X, rng.integers(0, 3, 5), "class-index", 3)
        model = make_likelihood("softmax", classes)
        assert isinstance(model, SoftmaxLikelihood)
        assert model.num_outputs == 3
        real = Dataset(X, rng.normal(size=5), "real")
        assert isinstance(make_likelihood("gaussian", real, 0.3),
                          GaussianLikelihood)

    def test_domain_mismatch_rejected(self):
        rng = np.random.default_rng(20)
        counts = Dataset(rng.normal(size=(4, 1)), rng.poisson(1.0, 4), "counts")
        with pytest.raises(InvalidInput):
            make_likelihood("softmax", counts)

    def test_subset_restriction(self):
        rng = np.random.default_rng(21)
        model = SoftmaxLikelihood(rng.integers(0, 3, size=8), 3)
        sub = model.subset(np.array([1, 4, 6]))
        assert sub.n_points == 3
        np.testing.assert_array_equal(sub.targets, model.targets[[1, 4, 6]])
        gauss = GaussianLikelihood(rng.normal(size=8), np.arange(1.0, 9.0))
        gsub = gauss.subset(np.array([0, 7]))
        np.testing.assert_array_equal(gsub.noise_variances, [1.0, 8.0])

    def test_dimension_mismatch(self):
        model = PoissonLikelihood(np.array([1, 2]))
        with pytest.raises(DimensionMismatch):
            model.w_matvec(np.zeros(2), np.zeros(3))
