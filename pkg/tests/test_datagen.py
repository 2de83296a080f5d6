import numpy as np
import pytest
from scipy.special import expit

from ncgp.datagen import (GeneratorSpec, gen_gaussian_mixture_3d,
                          gen_gp_binary, gen_gp_poisson_1d, generate)
from ncgp.exceptions import InvalidInput
from ncgp.gp import KernelSpec


class TestPoisson1d:
    def test_grid_is_exact_linspace(self):
        dataset, _ = gen_gp_poisson_1d(GeneratorSpec("gp-poisson-1d", seed=0))
        np.testing.assert_array_equal(dataset.inputs[:, 0],
                                      np.linspace(0.0, 1.0, 100))

    def test_counts_are_nonnegative_integers(self):
        dataset, _ = gen_gp_poisson_1d(GeneratorSpec("gp-poisson-1d", seed=1))
        assert dataset.targets.dtype == np.int64
        assert (dataset.targets >= 0).all()
        assert dataset.domain == "counts"

    def test_seed_determinism(self):
        spec = GeneratorSpec("gp-poisson-1d", seed=3, n=60)
        a, fa = gen_gp_poisson_1d(spec)
        b, fb = gen_gp_poisson_1d(spec)
        np.testing.assert_array_equal(a.targets, b.targets)
        np.testing.assert_array_equal(fa, fb)

    def test_draw_seed_redraws_counts_only(self):
        spec = GeneratorSpec("gp-poisson-1d", seed=3, n=60)
        redraw = spec.with_draw_seed(99)
        a, fa = gen_gp_poisson_1d(spec)
        b, fb = gen_gp_poisson_1d(redraw)
        np.testing.assert_array_equal(fa, fb)  # same latent process
        assert not np.array_equal(a.targets, b.targets)

    def test_counts_match_rate_scale(self):
        spec = GeneratorSpec("gp-poisson-1d", seed=5, n=400)
        dataset, log_rate = gen_gp_poisson_1d(spec)
        total_rate = np.exp(log_rate).sum()
        got = dataset.targets.sum()
        assert abs(got - total_rate) <= 4 * np.sqrt(total_rate)


class TestGaussianMixture3d:
    def test_class_counts_and_labels(self):
        spec = GeneratorSpec("gaussian-mixture-3d", seed=0, n_per_class=50,
                             num_classes=4)
        dataset, params = gen_gaussian_mixture_3d(spec)
        assert dataset.n_points == 200
        for c in range(4):
            assert (dataset.targets == c).sum() == 50

    def test_covariance_spectrum_in_recipe_range(self):
        spec = GeneratorSpec("gaussian-mixture-3d", seed=7, n_per_class=5,
                             num_classes=6)
        _, params = gen_gaussian_mixture_3d(spec)
        for cov in params["covariances"]:
            lam = np.linalg.eigvalsh(np.array(cov))
            assert lam.min() >= 0.001 - 1e-12
            assert lam.max() <= 0.1 + 1e-12

    def test_means_inside_unit_box(self):
        spec = GeneratorSpec("gaussian-mixture-3d", seed=2, n_per_class=5,
                             num_classes=5)
        _, params = gen_gaussian_mixture_3d(spec)
        means = np.array(params["means"])
        assert np.all(np.abs(means) <= 1.0)

    def test_seed_determinism_and_test_redraw(self):
        spec = GeneratorSpec("gaussian-mixture-3d", seed=4, n_per_class=20,
                             num_classes=3)
        a, pa = gen_gaussian_mixture_3d(spec)
        b, pb = gen_gaussian_mixture_3d(spec)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        test, pt = gen_gaussian_mixture_3d(spec.with_draw_seed(spec.seed + 1))
        assert pa == pt  # same mixture parameters
        assert not np.array_equal(a.inputs, test.inputs)

    def test_sample_moments_match_parameters(self):
        spec = GeneratorSpec("gaussian-mixture-3d", seed=9, n_per_class=4000,
                             num_classes=2)
        dataset, params = gen_gaussian_mixture_3d(spec)
        for c in range(2):
            pts = dataset.inputs[dataset.targets == c]
            mean = np.array(params["means"][c])
            cov = np.array(params["covariances"][c])
            np.testing.assert_allclose(pts.mean(axis=0), mean,
                                       atol=4 * np.sqrt(cov.max() / 4000))
            np.testing.assert_allclose(np.cov(pts.T), cov, atol=0.01)


class TestGpBinary:
    def test_labels_are_binary(self):
        for kind in ("gp-binary-1d", "gp-binary-2d"):
            dataset, _ = gen_gp_binary(GeneratorSpec(kind, seed=0, n=50))
            assert set(np.unique(dataset.targets)) <= {0, 1}
            assert dataset.domain == "binary"

    def test_input_boxes(self):
        d1, _ = gen_gp_binary(GeneratorSpec("gp-binary-1d", seed=1, n=200))
        assert d1.inputs.shape[1] == 1
        assert d1.inputs.min() >= -3.0 and d1.inputs.max() <= 5.0
        d2, _ = gen_gp_binary(GeneratorSpec("gp-binary-2d", seed=1, n=200))
        assert d2.inputs.shape[1] == 2
        assert d2.inputs[:, 0].min() >= -3.0 and d2.inputs[:, 0].max() <= 5.0
        assert d2.inputs[:, 1].min() >= -4.0 and d2.inputs[:, 1].max() <= 1.0

    def test_positive_rate_within_binomial_bounds(self):
        spec = GeneratorSpec("gp-binary-1d", seed=6, n=10000,
                             kernel=KernelSpec("rbf", 1.0, 5.0))
        dataset, latent = gen_gp_binary(spec)
        p = expit(latent)
        expect = p.sum()
        sigma = np.sqrt((p * (1 - p)).sum())
        assert abs(dataset.targets.sum() - expect) <= 3 * sigma

    def test_seed_determinism(self):
        spec = GeneratorSpec("gp-binary-2d", seed=8, n=40)
        a, _ = gen_gp_binary(spec)
        b, _ = gen_gp_binary(spec)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.targets, b.targets)


class TestGenerateDispatch:
    def test_sidecar_contents(self):
        dataset, sidecar = generate(GeneratorSpec("gp-poisson-1d", seed=0,
                                                  n=30))
        assert sidecar["generator"]["kind"] == "gp-poisson-1d"
        assert len(sidecar["true_log_rate"]) == 30
        assert sidecar["domain"] == "counts"

    def test_mixture_sidecar_has_parameters(self):
        dataset, sidecar = generate(GeneratorSpec("gaussian-mixture-3d",
                                                  seed=0, n_per_class=3,
                                                  num_classes=3))
        assert len(sidecar["means"]) == 3
        assert sidecar["num_classes"] == 3

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidInput):
            GeneratorSpec("white-noise", seed=0)
