import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixedlearn import autodiff as ad
from mixedlearn.manifold import (FactorizationError, ManifoldBackbone, ManifoldBlockConfig, SparsePrecision,
                                 SpdeSmoother, aggregate, discrete_laplacian, export_field_csv, grid_map,
                                 spatial_mask, spde_precision, spde_sample, sem_layer_spatial)
from scipy import sparse


class TestConfig:
    def test_cell_limit(self):
        with pytest.raises(ValueError):
            ManifoldBlockConfig(grid_shape=(65, 64))

    @pytest.mark.parametrize("kw", [{"spde_alpha": 4}, {"spde_kappa_init": 0.0}, {"grid_shape": (2, 2, 2)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ManifoldBlockConfig(**kw)


class TestLaplacian:
    def test_1d(self):
        np.testing.assert_array_equal(discrete_laplacian((3,)).toarray(), [[-1, 1, 0], [1, -2, 1], [0, 1, -1]])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9))
    def test_rows_sum_to_zero(self, a, b):
        lap = discrete_laplacian((a, b)).toarray()
        np.testing.assert_array_equal(lap.sum(axis=1), 0.0)
        np.testing.assert_array_equal(lap, lap.T)

    def test_2d_interior(self):
        lap = discrete_laplacian((3, 3)).toarray()
        assert lap[4, 4] == -4 and lap[0, 0] == -2
        assert sorted(np.flatnonzero(lap[4])) == [1, 3, 4, 5, 7]


class TestPrecision:
    def test_alpha_one_1d(self):
        q = spde_precision(1.0, 1, discrete_laplacian((3,)))
        np.testing.assert_array_equal(q.dense(), [[2, -1, 0], [-1, 3, -1], [0, -1, 2]])

    @pytest.mark.parametrize("kappa", [0.3, 1.0, 2.5])
    def test_row_sums(self, kappa):
        q = spde_precision(kappa, 1, discrete_laplacian((4, 5)))
        np.testing.assert_allclose(q.dense().sum(axis=1), kappa ** 2, atol=1e-12)

    @pytest.mark.parametrize("alpha", [2, 3])
    def test_dense_power(self, alpha):
        lap = discrete_laplacian((5, 4))
        a = 0.7 ** 2 * np.eye(20) - lap.toarray()
        np.testing.assert_allclose(spde_precision(0.7, alpha, lap).dense(), np.linalg.matrix_power(a, alpha),
                                   atol=1e-10)

    def test_bad_kappa(self):
        with pytest.raises(ValueError):
            spde_precision(0.0, 1, discrete_laplacian((3,)))

    def test_triplets_symmetric(self):
        r, c, v = spde_precision(1.0, 2, discrete_laplacian((3, 3))).triplets()
        m = sparse.coo_matrix((v, (r, c))).toarray()
        np.testing.assert_array_equal(m, m.T)

    def test_not_spd(self):
        with pytest.raises(FactorizationError):
            SparsePrecision(sparse.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))).factor()

    def test_solve_matches_dense(self):
        q = spde_precision(0.8, 2, discrete_laplacian((6, 6)))
        b = np.random.default_rng(0).normal(size=(36, 3))
        np.testing.assert_allclose(q.solve(b), np.linalg.solve(q.dense(), b), atol=1e-10)


class TestSampling:
    def test_zero(self):
        q = spde_precision(1.0, 2, discrete_laplacian((4, 4)))
        np.testing.assert_array_equal(spde_sample(q, np.zeros(16)), 0.0)

    def test_identity(self):
        eps = np.random.default_rng(0).normal(size=5)
        np.testing.assert_allclose(spde_sample(SparsePrecision(sparse.identity(5, format="csr")), eps), eps)

    def test_exact_covariance(self):
        # u = P^T L^{-T} eps, so cov(u) is exactly Q^{-1}: check through the linear map
        q = spde_precision(1.0, 2, discrete_laplacian((4, 4)))
        m = spde_sample(q, np.eye(16))
        np.testing.assert_allclose(m @ m.T, np.linalg.inv(q.dense()), atol=1e-10)

    def test_monte_carlo(self):
        q = spde_precision(1.0, 2, discrete_laplacian((8, 8)))
        u = spde_sample(q, np.random.default_rng(3).standard_normal((64, 20_000)))
        cov = np.linalg.inv(q.dense())
        assert np.abs(np.cov(u) - cov).max() < 0.05 * np.diag(cov).max()

    def test_variance_grows_as_kappa_falls(self):
        lap = discrete_laplacian((6, 6))
        v = [np.trace(np.linalg.inv(spde_precision(k, 2, lap).dense())) for k in (3.0, 1.0, 0.3)]
        assert v[0] < v[1] < v[2]

    def test_shape_check(self):
        with pytest.raises(ad.ShapeError):
            spde_sample(spde_precision(1.0, 1, discrete_laplacian((3,))), np.zeros(4))


class TestSmoother:
    def test_constant_passes_through(self):
        s = SpdeSmoother((4, 4), 2)
        out = s.apply(np.full((2, 16), 3.0), np.log(0.5)).value
        np.testing.assert_allclose(out, 3.0, atol=1e-10)

    def test_gradients(self):
        s = SpdeSmoother((3, 3), 2)
        rng = np.random.default_rng(0)
        g = rng.normal(size=(2, 9))
        w = rng.normal(size=(2, 9))
        assert ad.finite_diff_check(lambda v: ad.sum(ad.mul(s.apply(v, np.log(0.7)), w)), g) < 1e-6
        assert ad.finite_diff_check(lambda k: ad.sum(ad.mul(s.apply(g, k), w)), np.array(np.log(0.7))) < 1e-6


class TestGridMapAndSem:
    def test_grid_map(self):
        h = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(grid_map(h, np.zeros((4, 6))).value, 0.0)
        np.testing.assert_array_equal(grid_map(h, np.eye(4)).value, h)
        w = np.random.default_rng(1).normal(size=(3, 6))
        assert ad.finite_diff_check(lambda v: ad.sum(ad.mul(grid_map(h, v), w)),
                                    np.random.default_rng(2).normal(size=(4, 6))) < 1e-6

    def test_sem_identity(self):
        xi = np.random.default_rng(0).normal(size=(2, 9))
        np.testing.assert_array_equal(sem_layer_spatial(xi, np.zeros((9, 9)), spatial_mask((3, 3), 1.0)).value, xi)

    def test_mask_decay(self):
        ell = 1.0
        m = spatial_mask((1, 5), ell)
        # distance 2 ell between cells 0 and 2, distance 0 on the (unmasked) diagonal has weight 1
        assert m[2, 0] == pytest.approx(np.exp(-2.0))
        np.testing.assert_array_equal(np.triu(m), 0.0)

    def test_sem_residual(self):
        rng = np.random.default_rng(1)
        mask = spatial_mask((3, 3), 1.5)
        bf = rng.normal(size=(9, 9))
        xi = rng.normal(size=(4, 9))
        eta = sem_layer_spatial(xi, bf, mask).value
        assert np.abs(eta @ (np.eye(9) - bf * mask).T - xi).max() < 1e-10


class TestAggregate:
    def test_single_sum(self):
        x = np.random.default_rng(0).normal(size=(2, 3))
        np.testing.assert_array_equal(aggregate([x], "sum").value, x)

    def test_attention_equal_logits_is_mean(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        np.testing.assert_allclose(aggregate([a, b], "attention", np.zeros(2)).value, (a + b) / 2)

    def test_concat_width(self):
        assert aggregate([np.ones((2, 3)), np.ones((2, 5))], "concat").shape == (2, 8)

    def test_sum_width_mismatch(self):
        with pytest.raises(ad.ShapeError):
            aggregate([np.ones((2, 3)), np.ones((2, 5))], "sum")


class TestBackbone:
    def test_forward_and_gradient(self):
        cfgs = [ManifoldBlockConfig((3, 3), use_sem=True), ManifoldBlockConfig((3, 3), spde_alpha=1)]
        bb = ManifoldBackbone(cfgs, 4, "attention")
        params = bb.init_params(np.random.default_rng(0))
        h = np.random.default_rng(1).normal(size=(5, 4))
        nodes = {k: ad.constant(v) for k, v in params.items()}
        out = bb.forward(h, nodes)
        assert out.shape == (5, bb.output_dim) == (5, 9)
        a = bb.forward(h, nodes, "train", np.random.default_rng(0)).value
        b = bb.forward(h, nodes, "train", np.random.default_rng(0)).value
        np.testing.assert_array_equal(a, b)
        w = np.random.default_rng(2).normal(size=(5, 9))

        def f(v):
            nd = dict(nodes)
            nd["mf0.W_grid"] = v
            return ad.sum(ad.mul(bb.forward(h, nd), w))
        assert ad.finite_diff_check(f, params["mf0.W_grid"]) < 1e-5

    def test_concat_width(self):
        bb = ManifoldBackbone([ManifoldBlockConfig((2, 2)), ManifoldBlockConfig((3,))], 2)
        assert bb.output_dim == 7

    def test_export_csv(self, tmp_path):
        p = tmp_path / "f.csv"
        export_field_csv(np.arange(6.0), (2, 3), p)
        assert p.read_text().splitlines() == ["0.0,1.0,2.0", "3.0,4.0,5.0"]
