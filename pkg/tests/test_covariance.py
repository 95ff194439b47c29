import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from mixedlearn.covariance import (CovarianceError, CovarianceSpec, build_ar1, build_arma, build_cs, build_gp_rbf,
                                   build_iid, build_kinship, build_kron, correlated_sample, henderson_predict,
                                   load_kinship, rho_from_raw, rho_to_raw)


def _check_factor(f, tol=1e-8):
    np.testing.assert_array_equal(f.sigma, f.sigma.T)
    assert np.max(np.abs(f.chol_lower @ f.chol_lower.T - f.sigma)) < tol
    assert (np.diag(f.chol_lower) > 0).all()


class TestIid:
    def test_identity(self):
        np.testing.assert_array_equal(build_iid(1.0, 3).sigma, np.eye(3))

    def test_scaled(self):
        f = build_iid(4.0, 2)
        np.testing.assert_array_equal(f.sigma, np.diag([4.0, 4.0]))
        np.testing.assert_array_equal(f.chol_lower, np.diag([2.0, 2.0]))

    def test_bad_variance(self):
        with pytest.raises(CovarianceError):
            build_iid(-1.0, 2)

    def test_empty(self):
        with pytest.raises(CovarianceError):
            build_iid(1.0, 0)


class TestAr1:
    def test_values(self):
        np.testing.assert_allclose(build_ar1(1.0, 0.5, 3).sigma, [[1, .5, .25], [.5, 1, .5], [.25, .5, 1]])

    def test_zero_rho(self):
        np.testing.assert_array_equal(build_ar1(1.0, 0.0, 5).sigma, np.eye(5))

    def test_near_unit_root_is_spd(self):
        f = build_ar1(1.0, 0.99, 10)
        assert np.linalg.eigvalsh(f.sigma).min() > 0
        _check_factor(f)

    def test_rejects_unit_rho(self):
        with pytest.raises(CovarianceError):
            build_ar1(1.0, 1.0, 3)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-0.95, 0.95), st.integers(2, 50))
    def test_inverse_is_tridiagonal(self, rho, n):
        inv = np.linalg.inv(build_ar1(1.0, rho, n).sigma)
        off = inv - np.triu(np.tril(inv, 1), -1)
        assert np.abs(off).max() < 1e-8


class TestArma:
    def test_reduces_to_ar1(self):
        rho = 0.6
        sigma = np.sqrt(1 - rho ** 2)  # innovation sd giving unit marginal variance
        np.testing.assert_allclose(build_arma([rho], [], sigma, 6).sigma, build_ar1(1.0, rho, 6).sigma, atol=1e-10)

    def test_white_noise(self):
        np.testing.assert_allclose(build_arma([], [], 1.5, 4).sigma, 2.25 * np.eye(4))

    def test_matches_long_simulation(self):
        rng = np.random.default_rng(11)
        e = rng.standard_normal(1_000_000)
        x = signal.lfilter([1.0, 0.2], [1.0, -0.5], e)[1000:]
        x = x - x.mean()
        emp = np.array([np.mean(x[:x.size - k] * x[k:]) for k in range(4)])
        gam = build_arma([0.5], [0.2], 1.0, 4).sigma[0]
        assert np.abs(emp - gam).max() < 0.01 * gam[0]

    def test_non_stationary(self):
        with pytest.raises(CovarianceError):
            build_arma([1.2], [], 1.0, 3)

    def test_ar2_stationarity_region(self):
        _check_factor(build_arma([0.5, 0.3], [0.4, 0.1], 1.0, 8))
        with pytest.raises(CovarianceError):
            build_arma([0.5, 0.6], [], 1.0, 3)


class TestCompoundSymmetry:
    def test_values(self):
        s = build_cs(1.0, 0.5, 3).sigma
        np.testing.assert_allclose(np.diag(s), 1.0)
        np.testing.assert_allclose(s[~np.eye(3, dtype=bool)], 0.5)

    def test_zero(self):
        np.testing.assert_array_equal(build_cs(1.0, 0.0, 3).sigma, np.eye(3))

    def test_bound_reported(self):
        with pytest.raises(CovarianceError, match="-0.5"):
            build_cs(1.0, -0.6, 3)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-20, 20), st.integers(2, 12))
    def test_raw_map_stays_in_domain(self, raw, n):
        rho = rho_from_raw("CS", raw, n)
        assert -1.0 / (n - 1) <= rho < 1.0
        if abs(raw) < 10:
            assert rho_to_raw("CS", rho, n) == pytest.approx(raw, abs=1e-6)


class TestKron:
    def test_identity(self):
        np.testing.assert_array_equal(build_kron(build_iid(1, 2), build_iid(1, 3)).sigma, np.eye(6))

    def test_scalar(self):
        f = build_kron(build_iid(4.0, 1), build_iid(9.0, 1))
        assert f.sigma[0, 0] == 36.0 and f.chol_lower[0, 0] == 6.0

    def test_dense_oracle(self):
        a, b = build_ar1(1.0, 0.4, 2), build_iid(2.0, 2)
        f = build_kron(a, b)
        dense = np.block([[a.sigma[i, j] * b.sigma for j in range(2)] for i in range(2)])
        np.testing.assert_array_equal(f.sigma, dense)
        _check_factor(f)

    def test_vec_identity(self):
        rng = np.random.default_rng(2)
        a, b = build_ar1(1.0, 0.3, 3).sigma, build_cs(1.0, 0.2, 4).sigma
        x = rng.normal(size=(4, 3))
        lhs = build_kron(build_ar1(1.0, 0.3, 3), build_cs(1.0, 0.2, 4)).sigma @ x.reshape(-1, order="F")
        np.testing.assert_allclose(lhs, (b @ x @ a.T).reshape(-1, order="F"), atol=1e-10)

    def test_overflow(self):
        with pytest.raises(CovarianceError):
            build_kron(build_iid(1.0, 101), build_iid(1.0, 100))


class TestKinship:
    def test_single_snp(self):
        np.testing.assert_allclose(build_kinship([[0], [2]]), [[2, -2], [-2, 2]])

    def test_duplicated_rows(self):
        g = np.random.default_rng(0).integers(0, 3, size=(5, 20))
        g[3] = g[1]
        g[:, 0] = 1
        with pytest.warns(UserWarning, match="monomorphic"):
            k = build_kinship(np.column_stack([g, np.zeros(5)]))
        np.testing.assert_allclose(k[3], k[1])

    def test_psd(self):
        k = build_kinship(np.random.default_rng(1).integers(0, 3, size=(10, 50)))
        assert np.linalg.eigvalsh(k + 1e-8 * np.eye(10)).min() > 0

    def test_monomorphic(self):
        with pytest.raises(CovarianceError):
            build_kinship(np.zeros((4, 3)))

    def test_load_text(self, tmp_path):
        path = tmp_path / "k.txt"
        path.write_text("1 0.5\n0.5 1\n")
        np.testing.assert_array_equal(load_kinship(path), [[1, 0.5], [0.5, 1]])


class TestHenderson:
    def test_zero(self):
        np.testing.assert_array_equal(henderson_predict(np.zeros((1, 3)), np.eye(3), [1.0, 2.0, 3.0]), [0.0])

    def test_scalar(self):
        assert henderson_predict([[0.5]], [[1.0]], [2.0])[0] == pytest.approx(1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 7))
    def test_interpolates_training_rows(self, seed, i):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(8, 30))
        k = a @ a.T / 30 + 0.05 * np.eye(8)
        u = rng.normal(size=8)
        assert abs(henderson_predict(k[i:i + 1], k, u)[0] - u[i]) < 1e-8

    def test_dimension_mismatch(self):
        with pytest.raises(CovarianceError):
            henderson_predict(np.ones((1, 2)), np.eye(3), np.ones(3))


class TestGp:
    def test_coincident_points(self):
        f = build_gp_rbf([[0.0, 0.0], [0.0, 0.0]], 2.0, 1.0)
        assert f.sigma[0, 1] == pytest.approx(2.0)

    def test_distance_rule(self):
        ell = 0.7
        f = build_gp_rbf([[0.0], [ell * np.sqrt(2.0)]], 1.5, ell)
        assert f.sigma[0, 1] == pytest.approx(1.5 * np.exp(-1.0))

    def test_random_points_spd(self):
        f = build_gp_rbf(np.random.default_rng(0).uniform(size=(20, 2)), 1.0, 0.5)
        assert np.linalg.eigvalsh(f.sigma).min() > 0
        _check_factor(f)

    def test_duplicates_without_jitter(self):
        with pytest.raises(CovarianceError):
            build_gp_rbf([[1.0], [1.0]], 1.0, 1.0, jitter=False)

    def test_bad_lengthscale(self):
        with pytest.raises(CovarianceError):
            build_gp_rbf([[0.0]], 1.0, 0.0)


class TestSampling:
    def test_zero(self):
        np.testing.assert_array_equal(correlated_sample(build_ar1(1.0, 0.3, 4), np.zeros(4)), np.zeros(4))

    def test_iid_scaling(self):
        eps = np.random.default_rng(0).normal(size=3)
        np.testing.assert_allclose(correlated_sample(build_iid(4.0, 3), eps), 2 * eps)

    def test_ar1_lag_correlation(self):
        f = build_ar1(1.0, 0.7, 2)
        draws = correlated_sample(f, np.random.default_rng(5).standard_normal((2, 100_000)))
        assert abs(np.corrcoef(draws)[0, 1] - 0.7) < 0.02


class TestSpec:
    def test_aliases(self):
        assert CovarianceSpec("kinship").kind == "KIN"
        assert CovarianceSpec("ar1").kind == "AR1"

    def test_unknown(self):
        with pytest.raises(CovarianceError):
            CovarianceSpec("banana")
