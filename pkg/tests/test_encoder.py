import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixedlearn import autodiff as ad
from mixedlearn.covariance import CovarianceSpec
from mixedlearn.data import from_mapping
from mixedlearn.encoder import (EncoderConfig, VariationalTable, combine, cs_symmetric_root, default_cat_dim,
                                embed_fixed, enforce_centering, kl_divergence, resolve_unknown_group,
                                sample_random_effects)
from mixedlearn.formula import build_design, parse_formula
from mixedlearn.gsem import GsemConfig
from mixedlearn.model import MixedModel
from mixedlearn.trainer import TrainConfig, fit


def _table(mu, log_var=None, cov=None, unknown=None):
    mu = np.asarray(mu, dtype=np.float64)
    lv = np.zeros_like(mu) if log_var is None else np.asarray(log_var, dtype=np.float64)
    return VariationalTable(mu, lv, "g", "(Intercept)", cov, unknown)


def _grouped(n_groups=6, per=5, seed=0):
    rng = np.random.default_rng(seed)
    g = np.repeat(np.arange(n_groups), per)
    t = np.tile(np.arange(per, dtype=float), n_groups)
    x = rng.normal(size=g.size)
    y = x + rng.normal(size=n_groups)[g] + 0.3 * t + 0.1 * rng.normal(size=g.size)
    return from_mapping({"x": x, "t": t, "g": np.array([f"g{k}" for k in g], dtype=object), "y": y})


class TestEmbedFixed:
    def test_zero_weights(self):
        d = build_design(parse_formula("y ~ 0 + x"), {"x": np.array([1.0, 2.0])})
        out = embed_fixed(d, {"enc.W_cont": ad.constant(np.zeros((1, 4)))})
        np.testing.assert_array_equal(out.value, np.zeros((2, 4)))

    def test_identity_column(self):
        d = build_design(parse_formula("y ~ 0 + x"), {"x": np.array([1.0, 2.0, 5.0])})
        out = embed_fixed(d, {"enc.W_cont": ad.constant(np.array([[1.0, 0.0]]))})
        np.testing.assert_array_equal(out.value[:, 0], [1.0, 2.0, 5.0])

    def test_categorical_lookup_and_range(self):
        d = build_design(parse_formula("y ~ 0 + c"), {"c": np.array(["a", "b", "a"], dtype=object)},
                         {"c": "categorical"})
        emb = np.array([[1.0], [2.0], [9.0]])
        out = embed_fixed(d, {"enc.W_cont": ad.constant(np.zeros((0, 2))), "enc.emb.c": ad.constant(emb)})
        np.testing.assert_array_equal(out.value[:, 2], [1.0, 2.0, 1.0])
        d.x_cat[0, 0] = 7
        with pytest.raises(IndexError):
            embed_fixed(d, {"enc.W_cont": ad.constant(np.zeros((0, 2))), "enc.emb.c": ad.constant(emb)})

    def test_gradient(self):
        d = build_design(parse_formula("y ~ x + z"), {"x": np.array([1.0, -2.0, 0.5]), "z": np.array([0.3, 0.1, 2.0])})
        w = np.random.default_rng(0).normal(size=(3, 3))
        err = ad.finite_diff_check(lambda v: ad.sum(ad.mul(embed_fixed(d, {"enc.W_cont": v}), w)),
                                   np.random.default_rng(1).normal(size=(3, 3)))
        assert err < 1e-6

    def test_default_cat_dim(self):
        assert default_cat_dim(5) == 3
        assert default_cat_dim(100) == 16


class TestSampling:
    def test_eval_returns_means(self):
        mu = np.random.default_rng(0).normal(size=(3, 2))
        out = sample_random_effects(_table(mu), np.array([2, 0]), "eval")
        np.testing.assert_array_equal(out.value, mu[[2, 0]])

    def test_zero_noise_equals_eval(self):
        from mixedlearn.encoder import level_effects
        t = _table(np.ones((2, 3)), np.full((2, 3), -1.0))
        np.testing.assert_array_equal(level_effects(t, "train", None, eps=np.zeros((2, 3))).value,
                                      level_effects(t, "eval", None).value)

    def test_train_moments(self):
        t = _table(np.zeros((1, 1)))
        draws = sample_random_effects(t, np.zeros(100_000, dtype=int), "train", np.random.default_rng(0))
        # one draw per level, so sample many levels instead
        many = _table(np.zeros((100_000, 1)))
        v = sample_random_effects(many, np.arange(100_000), "train", np.random.default_rng(1)).value
        assert abs(v.mean()) < 0.02 and abs(v.var() - 1.0) < 0.02
        assert draws.shape == (100_000, 1)


class TestUnknown:
    def test_zero_strategy(self):
        np.testing.assert_array_equal(resolve_unknown_group(_table(np.ones((2, 3))), "zero"), np.zeros(3))

    def test_learned_strategy(self):
        row = np.array([0.3, -0.1])
        np.testing.assert_array_equal(resolve_unknown_group(_table(np.ones((2, 2)), unknown=row), "learned"), row)

    def test_learned_without_row(self):
        with pytest.raises(ValueError):
            resolve_unknown_group(_table(np.ones((2, 2))), "learned")

    def test_unseen_level_matches_population(self):
        data = _grouped()
        m = MixedModel("y ~ x + (1|g)", gsem=GsemConfig(hidden_dims=[4]), seed=0)
        fit(m, data, None, TrainConfig(epochs=3))
        rows = {"x": np.array([0.4, -1.0]), "g": np.array(["never", "seen?"], dtype=object)}
        from mixedlearn.interpret import predict_point
        with_term = predict_point(m, from_mapping(rows))["y"]["mean"]
        prep = m.prepare(from_mapping(rows), targets_required=False)
        pop = m.forward(prep.design, m.node_params(), "eval", drop_terms=(0,))["y"].value[:, 0]
        np.testing.assert_array_equal(with_term, pop)


class TestCentering:
    def test_simple(self):
        np.testing.assert_array_equal(enforce_centering(_table([[1.0], [3.0]])), [[-1.0], [1.0]])

    def test_already_centered(self):
        mu = np.array([[-2.0, 1.0], [2.0, -1.0]])
        np.testing.assert_array_equal(enforce_centering(_table(mu)), mu)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-100, 100))
    def test_shift_invariance(self, seed, c):
        mu = np.random.default_rng(seed).normal(size=(5, 3))
        base = enforce_centering(_table(mu))
        np.testing.assert_allclose(enforce_centering(_table(base + c)), base, atol=1e-12)

    def test_non_exchangeable_is_noop(self):
        mu = np.array([[1.0], [3.0]])
        np.testing.assert_array_equal(enforce_centering(_table(mu, cov=CovarianceSpec("AR1"))), mu)

    def test_holds_after_every_step(self):
        data = _grouped()
        m = MixedModel("y ~ x + (t|g)", gsem=GsemConfig(hidden_dims=[4]), seed=0)
        fit(m, data, None, TrainConfig(epochs=4, batch_size=7))
        for key, val in m.params.items():
            if key.endswith(".mu"):
                assert np.abs(val.mean(axis=0)).max() < 1e-12


class TestCombine:
    def test_zero_effects(self):
        h = np.random.default_rng(0).normal(size=(3, 4))
        out = combine(ad.constant(h), [np.ones((3, 1))], [[ad.constant(np.zeros((3, 4)))]])
        np.testing.assert_array_equal(out.value, h)

    def test_intercept_adds_rows(self):
        h, u = np.ones((2, 3)), np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        out = combine(ad.constant(h), [np.ones((2, 1))], [[ad.constant(u)]])
        np.testing.assert_array_equal(out.value, h + u)

    def test_slope_broadcast(self):
        u = np.array([[1.0, -1.0]])
        out = combine(ad.constant(np.zeros((1, 2))), [np.array([[1.0, 2.0]])],
                      [[ad.constant(np.zeros((1, 2))), ad.constant(u)]])
        np.testing.assert_array_equal(out.value, 2 * u)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            combine(ad.constant(np.zeros((2, 2))), [np.ones((2, 2))], [[ad.constant(np.zeros((2, 2)))]])

    def test_narrow_effects_pad_into_wider_representation(self):
        out = combine(ad.constant(np.zeros((1, 4))), [np.ones((1, 1))], [[ad.constant(np.ones((1, 2)))]])
        np.testing.assert_array_equal(out.value, [[1, 1, 0, 0]])


class TestKl:
    def test_prior_match(self):
        assert kl_divergence([_table(np.zeros((3, 2)))]).item() == 0.0

    def test_unit_mean(self):
        assert kl_divergence([_table([[1.0]])]).item() == pytest.approx(0.5)

    def test_gradient(self):
        lv = np.random.default_rng(0).normal(size=(2, 3)) * 0.3
        err = ad.finite_diff_check(lambda m: kl_divergence([VariationalTable(m, lv, "g", "s")]),
                                   np.random.default_rng(1).normal(size=(2, 3)))
        assert err < 1e-6


class TestStructuredCovariance:
    @pytest.mark.parametrize("spec", [{"kind": "AR1", "rho": 0.5}, {"kind": "CS", "rho": 0.2},
                                      {"kind": "GP", "coordinates_col": "t2", "lengthscale": 1.0},
                                      {"kind": "ARMA", "phi": [0.4], "theta": [0.2], "sigma": 1.0}])
    def test_fit_with_structure(self, spec):
        data = _grouped()
        data = data.with_column("t2", np.asarray(data["x"]) * 0 + np.repeat(np.arange(6.0), 5))
        m = MixedModel("y ~ x + (1|g)", covariance={"g": spec}, gsem=GsemConfig(hidden_dims=[4]), seed=0)
        rep = fit(m, data, None, TrainConfig(epochs=3))
        assert np.isfinite(rep.train_loss).all()

    def test_kron_two_slopes(self):
        data = _grouped()
        spec = {"kind": "KRON", "group": {"kind": "AR1", "rho": 0.3}, "slope": {"kind": "IID"}}
        m = MixedModel("y ~ x + (t|g)", covariance={"g": spec}, gsem=GsemConfig(hidden_dims=[4]), seed=0)
        assert np.isfinite(fit(m, data, None, TrainConfig(epochs=2)).train_loss).all()

    def test_cs_root_squares_to_correlation(self):
        n, rho = 5, 0.3
        from mixedlearn.covariance import rho_to_raw
        r = cs_symmetric_root(ad.constant(rho_to_raw("CS", rho, n)), n).value
        np.testing.assert_allclose(r @ r, (1 - rho) * np.eye(n) + rho * np.ones((n, n)), atol=1e-9)
        np.testing.assert_allclose(r.sum(axis=0) @ np.ones(n) / n, np.sqrt(1 + (n - 1) * rho), atol=1e-6)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=0)
    with pytest.raises(ValueError):
        EncoderConfig(unknown_strategy="mean")
