import itertools
import json
import math

import numpy as np
import pytest

from mixedlearn.data import from_mapping
from mixedlearn.families import Binomial, Multinomial, OutcomeSpec
from mixedlearn.formula import INTERCEPT
from mixedlearn.gsem import GsemConfig, StructureError
from mixedlearn.interpret import (MAX_EXACT_FEATURES, Summary, edge_importance, exact_shapley, extract_parameters,
                                  information_criteria, predict_interval, predict_point, sampled_shapley,
                                  shapley_random_effects, shapley_values, shapley_weights, summary,
                                  variance_decomposition)
from mixedlearn.model import MixedModel
from mixedlearn.simulate import simulate
from mixedlearn.trainer import TrainConfig, fit

LINEAR = GsemConfig(hidden_dims=[], dropout=0.0)


def _data(n=40, p=3, seed=0, groups=4):
    rng = np.random.default_rng(seed)
    cols = {f"x{j + 1}": rng.normal(size=n) for j in range(p)}
    cols["g"] = np.array([f"g{k}" for k in rng.integers(0, groups, n)], dtype=object)
    cols["y"] = sum(cols[f"x{j + 1}"] * (j + 1) for j in range(p)) + rng.normal(size=n)
    return from_mapping(cols)


def _linear_model(data, formula="y ~ x1 + x2 + x3 + (1|g)", seed=0, epochs=0):
    m = MixedModel(formula, gsem=LINEAR, seed=seed)
    if epochs:
        fit(m, data, None, TrainConfig(epochs=epochs, lr=0.02))
    else:
        m.setup(data)
        m.fitted = True
    return m


def _coef_from_weights(m, data, name):
    prep = m.prepare(data, targets_required=False)
    j = prep.design.cont_names.index(name)
    return float(m.params["enc.W_cont"][j] @ m.params["out.y.W"][:, 0])


def _brute_force_shapley(f, x, bg):
    """Coalition formula with features outside S at the background values."""
    n, p = x.shape
    phi = np.zeros((n, p))
    for j in range(p):
        others = [k for k in range(p) if k != j]
        for size in range(p):
            for s in itertools.combinations(others, size):
                w = math.factorial(size) * math.factorial(p - size - 1) / math.factorial(p)
                with_j, without = np.tile(bg, (n, 1)), np.tile(bg, (n, 1))
                for k in s:
                    with_j[:, k] = x[:, k]
                    without[:, k] = x[:, k]
                with_j[:, j] = x[:, j]
                phi[:, j] += w * (f(with_j) - f(without))
    return phi


class TestPredictPoint:
    def test_seen_group_uses_its_row(self):
        data = _data()
        m = _linear_model(data)
        key = "re0.(Intercept).mu"
        m.params[key] = np.random.default_rng(1).normal(size=m.params[key].shape)
        prep = m.prepare(data, targets_required=False)
        base = predict_point(m, data)["y"]["mean"]
        # the prediction moves by the level's mu row projected through the linear head
        gi = prep.design.group_index[0]
        m2 = m.params[key] - m.params[key].mean(axis=0)
        pop = m.forward(prep.design, m.node_params(), "eval", drop_terms=(0,))["y"].value[:, 0]
        np.testing.assert_allclose(base - pop, m2[gi] @ m.params["out.y.W"][:, 0], atol=1e-12)

    def test_unseen_group_is_population(self):
        data = _data()
        m = _linear_model(data, epochs=3)
        new = from_mapping({"x1": np.array([0.3]), "x2": np.array([1.0]), "x3": np.array([-0.2]),
                            "g": np.array(["zzz"], dtype=object)})
        prep = m.prepare(new, targets_required=False)
        pop = m.forward(prep.design, m.node_params(), "eval", drop_terms=(0,))["y"].value[:, 0]
        np.testing.assert_array_equal(predict_point(m, new)["y"]["mean"], pop)

    def test_deterministic_and_permutation_equivariant(self):
        data = _data()
        m = MixedModel("y ~ x1 + x2 + x3 + (1|g)", gsem=GsemConfig(hidden_dims=[8], dropout=0.3), seed=0)
        fit(m, data, None, TrainConfig(epochs=3))
        a = predict_point(m, data)["y"]["mean"]
        np.testing.assert_array_equal(a, predict_point(m, data)["y"]["mean"])
        perm = np.random.default_rng(2).permutation(data.n_rows)
        np.testing.assert_allclose(predict_point(m, data.take(perm))["y"]["mean"], a[perm], atol=1e-12)

    def test_classification_outputs(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=30)
        data = from_mapping({"x": x, "b": (x > 0).astype(float),
                             "c": np.array(["lo", "mid", "hi"], dtype=object)[rng.integers(0, 3, 30)]})
        m = MixedModel("~ x", outcomes=[OutcomeSpec("b", "b", Binomial()), OutcomeSpec("c", "c", Multinomial(3))],
                       gsem=LINEAR, seed=0)
        fit(m, data, None, TrainConfig(epochs=2))
        out = predict_point(m, data)
        assert set(out["b"]["class"]) <= {0, 1}
        np.testing.assert_allclose(out["c"]["prob"].sum(axis=1), 1.0)
        assert set(out["c"]["class"]) <= {"lo", "mid", "hi"}


class TestPredictInterval:
    def test_degenerate_without_uncertainty(self):
        data = _data()
        m = _linear_model(data, epochs=2)
        for k in m.params:
            if k.endswith(".log_var"):
                m.params[k][:] = -800.0
        lo, hi = predict_interval(m, data, m_samples=20, include_noise=False)["y"]
        point = predict_point(m, data)["y"]["mean"]
        np.testing.assert_allclose(lo, point, atol=1e-12)
        np.testing.assert_allclose(hi, point, atol=1e-12)

    def test_nesting(self):
        data = _data()
        m = _linear_model(data, epochs=2)
        lo1, hi1 = predict_interval(m, data, 200, alpha=0.2, seed=4)["y"]
        lo2, hi2 = predict_interval(m, data, 200, alpha=0.05, seed=4)["y"]
        assert np.all(lo2 <= lo1) and np.all(hi1 <= hi2)

    def test_bad_alpha(self):
        data = _data()
        with pytest.raises(ValueError):
            predict_interval(_linear_model(data), data, alpha=1.5)


class TestExtractParameters:
    def test_linear_model_reads_weights(self):
        data = _data()
        m = _linear_model(data, epochs=5)
        est = extract_parameters(m, data)
        for name in ("x1", "x2", "x3"):
            assert est.coefficients[name] == pytest.approx(_coef_from_weights(m, data, name), abs=1e-12)

    def test_constant_model(self):
        data = _data()
        m = _linear_model(data)
        m.params["enc.W_cont"][:] = 0.0
        coefs = extract_parameters(m, data).coefficients
        assert all(coefs[k] == 0.0 for k in ("x1", "x2", "x3"))
        assert coefs[INTERCEPT] == pytest.approx(float(m.params["out.y.b"][0]))

    def test_finite_difference_slope(self):
        data = _data()
        m = MixedModel("y ~ x1 + x2 + x3", gsem=GsemConfig(hidden_dims=[6], activation="tanh", dropout=0.0),
                       seed=1)
        fit(m, data, None, TrainConfig(epochs=3))
        est = extract_parameters(m, data)
        prep = m.prepare(data, targets_required=False)
        xbar = {c: float(np.mean(data[c])) for c in ("x1", "x2", "x3")}

        def f(point):
            row = from_mapping({k: np.array([v]) for k, v in point.items()})
            return float(predict_point(m, row)["y"]["mean"][0])
        h = 1e-5
        for c in ("x1", "x2", "x3"):
            up, dn = dict(xbar), dict(xbar)
            up[c] += h
            dn[c] -= h
            assert est.coefficients[c] == pytest.approx((f(up) - f(dn)) / (2 * h), abs=1e-6)
        assert prep.design.n_rows == data.n_rows

    def test_variance_component_labels(self):
        data = _data()
        m = _linear_model(data, "y ~ x1 + (x1|g)", epochs=2)
        est = extract_parameters(m, data)
        assert set(est.variance_components) == {"g:(Intercept)", "g:x1"}
        assert "g:(Intercept)~x1" in est.correlations
        assert est.level_effects["g:x1"].shape == (4,)
        assert est.residual_variance > 0


class TestVarianceDecomposition:
    def test_zero_effects(self):
        data = _data()
        m = _linear_model(data, epochs=2)
        m.params["re0.(Intercept).mu"][:] = 0.0
        vd = variance_decomposition(m, data)
        assert vd.icc["g"] == 0.0 and list(vd.sigma2_u.values()) == [0.0]

    def test_icc_simulation(self):
        sim = simulate("lmm", {"n_groups": 60, "n_per_group": 20, "sigma_u": 1.0, "sigma_e": 1.0}, seed=1)
        m = MixedModel("y ~ x1 + (1|g)", gsem=LINEAR, seed=7)
        fit(m, sim.data, None, TrainConfig(lr=0.02, batch_size=1200, epochs=2000, lambda_kl=1 / 20, seed=7,
                                           lambda_sparse=0.0))
        vd = variance_decomposition(m, sim.data)
        assert abs(vd.icc["g"] - 0.5) < 0.05
        parts = vd.sigma2_fixed + sum(vd.sigma2_u.values()) + vd.sigma2_eps
        assert abs(parts - vd.total_variance) < 0.02 * vd.total_variance
        assert min(vd.sigma2_fixed, vd.sigma2_eps, *vd.sigma2_u.values()) >= 0
        assert json.loads(json.dumps(vd.to_dict()))["icc"]["g"] == vd.icc["g"]


class TestShapleyCore:
    def test_weights_sum(self):
        for p in range(1, 8):
            w = shapley_weights(p)
            # each size-s coalition appears C(p-1, s) times
            assert sum(w[s] * math.comb(p - 1, s) for s in range(p)) == pytest.approx(1.0)

    def test_exact_matches_brute_force(self):
        rng = np.random.default_rng(0)
        p = 5
        x, bg = rng.normal(size=(4, p)), rng.normal(size=p)
        a = rng.normal(size=(p, p))
        f = lambda z: np.tanh(z @ a).sum(axis=1) + z[:, 0] * z[:, 1]

        def value(mask):
            z = np.where(mask, x, bg)
            return f(z)
        np.testing.assert_allclose(exact_shapley(value, p), _brute_force_shapley(f, x, bg), atol=1e-10)

    def test_sampled_close_to_exact(self):
        rng = np.random.default_rng(1)
        x, bg = rng.normal(size=(3, 4)), np.zeros(4)
        f = lambda z: z[:, 0] * z[:, 1] + z[:, 2] ** 2 + z[:, 3]
        value = lambda mask: f(np.where(mask, x, bg))
        exact = exact_shapley(value, 4)
        phi, se = sampled_shapley(value, 4, 400, seed=2)
        assert np.all(np.abs(phi - exact) <= 5 * se + 1e-12)
        np.testing.assert_allclose(phi.sum(axis=1), f(x) - f(bg[None]), atol=1e-10)


class TestShapleyModel:
    def test_additive_model(self):
        data = _data()
        m = _linear_model(data, "y ~ x1 + x2 + x3", epochs=3)
        rep = shapley_values(m, data)
        for j, c in enumerate(("x1", "x2", "x3")):
            w = _coef_from_weights(m, data, c)
            np.testing.assert_allclose(rep.values[:, j], w * (data[c] - np.mean(data[c])), atol=1e-10)
        np.testing.assert_allclose(rep.values.sum(axis=1) + rep.baseline, rep.prediction, atol=1e-8)

    def test_efficiency_nonlinear(self):
        data = _data(p=4)
        m = MixedModel("y ~ x1 + x2 + x3 + x4 + (1|g)", gsem=GsemConfig(hidden_dims=[8, 4], activation="gelu"),
                       seed=0)
        fit(m, data, None, TrainConfig(epochs=2))
        rep = shapley_values(m, data)
        np.testing.assert_allclose(rep.values.sum(axis=1) + rep.baseline, rep.prediction, atol=1e-8)
        np.testing.assert_allclose(rep.prediction, predict_point(m, data)["y"]["mean"], atol=1e-12)

    def test_symmetry_and_null_player(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=20)
        data = from_mapping({"a": x, "b": x.copy(), "c": rng.normal(size=20), "y": rng.normal(size=20)})
        m = MixedModel("y ~ a + b + c", gsem=GsemConfig(hidden_dims=[5], activation="tanh", dropout=0.0), seed=0)
        m.setup(data)
        names = m.prepare(data, targets_required=False).design.cont_names
        w = m.params["enc.W_cont"]
        w[names.index("b")] = w[names.index("a")]
        w[names.index("c")] = 0.0
        rep = shapley_values(m, data)
        np.testing.assert_allclose(rep.values[:, 0], rep.values[:, 1], atol=1e-12)
        np.testing.assert_allclose(rep.values[:, 2], 0.0, atol=1e-12)

    def test_background_rows(self):
        data = _data()
        m = _linear_model(data, "y ~ x1 + x2 + x3", epochs=2)
        bg = data.take(np.arange(5))
        rep = shapley_values(m, data.take(np.arange(3)), background=bg)
        w = _coef_from_weights(m, data, "x1")
        np.testing.assert_allclose(rep.values[:, 0], w * (data["x1"][:3] - np.mean(data["x1"][:5])), atol=1e-10)

    def test_too_many_features(self):
        p = MAX_EXACT_FEATURES + 1
        rng = np.random.default_rng(0)
        cols = {f"x{j}": rng.normal(size=5) for j in range(p)}
        cols["y"] = rng.normal(size=5)
        data = from_mapping(cols)
        m = MixedModel("y ~ " + " + ".join(f"x{j}" for j in range(p)), gsem=LINEAR, seed=0)
        m.setup(data)
        with pytest.raises(ValueError):
            shapley_values(m, data)
        rep = shapley_values(m, data, mode="sampled", n_permutations=8)
        assert rep.std_error.shape == rep.values.shape

    def test_exports(self):
        data = _data()
        m = _linear_model(data, "y ~ x1 + x2 + x3", epochs=1)
        rep = shapley_values(m, data.take(np.arange(2)))
        assert rep.to_csv().splitlines()[0] == "row,baseline,prediction,phi[x1],phi[x2],phi[x3]"
        assert set(json.loads(rep.to_json())["mean_abs"]) == {"x1", "x2", "x3"}


class TestShapleyRandomEffects:
    def test_single_term(self):
        data = _data()
        m = _linear_model(data, epochs=3)
        rep = shapley_random_effects(m, data)
        prep = m.prepare(data, targets_required=False)
        without = m.forward(prep.design, m.node_params(), "eval", drop_terms=(0,))["y"].value[:, 0]
        np.testing.assert_allclose(rep.values[:, 0], predict_point(m, data)["y"]["mean"] - without, atol=1e-12)

    def test_zero_term_and_efficiency(self):
        data = _data()
        m = _linear_model(data, "y ~ x1 + (1|g) + (x2|g)", epochs=3)
        for k in m.params:
            if k.startswith("re0.") and k.endswith(".mu"):
                m.params[k][:] = 0.0
        rep = shapley_random_effects(m, data)
        np.testing.assert_allclose(rep.values[:, 0], 0.0, atol=1e-12)
        np.testing.assert_allclose(rep.values.sum(axis=1) + rep.baseline, rep.prediction, atol=1e-10)


class TestSummary:
    def test_least_squares_and_schema(self):
        rng = np.random.default_rng(0)
        x1, x2 = rng.normal(size=200), rng.normal(size=200)
        y = 1.5 + 2 * x1 - 0.7 * x2 + 0.1 * rng.normal(size=200)
        data = from_mapping({"x1": x1, "x2": x2, "y": y})
        m = MixedModel("y ~ x1 + x2", gsem=LINEAR, seed=0)
        fit(m, data, None, TrainConfig(lr=0.05, epochs=1000, batch_size=200, lambda_sparse=0.0, scheduler="cosine"))
        s = summary(m, data)
        beta = np.linalg.lstsq(np.column_stack([np.ones(200), x1, x2]), y, rcond=None)[0]
        np.testing.assert_allclose([r["estimate"] for r in s.fixed], beta, atol=1e-3)
        # normal-equations standard errors with the MLE residual variance
        x = np.column_stack([np.ones(200), x1, x2])
        s2 = np.mean((y - x @ beta) ** 2)
        se = np.sqrt(np.diag(s2 * np.linalg.inv(x.T @ x)))
        np.testing.assert_allclose([r["std_error"] for r in s.fixed], se, rtol=1e-2)
        csv_lines = s.to_csv().splitlines()
        assert csv_lines[0] == "section,term,estimate,std_error,z_value,p_value"
        assert any(line.startswith("section,group,name,variance,std_dev,corr") for line in csv_lines)
        assert csv_lines[-2] == "section,loglik,aic,bic,k,n_obs"
        assert s.k == 3 + 1
        assert "Fixed effects" in str(s)
        assert json.loads(s.to_json())["n_obs"] == 200

    def test_information_criteria(self):
        aic, bic = information_criteria(-100.0, 4, 50)
        assert aic == 208.0 and bic == pytest.approx(4 * math.log(50) + 200.0)

    def test_random_rows(self):
        data = _data()
        m = _linear_model(data, "y ~ x1 + (x1|g)", epochs=2)
        s = summary(m, data)
        groups = [(r["group"], r["name"]) for r in s.random]
        assert groups == [("g", "(Intercept)"), ("g", "x1"), ("Residual", "")]
        assert isinstance(s, Summary) and s.aic == pytest.approx(2 * s.k - 2 * s.loglik)


class TestEdgeImportance:
    def test_static_model(self):
        data = _data()
        m = MixedModel("y ~ x1 + x2 + x3", gsem=GsemConfig(hidden_dims=[4], structure="static", dropout=0.0),
                       seed=0)
        fit(m, data, None, TrainConfig(epochs=3, lr=0.05))
        imp = edge_importance(m, data)
        assert imp.shape == (4, 4)
        # zero where the (transposed) structure matrix is masked out
        np.testing.assert_array_equal(imp[np.tril_indices(4)], 0.0)
        assert np.all(imp >= 0)

    def test_unstructured_raises(self):
        data = _data()
        with pytest.raises(StructureError):
            edge_importance(_linear_model(data), data)
