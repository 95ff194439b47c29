"""Prediction and statistical interpretation of a fitted model."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .encoder import table_key
from .families import Binomial, Gaussian, MultiLabel, Multinomial, NegativeBinomial, Poisson
from .formula import INTERCEPT, DesignMatrices

MAX_EXACT_FEATURES = 12
MAX_RE_TERMS = 8


# ---------------------------------------------------------------- helpers

def _outcome(model, name: str | None):
    if name is None:
        return model.outcomes[0]
    for o in model.outcomes:
        if o.name == name:
            return o
    raise KeyError(f"unknown outcome {name!r}")


def _thetas(model, design, nodes=None, drop_terms=(), mode="eval", rng=None, backbone_mode=None):
    nodes = nodes if nodes is not None else model.node_params()
    out = model.forward(design, nodes, mode, rng, drop_terms, backbone_mode=backbone_mode)
    return {k: v.value for k, v in out.items()}


def _extras_np(model, o) -> dict[str, np.ndarray]:
    prefix = f"out.{o.name}."
    return {k[len(prefix):]: v for k, v in model.params.items()
            if k.startswith(prefix) and k[len(prefix):] not in ("W", "b")}


def _mean_output(model, o, theta: np.ndarray, column: int = 0) -> np.ndarray:
    mean = o.family.mean(theta, _extras_np(model, o))
    return mean if mean.ndim == 1 else mean[:, column]


# ---------------------------------------------------------------- prediction

def predict_point(model, data) -> dict[str, dict[str, np.ndarray]]:
    """Eval-mode predictions: ``mean`` for every family, plus ``prob``/``class``
    for classification families (class labels from the fitted label map)."""
    prep = model.prepare(data, targets_required=False)
    thetas = _thetas(model, prep.design)
    out = {}
    for o in model.outcomes:
        mean = o.family.mean(thetas[o.name], _extras_np(model, o))
        res = {"mean": mean, "theta": thetas[o.name]}
        if isinstance(o.family, Multinomial):
            labels = np.array(model.class_maps[o.name] + [f"class{k}" for k in range(len(model.class_maps[o.name]),
                                                                                      o.family.n_classes)],
                              dtype=object)
            res["prob"] = mean
            res["class"] = labels[np.argmax(mean, axis=1)]
        elif isinstance(o.family, (Binomial, MultiLabel)):
            res["prob"] = mean
            res["class"] = (mean > 0.5).astype(np.int64)
        out[o.name] = res
    return out


def predict_interval(model, data, m_samples: int = 200, alpha: float = 0.1, seed: int = 0,
                     include_noise: bool = True) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Monte Carlo prediction intervals from ``m_samples`` random-effect draws.

    Each draw samples the random effects from the variational posterior and,
    with ``include_noise``, an outcome value from the family given the drawn
    parameters. Quantiles use linear interpolation.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    prep = model.prepare(data, targets_required=False)
    nodes = model.node_params()
    draws: dict[str, list[np.ndarray]] = {o.name: [] for o in model.outcomes}
    for _ in range(m_samples):
        thetas = _thetas(model, prep.design, nodes, mode="train", rng=rng, backbone_mode="eval")
        for o in model.outcomes:
            extras = _extras_np(model, o)
            if include_noise:
                draws[o.name].append(o.family.sample(thetas[o.name], extras, rng))
            else:
                draws[o.name].append(o.family.mean(thetas[o.name], extras))
    out = {}
    for name, ds in draws.items():
        arr = np.stack(ds)
        out[name] = (np.quantile(arr, alpha / 2, axis=0), np.quantile(arr, 1 - alpha / 2, axis=0))
    return out


# ---------------------------------------------------------------- linearisation

def _reference_design(model, design: DesignMatrices, x_cont) -> DesignMatrices:
    """One-row design at ``x_cont`` with modal categories and no random effects."""
    cats = np.array([[np.bincount(design.x_cat[:, j]).argmax() if design.n_rows else 0
                      for j in range(design.x_cat.shape[1])]], dtype=np.int64).reshape(1, -1)
    return DesignMatrices(x_cont, design.cont_names, cats, design.cat_names, design.cat_levels,
                          [z[:1] * 0 for z in design.z_slopes],
                          [np.zeros(1, dtype=np.int64) for _ in design.group_index],
                          design.level_maps, design.random_terms, 1)


def _jacobians(model, o, design: DesignMatrices, column: int = 0):
    """Link-scale value at x-bar (random effects off) and its gradients wrt
    the continuous inputs and wrt the encoder output."""
    xbar = design.x_cont.mean(axis=0, keepdims=True)
    xv = ad.variable(xbar)
    ref = _reference_design(model, design, xv)
    nodes = model.node_params()
    all_terms = tuple(range(len(model.encoder.terms)))
    h = model.encoder.forward(ref, nodes, "eval", drop_terms=all_terms)
    thetas = model.decode(model.backbone.forward(h, nodes, "eval"), nodes)
    val = thetas[o.name][:, column]
    ad.backward(ad.sum(val))
    gx = xv.grad[0] if xv.grad is not None else np.zeros(xbar.shape[1])
    gh = h.grad[0] if h.grad is not None else np.zeros(h.shape[1])
    return float(val.value.reshape(-1)[0]), gx, gh, xbar[0]


@dataclass
class ParameterEstimates:
    coefficients: dict[str, float]
    variance_components: dict[str, float]
    correlations: dict[str, float]
    level_effects: dict[str, np.ndarray]
    residual_variance: float | None


def _term_output_effects(model, i: int, gh: np.ndarray):
    """Per-slope level effects and posterior variances projected on ``gh`` (output scale)."""
    info = model.encoder.terms[i]
    d = model.encoder_config.embed_dim
    j = gh[:d]
    nodes = model.node_params()
    levels = model.encoder.term_levels(i, nodes, "eval", None)
    factor = model.encoder.term_factor(i, nodes)
    fval = None if factor is None else factor.value
    out = {}
    for k, s in enumerate(info.term.columns):
        key = table_key(i, s)
        mean = levels[s].value @ j
        var = np.exp(model.params[f"{key}.log_var"]) @ (j * j)
        if fval is not None:
            if info.cov.kind == "KRON":
                n_s = len(info.term.columns)
                lv = np.exp(np.stack([model.params[f"{table_key(i, c)}.log_var"] for c in info.term.columns],
                                     axis=1)).reshape(-1, d) @ (j * j)
                var = ((fval ** 2) @ lv).reshape(info.n_levels, n_s)[:, k]
            else:
                var = (fval ** 2) @ var
        out[s] = (mean, var)
    return out


def extract_parameters(model, data, outcome: str | None = None, column: int = 0) -> ParameterEstimates:
    """Linearised coefficients at the feature means plus variance components.

    Coefficients are gradients of the link-scale prediction with respect to
    each continuous input at x-bar (random effects off); the intercept is the
    value of the tangent plane at zero. Variance components are the mean of
    E[effect^2] over levels, each level effect projected onto the output
    through the same linearisation.
    """
    o = _outcome(model, outcome)
    prep = model.prepare(data, targets_required=False)
    design = prep.design
    f0, gx, gh, xbar = _jacobians(model, o, design, column)
    coefs = {}
    icpt = f0
    for name, g, xb in zip(design.cont_names, gx, xbar):
        if name == INTERCEPT:
            continue
        coefs[name] = float(g)
        icpt -= float(g) * xb
    if INTERCEPT in design.cont_names:
        coefs = {INTERCEPT: icpt, **coefs}
    vc, corr, effects = {}, {}, {}
    for i, info in enumerate(model.encoder.terms):
        eff = _term_output_effects(model, i, gh)
        for s, (mean, var) in eff.items():
            label = f"{info.term.group}:{s}"
            vc[label] = float(np.mean(mean ** 2 + var))
            effects[label] = mean
        for s1, s2 in itertools.combinations(info.term.columns, 2):
            m1, m2 = eff[s1][0], eff[s2][0]
            den = math.sqrt(float(np.mean(m1 ** 2) * np.mean(m2 ** 2)))
            corr[f"{info.term.group}:{s1}~{s2}"] = float(np.mean(m1 * m2) / den) if den > 0 else 0.0
    resid = None
    if isinstance(o.family, Gaussian):
        resid = float(np.exp(model.params[f"out.{o.name}.log_sigma2"]))
    return ParameterEstimates(coefs, vc, corr, effects, resid)


# ---------------------------------------------------------------- variance decomposition

@dataclass
class VarianceDecomposition:
    sigma2_fixed: float
    sigma2_u: dict[str, float]
    sigma2_eps: float
    icc: dict[str, float]
    r_squared: float
    total_variance: float

    def to_dict(self) -> dict:
        return {"sigma2_fixed": self.sigma2_fixed, "sigma2_u": self.sigma2_u, "sigma2_eps": self.sigma2_eps,
                "icc": self.icc, "r_squared": self.r_squared, "total_variance": self.total_variance}


def variance_decomposition(model, data, outcome: str | None = None) -> VarianceDecomposition:
    """Empirical variance of the fixed path, each random term, and the residual.

    A term's contribution is the change in the prediction when that term is
    switched on at its posterior means. Non-Gaussian outcomes get NaN residual
    variance and a squared-correlation pseudo R^2.
    """
    o = _outcome(model, outcome)
    prep = model.prepare(data)
    y = np.asarray(prep.targets[o.name], dtype=np.float64)
    y = y if y.ndim == 1 else y[:, 0]
    all_terms = tuple(range(len(model.encoder.terms)))
    full = _mean_output(model, o, _thetas(model, prep.design)[o.name])
    fixed = _mean_output(model, o, _thetas(model, prep.design, drop_terms=all_terms)[o.name])
    s2u: dict[str, float] = {}
    by_group: dict[str, float] = {}
    for i, info in enumerate(model.encoder.terms):
        others = tuple(t for t in all_terms if t != i)
        with_i = _mean_output(model, o, _thetas(model, prep.design, drop_terms=others)[o.name])
        v = float(np.var(with_i - fixed))
        s2u[info.term.label] = v
        by_group[info.term.group] = by_group.get(info.term.group, 0.0) + v
    total = float(np.var(y))
    if isinstance(o.family, Gaussian):
        s2e = float(np.exp(model.params[f"out.{o.name}.log_sigma2"]))
        r2 = 1.0 - s2e / total if total > 0 else 0.0
    else:
        s2e = float("nan")
        r2 = float(np.corrcoef(full, y)[0, 1] ** 2) if np.std(full) > 0 and np.std(y) > 0 else 0.0
    icc = {}
    for g, v in by_group.items():
        den = v + (s2e if math.isfinite(s2e) else 0.0)
        icc[g] = v / den if den > 0 else 0.0
    return VarianceDecomposition(float(np.var(fixed)), s2u, s2e, icc, r2, total)


# ---------------------------------------------------------------- Shapley values

@dataclass
class ShapReport:
    features: list[str]
    values: np.ndarray
    baseline: np.ndarray
    prediction: np.ndarray
    std_error: np.ndarray | None = None
    random_effects: np.ndarray | None = None
    random_effect_terms: list[str] = field(default_factory=list)
    edge_importance: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "baseline", "prediction"] + [f"phi[{f}]" for f in self.features])
        for i in range(self.values.shape[0]):
            w.writerow([i, repr(float(self.baseline[i])), repr(float(self.prediction[i]))]
                       + [repr(float(v)) for v in self.values[i]])
        return buf.getvalue()

    def to_json(self) -> str:
        d = {"features": self.features, "values": self.values.tolist(), "baseline": self.baseline.tolist(),
             "prediction": self.prediction.tolist(),
             "mean_abs": dict(zip(self.features, np.abs(self.values).mean(axis=0).tolist()))}
        if self.std_error is not None:
            d["std_error"] = self.std_error.tolist()
        if self.random_effects is not None:
            d["random_effects"] = {"terms": self.random_effect_terms, "values": self.random_effects.tolist()}
        return json.dumps(d, indent=2)


def shapley_weights(p: int) -> np.ndarray:
    """w[s] = s! (p - s - 1)! / p! for coalition size s."""
    return np.array([math.factorial(s) * math.factorial(p - s - 1) / math.factorial(p) for s in range(p)])


def exact_shapley(value_fn, p: int) -> np.ndarray:
    """Shapley values by enumerating every coalition.

    ``value_fn(mask)`` takes a boolean vector of length ``p`` and returns the
    coalition value for every row (shape ``(n,)``).
    """
    if p > MAX_EXACT_FEATURES:
        raise ValueError(f"exact Shapley values need at most {MAX_EXACT_FEATURES} players, got {p}")
    cache = {}
    for bits in range(1 << p):
        mask = np.array([(bits >> j) & 1 for j in range(p)], dtype=bool)
        cache[bits] = np.asarray(value_fn(mask), dtype=np.float64)
    w = shapley_weights(p)
    n = cache[0].shape[0]
    phi = np.zeros((n, p))
    for j in range(p):
        for bits in range(1 << p):
            if bits >> j & 1:
                continue
            s = bin(bits).count("1")
            phi[:, j] += w[s] * (cache[bits | (1 << j)] - cache[bits])
    return phi


def sampled_shapley(value_fn, p: int, n_permutations: int = 64, seed: int = 0):
    """Antithetic permutation sampling; returns (phi, standard error)."""
    rng = np.random.default_rng(seed)
    pairs = max(1, n_permutations // 2)
    ests = []
    for _ in range(pairs):
        perm = rng.permutation(p)
        pair = []
        for order in (perm, perm[::-1]):
            mask = np.zeros(p, dtype=bool)
            prev = np.asarray(value_fn(mask), dtype=np.float64)
            contrib = np.zeros((prev.shape[0], p))
            for j in order:
                mask[j] = True
                cur = np.asarray(value_fn(mask), dtype=np.float64)
                contrib[:, j] = cur - prev
                prev = cur
            pair.append(contrib)
        ests.append(0.5 * (pair[0] + pair[1]))
    ests = np.stack(ests)
    phi = ests.mean(axis=0)
    se = ests.std(axis=0, ddof=1) / math.sqrt(pairs) if pairs > 1 else np.full_like(phi, np.nan)
    return phi, se


def _feature_players(design: DesignMatrices):
    players = [("cont", j, name) for j, name in enumerate(design.cont_names) if name != INTERCEPT]
    players += [("cat", j, name) for j, name in enumerate(design.cat_names)]
    return players


def shapley_values(model, data, mode: str = "exact", background=None, outcome: str | None = None,
                   column: int = 0, n_permutations: int = 64, seed: int = 0) -> ShapReport:
    """Per-feature attributions of the prediction (random effects held at posterior means).

    Features outside a coalition take background values: the feature means
    (modal level for categoricals) by default, or the average over user
    ``background`` rows.
    """
    o = _outcome(model, outcome)
    prep = model.prepare(data, targets_required=False)
    design = prep.design
    players = _feature_players(design)
    p = len(players)
    if mode == "exact" and p > MAX_EXACT_FEATURES:
        raise ValueError(f"exact mode supports at most {MAX_EXACT_FEATURES} features, got {p}")
    if background is None:
        bg_cont = design.x_cont.mean(axis=0, keepdims=True)
        bg_cat = np.array([[np.bincount(design.x_cat[:, j]).argmax() for j in range(design.x_cat.shape[1])]],
                          dtype=np.int64).reshape(1, -1)
    else:
        bgd = model.prepare(background, targets_required=False).design
        bg_cont, bg_cat = bgd.x_cont, bgd.x_cat
    nodes = model.node_params()
    n = design.n_rows

    def value(mask: np.ndarray) -> np.ndarray:
        acc = np.zeros(n)
        for b in range(bg_cont.shape[0]):
            xc = design.x_cont.copy()
            xk = design.x_cat.copy()
            for keep, (kind, j, _) in zip(mask, players):
                if keep:
                    continue
                if kind == "cont":
                    xc[:, j] = bg_cont[b, j]
                else:
                    xk[:, j] = bg_cat[b, j]
            d = DesignMatrices(xc, design.cont_names, xk, design.cat_names, design.cat_levels, design.z_slopes,
                               design.group_index, design.level_maps, design.random_terms, n, design.extra_levels)
            acc += _mean_output(model, o, _thetas(model, d, nodes)[o.name], column)
        return acc / bg_cont.shape[0]

    se = None
    if mode == "exact":
        phi = exact_shapley(value, p)
    elif mode == "sampled":
        phi, se = sampled_shapley(value, p, n_permutations, seed)
    else:
        raise ValueError("mode must be 'exact' or 'sampled'")
    base = value(np.zeros(p, dtype=bool))
    pred = value(np.ones(p, dtype=bool))
    return ShapReport([name for _, _, name in players], phi, base, pred, se)


def shapley_random_effects(model, data, outcome: str | None = None, column: int = 0) -> ShapReport:
    """Attribution over random terms, each switched on or off at its posterior means."""
    o = _outcome(model, outcome)
    prep = model.prepare(data, targets_required=False)
    t = len(model.encoder.terms)
    if t > MAX_RE_TERMS:
        raise ValueError(f"at most {MAX_RE_TERMS} random terms supported, got {t}")
    nodes = model.node_params()

    def value(mask):
        drop = tuple(i for i in range(t) if not mask[i])
        return _mean_output(model, o, _thetas(model, prep.design, nodes, drop_terms=drop)[o.name], column)

    phi = exact_shapley(value, t) if t else np.zeros((prep.n, 0))
    labels = [info.term.label for info in model.encoder.terms]
    base = value(np.zeros(t, dtype=bool))
    pred = value(np.ones(t, dtype=bool))
    return ShapReport(labels, phi, base, pred, random_effects=phi, random_effect_terms=labels)


def edge_importance(model, data, outcome: str | None = None, column: int = 0) -> np.ndarray:
    """|B_ij| times mean |eta_j| times mean |d prediction / d eta_i| (first structured layer).

    Returned in the row = source, column = target orientation. A heuristic,
    not a Shapley value.
    """
    o = _outcome(model, outcome)
    b = model.get_structure_matrix()
    prep = model.prepare(data, targets_required=False)
    nodes = model.node_params()
    h = model.encoder.forward(prep.design, nodes, "eval", extra_levels=prep.design.extra_levels)
    layer = model.backbone
    xi = ad.add(ad.matmul(h, nodes["gsem0.W"]), nodes["gsem0.b"])
    etav = None
    from .gsem import static_transform

    eta = static_transform(xi, layer.adjacency(nodes, 0)) if layer.config.structure == "static" else None
    if eta is None:
        eta, _ = layer.layer_forward(h, nodes, 0, "eval")
    etav = ad.variable(eta.value)
    # continue the network from the structured layer's latent state
    cfg = layer.config
    hcur = {"relu": ad.relu, "tanh": ad.tanh, "gelu": ad.gelu}[cfg.activation](etav)
    if cfg.layer_norm:
        hcur = ad.layer_norm(hcur, nodes["gsem0.ln_gain"], nodes["gsem0.ln_bias"])
    if cfg.residual and hcur.shape == h.shape:
        hcur = ad.add(hcur, h)
    for l in range(1, len(layer.dims) - 1):
        hcur, _ = layer.layer_forward(hcur, nodes, l, "eval")
    raw = model.decode(hcur, nodes)[o.name]
    ad.backward(ad.sum(raw[:, column]))
    down = np.abs(etav.grad).mean(axis=0)
    up = np.abs(eta.value).mean(axis=0)
    imp = np.abs(b) * down[:, None] * up[None, :]
    return imp.T


# ---------------------------------------------------------------- summary

@dataclass
class Summary:
    fixed: list[dict]
    random: list[dict]
    loglik: float
    n_obs: int
    k: int
    aic: float
    bic: float
    outcome: str
    family: str

    FIXED_COLUMNS = ("term", "estimate", "std_error", "z_value", "p_value")
    RANDOM_COLUMNS = ("group", "name", "variance", "std_dev", "corr")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("section",) + self.FIXED_COLUMNS)
        for row in self.fixed:
            w.writerow(["fixed"] + [row[c] for c in self.FIXED_COLUMNS])
        w.writerow(("section",) + self.RANDOM_COLUMNS)
        for row in self.random:
            w.writerow(["random"] + [row[c] for c in self.RANDOM_COLUMNS])
        w.writerow(("section", "loglik", "aic", "bic", "k", "n_obs"))
        w.writerow(["fit", self.loglik, self.aic, self.bic, self.k, self.n_obs])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "family": self.family, "fixed": self.fixed, "random": self.random,
                "loglik": self.loglik, "aic": self.aic, "bic": self.bic, "k": self.k, "n_obs": self.n_obs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def __str__(self) -> str:
        lines = [f"Mixed model fit ({self.family}) for outcome {self.outcome}",
                 f"  logLik {self.loglik:.3f}   AIC {self.aic:.3f}   BIC {self.bic:.3f}   n = {self.n_obs}",
                 "", "Random effects:",
                 f"  {'Group':<12}{'Name':<14}{'Variance':>12}{'Std.Dev.':>12}{'Corr':>8}"]
        for r in self.random:
            corr = "" if r["corr"] in ("", None) else f"{r['corr']:.2f}"
            lines.append(f"  {r['group']:<12}{r['name']:<14}{r['variance']:>12.4f}{r['std_dev']:>12.4f}{corr:>8}")
        lines += ["", "Fixed effects (approximate standard errors):",
                  f"  {'':<14}{'Estimate':>12}{'Std.Err':>12}{'z':>9}{'Pr(>|z|)':>11}"]
        for r in self.fixed:
            lines.append(f"  {r['term']:<14}{r['estimate']:>12.4f}{r['std_error']:>12.4f}"
                         f"{r['z_value']:>9.2f}{r['p_value']:>11.3g}")
        return "\n".join(lines)


def information_criteria(loglik: float, k: int, n: int) -> tuple[float, float]:
    return 2 * k - 2 * loglik, k * math.log(n) - 2 * loglik


def _variance_weights(o, mean: np.ndarray, extras) -> np.ndarray:
    fam = o.family
    if isinstance(fam, (Binomial, MultiLabel)):
        return mean * (1 - mean)
    if isinstance(fam, Poisson):
        return mean
    if isinstance(fam, NegativeBinomial):
        phi = math.exp(float(extras["log_phi"]))
        return mean / (1 + mean / phi)
    return np.ones_like(mean)


def summary(model, data, outcome: str | None = None) -> Summary:
    """lme4-style table: linearised fixed effects, variance components, fit criteria."""
    o = _outcome(model, outcome)
    prep = model.prepare(data)
    est = extract_parameters(model, data, o.name)
    design = prep.design
    names = list(est.coefficients)
    cont_idx = [design.cont_names.index(n) for n in names if n != INTERCEPT]
    xbar = design.x_cont.mean(axis=0)
    cols = [np.ones(design.n_rows)] if INTERCEPT in names else []
    cols += [design.x_cont[:, j] - xbar[j] for j in cont_idx]
    x = np.column_stack(cols) if cols else np.zeros((design.n_rows, 0))
    thetas = _thetas(model, design)
    extras = _extras_np(model, o)
    mean = _mean_output(model, o, thetas[o.name])
    w = _variance_weights(o, mean, extras)
    scale = est.residual_variance if est.residual_variance is not None else 1.0
    info = x.T @ (x * w[:, None])
    try:
        cov = scale * np.linalg.inv(info)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(len(names), np.nan)
    # intercept SE refers to the centred surrogate; report it at x = 0 via the delta method
    fixed = []
    for k, name in enumerate(names):
        beta = est.coefficients[name]
        s = float(se[k]) if k < len(se) else float("nan")
        if name == INTERCEPT and len(names) > 1 and np.all(np.isfinite(se)):
            g = np.concatenate([[1.0], -xbar[cont_idx]])
            s = float(math.sqrt(max(g @ cov @ g, 0.0)))
        z = beta / s if s > 0 else float("nan")
        p = float(2 * stats.norm.sf(abs(z))) if math.isfinite(z) else float("nan")
        fixed.append({"term": name, "estimate": float(beta), "std_error": s, "z_value": z, "p_value": p})
    random = []
    for label, v in est.variance_components.items():
        group, slope = label.split(":", 1)
        corr = ""
        for ck, cv in est.correlations.items():
            g2, pair = ck.split(":", 1)
            a, b = pair.split("~")
            if g2 == group and b == slope:
                corr = cv
        random.append({"group": group, "name": slope, "variance": v, "std_dev": math.sqrt(max(v, 0.0)),
                       "corr": corr})
    if est.residual_variance is not None:
        random.append({"group": "Residual", "name": "", "variance": est.residual_variance,
                       "std_dev": math.sqrt(est.residual_variance), "corr": ""})
    nodes = model.node_params()
    th = model.forward(design, nodes, "eval")
    nll = float(np.sum(o.family.nll(th[o.name], prep.targets[o.name], model.extras(o, nodes)).value))
    loglik = -nll
    k = len(names) + len(est.variance_components) + len(est.correlations) + len(extras)
    aic, bic = information_criteria(loglik, k, prep.n)
    return Summary(fixed, random, loglik, prep.n, k, aic, bic, o.name, o.family.name)
