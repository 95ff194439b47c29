"""Mixed-effects encoder: fixed-effect embeddings plus variational random effects.

Each (grouping factor, slope term) pair owns a table of per-level posterior
means and log-variances. The encoder output is

    H = H_fixed + sum_{g,s} z_{g,s} * u_{g,s}

where a scalar slope value multiplies the whole embedding row. When the fixed
representation is wider than the random-effect embedding (categorical
embeddings appended), the random contribution lands on the leading
``embed_dim`` columns.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .covariance import CovarianceSpec, fixed_factor, structure_factor, trainable_structure_params
from .formula import INTERCEPT, DesignMatrices, RandomTerm

log = logging.getLogger(__name__)

UNKNOWN_STRATEGIES = ("zero", "learned")
INIT_LOG_VAR = math.log(0.1 ** 2)
INIT_MU_SD = 0.01


@dataclass
class EncoderConfig:
    embed_dim: int = 16
    cat_embed_dims: dict[str, int] = field(default_factory=dict)
    enforce_centering: bool = True
    unknown_strategy: str = "zero"
    unknown_rate: float = 0.01

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be at least 1")
        if self.unknown_strategy not in UNKNOWN_STRATEGIES:
            raise ValueError(f"unknown_strategy must be one of {UNKNOWN_STRATEGIES}")


def default_cat_dim(cardinality: int) -> int:
    return max(1, min(16, math.ceil(cardinality / 2)))


@dataclass
class VariationalTable:
    """Posterior means/log-variances for one (group factor, slope term) pair.

    Fields hold numpy arrays or autodiff nodes; the ops below accept either.
    """

    mu: object
    log_var: object
    group_factor: str
    slope_term: str
    cov: CovarianceSpec | None = None
    unknown_row: object | None = None

    @property
    def n_levels(self) -> int:
        return np.shape(_value(self.mu))[0]


def _value(x):
    return x.value if isinstance(x, ad.Node) else np.asarray(x)


def table_key(term_index: int, slope: str) -> str:
    return f"re{term_index}.{slope}"


# ---------------------------------------------------------------- ops

def embed_fixed(design: DesignMatrices, nodes: Mapping[str, ad.Node]) -> ad.Node:
    """``[X_cont W_cont, Embed_1(x_cat_1), ...]``."""
    parts = [ad.matmul(design.x_cont, nodes["enc.W_cont"])]
    for j, name in enumerate(design.cat_names):
        table = nodes[f"enc.emb.{name}"]
        codes = design.x_cat[:, j]
        if codes.size and (codes.min() < 0 or codes.max() >= table.shape[0]):
            raise IndexError(f"categorical code out of range for {name!r}")
        parts.append(ad.take_rows(table, codes))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def enforce_centering(table: VariationalTable, inplace: bool = False):
    """Re-center the posterior means so each embedding column sums to zero.

    Works on nodes (returns a centered node, gradient flows through the
    projection) or on arrays (``inplace`` updates the array).
    """
    if table.cov is not None and not table.cov.exchangeable:
        log.warning("centering skipped for non-exchangeable covariance %s on %s",
                    table.cov.kind, table.group_factor)
        return table.mu
    mu = table.mu
    if isinstance(mu, ad.Node):
        return ad.sub(mu, ad.mean(mu, axis=0, keepdims=True))
    arr = np.asarray(mu)
    if inplace:
        arr -= arr.mean(axis=0, keepdims=True)
        return arr
    return arr - arr.mean(axis=0, keepdims=True)


def resolve_unknown_group(table: VariationalTable, strategy: str):
    """Embedding row used for levels unseen during training."""
    if strategy == "zero":
        d = np.shape(_value(table.mu))[1]
        return np.zeros(d)
    if strategy == "learned":
        if table.unknown_row is None:
            raise ValueError(f"learned unknown strategy but no unknown row for {table.group_factor}/{table.slope_term}")
        return table.unknown_row
    raise ValueError(f"unknown strategy {strategy!r}")


def level_effects(table: VariationalTable, mode: str, rng: np.random.Generator | None,
                  center: bool = False, eps: np.ndarray | None = None) -> ad.Node:
    """Per-level draws (train) or posterior means (eval), before any correlating transform."""
    mu = ad.as_node(table.mu)
    if center:
        mu = enforce_centering(VariationalTable(mu, table.log_var, table.group_factor, table.slope_term, table.cov))
    if mode == "eval":
        return mu
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    sd = ad.exp(ad.mul(0.5, ad.as_node(table.log_var)))
    return ad.add(mu, ad.mul(sd, eps))


def gather_rows(levels: ad.Node, group_index: np.ndarray, unknown) -> ad.Node:
    """Row lookup where index -1 selects the unknown-group row."""
    group_index = np.asarray(group_index)
    if (group_index >= 0).all():
        return ad.take_rows(levels, group_index)
    unknown = ad.reshape(ad.as_node(unknown), (1, levels.shape[1]))
    ext = ad.concat([levels, unknown], axis=0)
    idx = np.where(group_index < 0, levels.shape[0], group_index)
    return ad.take_rows(ext, idx)


def sample_random_effects(table: VariationalTable, group_index: np.ndarray, mode: str,
                          rng: np.random.Generator | None = None, factor=None,
                          strategy: str = "zero", center: bool = False) -> ad.Node:
    """Row-gathered random effects (n x d) for one table."""
    levels = level_effects(table, mode, rng, center=center)
    if factor is not None:
        levels = ad.matmul(factor, levels)
    unknown = resolve_unknown_group(table, strategy) if (np.asarray(group_index) < 0).any() else None
    return gather_rows(levels, group_index, unknown)


def combine(h_fixed: ad.Node, z_slopes: list[np.ndarray], u_per_term: list[list[ad.Node]]) -> ad.Node:
    """``H_fixed + sum z * u`` with the slope scalar broadcast over the embedding."""
    total = None
    for z, us in zip(z_slopes, u_per_term):
        if z.shape[1] != len(us):
            raise ad.ShapeError(f"z has {z.shape[1]} columns but {len(us)} effect blocks were given")
        for s, u in enumerate(us):
            if u.shape[0] != h_fixed.shape[0]:
                raise ad.ShapeError(f"random effect rows {u.shape[0]} != {h_fixed.shape[0]}")
            term = ad.mul(z[:, s:s + 1], u)
            total = term if total is None else ad.add(total, term)
    if total is None:
        return h_fixed
    d = total.shape[1]
    width = h_fixed.shape[1]
    if d > width:
        raise ad.ShapeError(f"random-effect width {d} exceeds fixed representation width {width}")
    if d < width:
        total = ad.concat([total, np.zeros((total.shape[0], width - d))], axis=1)
    return ad.add(h_fixed, total)


# ---------------------------------------------------------------- encoder component

@dataclass
class TermInfo:
    """Static description of one random term as fitted."""

    term: RandomTerm
    n_levels: int
    cov: CovarianceSpec | None = None
    level_coords: np.ndarray | None = None
    kinship: np.ndarray | None = None  # aligned to level order


class Encoder:
    """Owns the encoder parameter layout and its forward pass."""

    def __init__(self, config: EncoderConfig, cont_names, cat_names, cardinalities, terms: list[TermInfo]):
        self.config = config
        self.cont_names = tuple(cont_names)
        self.cat_names = tuple(cat_names)
        self.cardinalities = tuple(cardinalities)
        self.terms = terms
        self.cat_dims = {c: int(config.cat_embed_dims.get(c, default_cat_dim(k)))
                         for c, k in zip(self.cat_names, self.cardinalities)}

    @property
    def output_dim(self) -> int:
        return self.config.embed_dim + sum(self.cat_dims.values())

    def table_keys(self) -> list[tuple[int, str]]:
        return [(i, s) for i, info in enumerate(self.terms) for s in info.term.columns]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        d = self.config.embed_dim
        p = len(self.cont_names)
        params = {"enc.W_cont": rng.normal(0.0, 1.0 / math.sqrt(max(p, 1)), size=(p, d))}
        for c, k in zip(self.cat_names, self.cardinalities):
            # one extra row is the reserved unknown-category code
            params[f"enc.emb.{c}"] = rng.normal(0.0, 0.1, size=(k + 1, self.cat_dims[c]))
        for i, info in enumerate(self.terms):
            for s in info.term.columns:
                params.update(self.new_table_params(i, s, info.n_levels, rng))
            if info.cov is not None:
                for name, val in trainable_structure_params(info.cov, info.n_levels).items():
                    params[f"re{i}.cov.{name}"] = np.array(val, dtype=np.float64)
        return params

    def new_table_params(self, term_index: int, slope: str, n_levels: int,
                         rng: np.random.Generator) -> dict[str, np.ndarray]:
        d = self.config.embed_dim
        key = table_key(term_index, slope)
        out = {f"{key}.mu": rng.normal(0.0, INIT_MU_SD, size=(n_levels, d)),
               f"{key}.log_var": np.full((n_levels, d), INIT_LOG_VAR)}
        if self.config.unknown_strategy == "learned":
            out[f"{key}.unknown"] = np.zeros(d)
        return out

    def tables(self, nodes: Mapping) -> list[VariationalTable]:
        out = []
        for i, info in enumerate(self.terms):
            for s in info.term.columns:
                key = table_key(i, s)
                out.append(VariationalTable(nodes[f"{key}.mu"], nodes[f"{key}.log_var"], info.term.group, s,
                                            info.cov, nodes.get(f"{key}.unknown")))
        return out

    def term_factor(self, i: int, nodes: Mapping):
        """Correlating transform across levels for term ``i`` (None for IID)."""
        info = self.terms[i]
        cov = info.cov
        if cov is None or cov.kind == "IID":
            return None
        if cov.kind in ("AR1", "GP"):
            raw = {k.split(".")[-1]: v for k, v in nodes.items() if k.startswith(f"re{i}.cov.")}
            return structure_factor(cov, info.n_levels, raw, info.level_coords)
        if cov.kind == "CS":
            return cs_symmetric_root(nodes[f"re{i}.cov.rho_raw"], info.n_levels)
        return ad.constant(fixed_factor(cov, info.n_levels, len(info.term.columns),
                                        info.level_coords, info.kinship))

    def should_center(self, i: int) -> bool:
        cov = self.terms[i].cov
        return self.config.enforce_centering and (cov is None or cov.exchangeable)

    def term_levels(self, i: int, nodes: Mapping, mode: str, rng, eps=None) -> dict[str, ad.Node]:
        """Level effects for every slope table of term ``i`` after the correlating transform."""
        info = self.terms[i]
        center = self.should_center(i)
        tables = {}
        for s in info.term.columns:
            key = table_key(i, s)
            t = VariationalTable(nodes[f"{key}.mu"], nodes[f"{key}.log_var"], info.term.group, s, info.cov)
            tables[s] = level_effects(t, mode, rng, center=center,
                                      eps=None if eps is None else eps.get(key))
        factor = self.term_factor(i, nodes)
        if factor is None:
            return tables
        if info.cov.kind == "KRON":
            cols = info.term.columns
            n_s, d = len(cols), self.config.embed_dim
            stacked = ad.concat([ad.reshape(tables[s], (info.n_levels, 1, d)) for s in cols], axis=1)
            mixed = ad.reshape(ad.matmul(factor, ad.reshape(stacked, (info.n_levels * n_s, d))),
                               (info.n_levels, n_s, d))
            return {s: ad.reshape(mixed[:, k:k + 1, :], (info.n_levels, d)) for k, s in enumerate(cols)}
        return {s: ad.matmul(factor, lv) for s, lv in tables.items()}

    def forward(self, design: DesignMatrices, nodes: Mapping, mode: str, rng=None,
                extra_levels: Mapping[int, np.ndarray] | None = None, drop_terms=(),
                eps=None) -> ad.Node:
        """Encoder output H (n x output_dim).

        ``extra_levels[i]`` is a constant matrix mapping fitted level effects to
        effects for additional levels (Henderson prediction); their indices
        follow the fitted ones. ``drop_terms`` zeroes the listed term indices.
        """
        h = embed_fixed(design, nodes)
        contributions = self.term_contributions(design, nodes, mode, rng, extra_levels, drop_terms, eps)
        zs = [design.z_slopes[i] for i in contributions]
        us = [contributions[i] for i in contributions]
        return combine(h, zs, us)

    def term_contributions(self, design, nodes, mode, rng=None, extra_levels=None, drop_terms=(), eps=None):
        out = {}
        for i, info in enumerate(self.terms):
            if i in drop_terms:
                continue
            levels = self.term_levels(i, nodes, mode, rng, eps)
            us = []
            for s in info.term.columns:
                lv = levels[s]
                if extra_levels and i in extra_levels:
                    lv = ad.concat([lv, ad.matmul(extra_levels[i], lv)], axis=0)
                key = table_key(i, s)
                unknown = None
                if (design.group_index[i] < 0).any():
                    if self.config.unknown_strategy == "learned":
                        unknown = nodes[f"{key}.unknown"]
                    else:
                        unknown = np.zeros(self.config.embed_dim)
                us.append(gather_rows(lv, design.group_index[i], unknown))
            out[i] = us
        return out

    def recenter(self, params: dict[str, np.ndarray]) -> None:
        """Apply the centering constraint to stored means after an update."""
        for i, info in enumerate(self.terms):
            if not self.should_center(i):
                continue
            for s in info.term.columns:
                mu = params[f"{table_key(i, s)}.mu"]
                mu -= mu.mean(axis=0, keepdims=True)


def cs_symmetric_root(rho_raw: ad.Node, n: int) -> ad.Node:
    """Symmetric square root of the compound-symmetry correlation matrix.

    It maps zero-sum vectors to zero-sum vectors, so centering the variational
    means also centers the correlated effects.
    """
    lo = -1.0 / (n - 1) if n > 1 else -0.999
    rho = ad.add(lo, ad.mul(1.0 - lo, ad.sigmoid(rho_raw)))
    proj = np.full((n, n), 1.0 / n)
    resid = np.eye(n) - proj
    a = ad.sqrt(ad.add(ad.sub(1.0, rho), 1e-12))
    b = ad.sqrt(ad.add(ad.add(1.0, ad.mul(float(n - 1), rho)), 1e-12))
    return ad.add(ad.mul(a, resid), ad.mul(b, proj))


def kl_divergence(tables: list[VariationalTable]) -> ad.Node:
    """Sum over tables and levels of KL(N(mu, diag sigma^2) || N(0, I))."""
    total = None
    for t in tables:
        mu, lv = ad.as_node(t.mu), ad.as_node(t.log_var)
        d = mu.shape[0] * mu.shape[1]
        term = ad.mul(0.5, ad.sub(ad.sum(ad.add(ad.add(ad.square(mu), ad.exp(lv)), ad.neg(lv))), float(d)))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else ad.constant(0.0)


def slope_label(slope: str) -> str:
    return "(Intercept)" if slope == INTERCEPT else slope
