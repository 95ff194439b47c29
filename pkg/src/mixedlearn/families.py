"""Outcome families, their negative log-likelihoods, and output-level SEM."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, ClassVar, Mapping, Sequence

import numpy as np
from scipy import special

from . import autodiff as ad
from .gsem import dag_penalty, find_cycle, sparse_penalty

LOG_2PI = math.log(2.0 * math.pi)


def _reduce(per_row: ad.Node, reduction: str) -> ad.Node:
    if reduction == "none":
        return per_row
    if reduction == "sum":
        return ad.sum(per_row)
    if reduction == "mean":
        return ad.mean(per_row)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- NLLs

def gaussian_nll(mu, log_sigma2, y, reduction: str = "mean") -> ad.Node:
    mu, log_sigma2 = ad.as_node(mu), ad.as_node(log_sigma2)
    resid = ad.sub(np.asarray(y, dtype=np.float64), mu)
    per = ad.mul(0.5, ad.add(ad.add(LOG_2PI, log_sigma2),
                             ad.div(ad.square(resid), ad.exp(log_sigma2))))
    return _reduce(per, reduction)


def binomial_nll(logit, y, reduction: str = "mean") -> ad.Node:
    logit = ad.as_node(logit)
    per = ad.sub(ad.softplus(logit), ad.mul(np.asarray(y, dtype=np.float64), logit))
    return _reduce(per, reduction)


def multinomial_nll(logits, y, reduction: str = "mean") -> ad.Node:
    logits = ad.as_node(logits)
    y = np.asarray(y, dtype=np.int64)
    k = logits.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"class labels must lie in [0, {k})")
    picked = ad.sum(ad.mul(logits, np.eye(k)[y]), axis=-1)
    per = ad.sub(ad.logsumexp(logits, axis=-1), picked)
    return _reduce(per, reduction)


def poisson_nll(eta, y, reduction: str = "mean") -> ad.Node:
    eta = ad.as_node(eta)
    y = np.asarray(y, dtype=np.float64)
    per = ad.add(ad.sub(ad.exp(eta), ad.mul(y, eta)), special.gammaln(y + 1.0))
    return _reduce(per, reduction)


def negbin_nll(eta, log_phi, y, reduction: str = "mean") -> ad.Node:
    """NB2 with mean exp(eta) and dispersion phi (variance mu + mu^2 / phi)."""
    eta, log_phi = ad.as_node(eta), ad.as_node(log_phi)
    y = np.asarray(y, dtype=np.float64)
    phi = ad.exp(log_phi)
    # log(phi + mu) computed stably as log_phi + softplus(eta - log_phi)
    log_phi_mu = ad.add(log_phi, ad.softplus(ad.sub(eta, log_phi)))
    per = ad.neg(ad.lgamma(ad.add(y, phi)))
    per = ad.add(per, ad.lgamma(phi))
    per = ad.add(per, special.gammaln(y + 1.0))
    per = ad.sub(per, ad.mul(phi, ad.sub(log_phi, log_phi_mu)))
    per = ad.sub(per, ad.mul(y, ad.sub(eta, log_phi_mu)))
    return _reduce(per, reduction)


def mvgaussian_nll(mu, chol_factor, y, reduction: str = "mean") -> ad.Node:
    """Multivariate normal NLL with covariance L L^T; ``mu``/``y`` are n x m."""
    mu, chol = ad.as_node(mu), ad.as_node(chol_factor)
    y = np.asarray(y, dtype=np.float64)
    m = chol.shape[0]
    resid = ad.sub(y, mu)
    white = ad.triangular_solve(chol, ad.transpose(resid), lower=True)
    quad = ad.sum(ad.square(white), axis=0)
    logdet = ad.sum(ad.log(ad.sum(ad.mul(chol, np.eye(m)), axis=1)))
    per = ad.mul(0.5, ad.add(ad.add(m * LOG_2PI, ad.mul(2.0, logdet)), quad))
    return _reduce(per, reduction)


def multilabel_nll(logits, y, reduction: str = "mean") -> ad.Node:
    per = ad.sum(binomial_nll(logits, y, reduction="none"), axis=-1)
    return _reduce(per, reduction)


def chol_from_raw(raw) -> ad.Node:
    """Lower factor with exponentiated diagonal from an unconstrained square matrix."""
    raw = ad.as_node(raw)
    m = raw.shape[0]
    eye = np.eye(m)
    strict = ad.mul(raw, np.tril(np.ones((m, m)), -1))
    diag = ad.mul(ad.exp(ad.mul(raw, eye)), eye)
    return ad.add(strict, diag)


# ---------------------------------------------------------------- families

@dataclass
class Family:
    name: ClassVar[str] = ""

    def width(self) -> int:
        return 1

    def param_names(self) -> list[str]:
        return ["eta"]

    def extra_params(self, y: np.ndarray | None) -> dict[str, np.ndarray]:
        return {}

    def init_bias(self, y: np.ndarray | None) -> np.ndarray:
        return np.zeros(self.width())

    def nll(self, theta: ad.Node, y, extras: Mapping[str, ad.Node]) -> ad.Node:
        raise NotImplementedError

    def mean(self, theta: np.ndarray, extras: Mapping[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def sample(self, theta: np.ndarray, extras, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.name}


@dataclass
class Gaussian(Family):
    name: ClassVar[str] = "gaussian"
    sigma2_init: float | None = None

    def param_names(self):
        return ["mu"]

    def extra_params(self, y):
        s2 = self.sigma2_init
        if s2 is None:
            s2 = float(np.var(y)) if y is not None and np.var(y) > 0 else 1.0
        return {"log_sigma2": np.array(math.log(s2))}

    def init_bias(self, y):
        return np.array([float(np.mean(y))]) if y is not None else np.zeros(1)

    def nll(self, theta, y, extras):
        return gaussian_nll(ad.reshape(theta, (theta.shape[0],)), extras["log_sigma2"], y, "none")

    def mean(self, theta, extras):
        return theta[:, 0]

    def sample(self, theta, extras, rng):
        return theta[:, 0] + math.exp(0.5 * float(extras["log_sigma2"])) * rng.standard_normal(theta.shape[0])


@dataclass
class Binomial(Family):
    name: ClassVar[str] = "binomial"

    def param_names(self):
        return ["logit"]

    def init_bias(self, y):
        if y is None:
            return np.zeros(1)
        p = float(np.clip(np.mean(y), 1e-3, 1 - 1e-3))
        return np.array([math.log(p / (1 - p))])

    def nll(self, theta, y, extras):
        return binomial_nll(ad.reshape(theta, (theta.shape[0],)), y, "none")

    def mean(self, theta, extras):
        return special.expit(theta[:, 0])

    def sample(self, theta, extras, rng):
        return (rng.random(theta.shape[0]) < special.expit(theta[:, 0])).astype(float)


@dataclass
class Multinomial(Family):
    name: ClassVar[str] = "multinomial"
    n_classes: int = 2

    def width(self):
        return self.n_classes

    def param_names(self):
        return [f"logit{k}" for k in range(self.n_classes)]

    def nll(self, theta, y, extras):
        return multinomial_nll(theta, y, "none")

    def mean(self, theta, extras):
        return special.softmax(theta, axis=-1)

    def sample(self, theta, extras, rng):
        p = special.softmax(theta, axis=-1)
        u = rng.random((theta.shape[0], 1))
        return (p.cumsum(axis=1) < u).sum(axis=1).astype(float)

    def to_dict(self):
        return {"family": self.name, "n_classes": self.n_classes}


@dataclass
class Poisson(Family):
    name: ClassVar[str] = "poisson"

    def param_names(self):
        return ["log_rate"]

    def init_bias(self, y):
        return np.array([math.log(max(float(np.mean(y)), 1e-3))]) if y is not None else np.zeros(1)

    def nll(self, theta, y, extras):
        return poisson_nll(ad.reshape(theta, (theta.shape[0],)), y, "none")

    def mean(self, theta, extras):
        return np.exp(theta[:, 0])

    def sample(self, theta, extras, rng):
        return rng.poisson(np.exp(theta[:, 0])).astype(float)


@dataclass
class NegativeBinomial(Family):
    name: ClassVar[str] = "negbin"
    phi_init: float = 1.0

    def param_names(self):
        return ["log_mean"]

    def extra_params(self, y):
        return {"log_phi": np.array(math.log(self.phi_init))}

    def init_bias(self, y):
        return np.array([math.log(max(float(np.mean(y)), 1e-3))]) if y is not None else np.zeros(1)

    def nll(self, theta, y, extras):
        return negbin_nll(ad.reshape(theta, (theta.shape[0],)), extras["log_phi"], y, "none")

    def mean(self, theta, extras):
        return np.exp(theta[:, 0])

    def sample(self, theta, extras, rng):
        phi = math.exp(float(extras["log_phi"]))
        lam = rng.gamma(phi, np.exp(theta[:, 0]) / phi)
        return rng.poisson(lam).astype(float)

    def to_dict(self):
        return {"family": self.name, "phi_init": self.phi_init}


@dataclass
class MultivariateGaussian(Family):
    name: ClassVar[str] = "mvgaussian"
    n_outcomes: int = 2

    def width(self):
        return self.n_outcomes

    def param_names(self):
        return [f"mu{j}" for j in range(self.n_outcomes)]

    def extra_params(self, y):
        raw = np.zeros((self.n_outcomes, self.n_outcomes))
        if y is not None:
            sd = np.sqrt(np.maximum(np.var(y, axis=0), 1e-12))
            raw[np.diag_indices(self.n_outcomes)] = np.log(sd)
        return {"chol_raw": raw}

    def init_bias(self, y):
        return np.mean(y, axis=0) if y is not None else np.zeros(self.n_outcomes)

    def nll(self, theta, y, extras):
        return mvgaussian_nll(theta, chol_from_raw(extras["chol_raw"]), y, "none")

    def mean(self, theta, extras):
        return theta

    def sample(self, theta, extras, rng):
        raw = np.asarray(extras["chol_raw"])
        L = np.tril(raw, -1) + np.diag(np.exp(np.diag(raw)))
        return theta + rng.standard_normal(theta.shape) @ L.T

    def to_dict(self):
        return {"family": self.name, "n_outcomes": self.n_outcomes}


@dataclass
class MultiLabel(Family):
    name: ClassVar[str] = "multilabel"
    n_outcomes: int = 2

    def width(self):
        return self.n_outcomes

    def param_names(self):
        return [f"logit{j}" for j in range(self.n_outcomes)]

    def nll(self, theta, y, extras):
        return multilabel_nll(theta, y, "none")

    def mean(self, theta, extras):
        return special.expit(theta)

    def sample(self, theta, extras, rng):
        return (rng.random(theta.shape) < special.expit(theta)).astype(float)

    def to_dict(self):
        return {"family": self.name, "n_outcomes": self.n_outcomes}


FAMILIES = {cls().name: cls for cls in
            (Gaussian, Binomial, Multinomial, Poisson, NegativeBinomial, MultivariateGaussian, MultiLabel)}


def family_from_dict(d: Mapping[str, Any]) -> Family:
    d = dict(d)
    name = d.pop("family")
    if name not in FAMILIES:
        raise ValueError(f"unknown family {name!r}; expected one of {sorted(FAMILIES)}")
    return FAMILIES[name](**d)


@dataclass
class OutcomeSpec:
    name: str
    y: str | list[str]
    family: Family = field(default_factory=Gaussian)
    weight: float = 1.0

    @property
    def columns(self) -> list[str]:
        return [self.y] if isinstance(self.y, str) else list(self.y)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "y": self.y, "family": self.family.to_dict(), "weight": self.weight}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "OutcomeSpec":
        return cls(d["name"], d["y"], family_from_dict(d["family"]), d.get("weight", 1.0))


def check_outcomes(outcomes: Sequence[OutcomeSpec]) -> None:
    names = [o.name for o in outcomes]
    if len(set(names)) != len(names):
        raise ValueError(f"outcome names must be unique: {names}")


def head_forward(h, w, b) -> ad.Node:
    """theta_raw = H W + b (link applied inside each NLL)."""
    return ad.add(ad.matmul(h, w), b)


# ---------------------------------------------------------------- output SEM

OUTPUT_SEM_MODES = ("none", "learned", "edges")


class CycleError(ValueError):
    def __init__(self, path: list[str]):
        super().__init__("edge list contains a cycle: " + " -> ".join(path))
        self.path = path


@dataclass
class OutputSem:
    """Directed dependencies across the concatenated outcome-parameter axis.

    ``free`` marks trainable positions of ``B_out`` (target x source) and
    ``fixed`` holds user-fixed weights.
    """

    mode: str
    labels: list[str]
    free: np.ndarray
    fixed: np.ndarray
    edges: list[dict] = field(default_factory=list)

    @classmethod
    def build(cls, mode: str, labels: list[str], edges: Sequence[Mapping] | None = None) -> "OutputSem":
        if mode not in OUTPUT_SEM_MODES:
            raise ValueError(f"output SEM mode must be one of {OUTPUT_SEM_MODES}")
        p = len(labels)
        free = np.zeros((p, p))
        fixed = np.zeros((p, p))
        edges = [dict(e) for e in (edges or [])]
        if mode == "learned":
            free = 1.0 - np.eye(p)
        elif mode == "edges":
            index = {lab: i for i, lab in enumerate(labels)}
            adj = np.zeros((p, p), dtype=int)
            for e in edges:
                for key in ("from", "to"):
                    if e[key] not in index:
                        raise ValueError(f"unknown outcome parameter {e[key]!r}; known: {labels}")
                s, t = index[e["from"]], index[e["to"]]
                if s == t:
                    raise CycleError([e["from"], e["to"]])
                adj[s, t] = 1
                w = e.get("weight", "free")
                if w == "free":
                    free[t, s] = 1.0
                else:
                    fixed[t, s] = float(w)
            cycle = find_cycle(adj)
            if cycle is not None:
                raise CycleError([labels[i] for i in cycle])
        return cls(mode, list(labels), free, fixed, edges)

    def matrix(self, nodes: Mapping) -> ad.Node:
        b = ad.constant(self.fixed)
        if self.free.any():
            b = ad.add(b, ad.mul(nodes["outsem.B"], self.free))
        return b

    def apply(self, theta_raw: ad.Node, nodes: Mapping) -> ad.Node:
        return output_sem(theta_raw, self.matrix(nodes), self.mode)

    def penalties(self, nodes: Mapping) -> dict[str, ad.Node]:
        if self.mode != "learned":
            return {}
        b = self.matrix(nodes)
        return {"dag": dag_penalty(b), "sparse": sparse_penalty(b)}

    def to_dict(self) -> dict:
        return {"mode": self.mode, "edges": self.edges}


def output_sem(theta_raw, b_out, mode: str = "learned") -> ad.Node:
    """theta = (I - B_out)^{-1} theta_raw for each row; ``mode == 'none'`` is the identity."""
    theta_raw = ad.as_node(theta_raw)
    if mode == "none":
        return theta_raw
    b_out = ad.as_node(b_out)
    p = b_out.shape[0]
    a = ad.sub(np.eye(p), b_out)
    if np.allclose(np.triu(b_out.value), 0.0):
        sol = ad.triangular_solve(a, ad.transpose(theta_raw), lower=True, unit_diagonal=True)
    else:
        sol = ad.solve(a, ad.transpose(theta_raw))
    return ad.transpose(sol)


def load_edge_list(path_or_text) -> list[dict]:
    """Edge list JSON: ``[{"from": "a.mu", "to": "b.logit", "weight": 0.5 | "free"}]``."""
    text = str(path_or_text)
    if not text.lstrip().startswith("["):
        with open(path_or_text) as fh:
            text = fh.read()
    edges = json.loads(text)
    if not isinstance(edges, list) or not all(isinstance(e, dict) and "from" in e and "to" in e for e in edges):
        raise ValueError("edge list must be a JSON array of objects with 'from' and 'to'")
    return edges
