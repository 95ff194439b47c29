"""Synthetic datasets with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .covariance import build_gp_rbf
from .data import ColumnTable

KINDS = ("lmm", "sleepstudy_like", "sem_chain", "spatial")


@dataclass
class Simulation:
    data: ColumnTable
    truth: dict[str, Any]


def simulate_lmm(n_groups: int = 30, n_per_group: int = 20, beta=(2.0, -1.0), sigma_u: float = 1.0,
                 sigma_e: float = 0.5, seed: int = 0) -> Simulation:
    """y = b0 + sum_j b_j x_j + u_g + e with standard-normal covariates."""
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=np.float64)
    n = n_groups * n_per_group
    g = np.repeat(np.arange(n_groups), n_per_group)
    x = rng.standard_normal((n, beta.size - 1))
    u = sigma_u * rng.standard_normal(n_groups)
    y = beta[0] + x @ beta[1:] + u[g] + sigma_e * rng.standard_normal(n)
    cols = {f"x{j + 1}": x[:, j] for j in range(x.shape[1])}
    cols["g"] = np.array([f"g{k}" for k in g], dtype=object)
    cols["y"] = y
    return Simulation(ColumnTable(cols), {"beta": beta, "u": u, "sigma_u2": sigma_u ** 2,
                                          "sigma_e2": sigma_e ** 2, "group": g})


def simulate_sleepstudy_like(n_subjects: int = 18, n_days: int = 10, beta=(251.4, 10.5),
                             sd_intercept: float = 24.7, sd_slope: float = 5.9, corr: float = 0.07,
                             sigma_e: float = 25.6, seed: int = 0) -> Simulation:
    """Random intercept and slope over ``n_days`` time points per subject."""
    rng = np.random.default_rng(seed)
    cov = np.array([[sd_intercept ** 2, corr * sd_intercept * sd_slope],
                    [corr * sd_intercept * sd_slope, sd_slope ** 2]])
    b = rng.multivariate_normal(np.zeros(2), cov, size=n_subjects)
    subj = np.repeat(np.arange(n_subjects), n_days)
    days = np.tile(np.arange(n_days, dtype=np.float64), n_subjects)
    y = beta[0] + beta[1] * days + b[subj, 0] + b[subj, 1] * days + sigma_e * rng.standard_normal(subj.size)
    cols = {"Subject": np.array([f"S{300 + k}" for k in subj], dtype=object), "Days": days, "Reaction": y}
    return Simulation(ColumnTable(cols), {"beta": np.asarray(beta), "b": b, "cov": cov,
                                          "sigma_e2": sigma_e ** 2, "subject": subj})


def simulate_sem_chain(n: int = 2000, coefs=(1.2, -1.5, 1.3), noise: float = 0.1, seed: int = 0) -> Simulation:
    """Linear chain x1 -> x2 -> x3 -> y."""
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal(n)
    x2 = coefs[0] * x1 + noise * rng.standard_normal(n)
    x3 = coefs[1] * x2 + noise * rng.standard_normal(n)
    y = coefs[2] * x3 + noise * rng.standard_normal(n)
    adj = np.zeros((4, 4), dtype=int)
    adj[0, 1] = adj[1, 2] = adj[2, 3] = 1
    return Simulation(ColumnTable({"x1": x1, "x2": x2, "x3": x3, "y": y}),
                      {"adjacency": adj, "order": ["x1", "x2", "x3", "y"], "coefs": np.asarray(coefs)})


def simulate_spatial(grid_shape=(10, 10), n_per_cell: int = 3, sigma2: float = 1.0, lengthscale: float = 2.0,
                     sigma_e: float = 0.3, seed: int = 0) -> Simulation:
    """GP-RBF surface on grid points, observed with noise."""
    rng = np.random.default_rng(seed)
    coords = np.stack(np.unravel_index(np.arange(int(np.prod(grid_shape))), tuple(grid_shape)), axis=1)
    coords = coords.astype(np.float64)
    f = build_gp_rbf(coords, sigma2, lengthscale).chol_lower @ rng.standard_normal(coords.shape[0])
    cell = np.repeat(np.arange(coords.shape[0]), n_per_cell)
    z = rng.standard_normal(cell.size)
    y = f[cell] + 0.5 * z + sigma_e * rng.standard_normal(cell.size)
    cols = {"sx": coords[cell, 0], "sy": coords[cell, 1], "z": z,
            "cell": np.array([f"c{k}" for k in cell], dtype=object), "y": y}
    return Simulation(ColumnTable(cols), {"field": f, "coords": coords, "cell": cell})


def simulate(kind: str, params: Mapping[str, Any] | None = None, seed: int = 0) -> Simulation:
    params = dict(params or {})
    fns = {"lmm": simulate_lmm, "sleepstudy_like": simulate_sleepstudy_like,
           "sem_chain": simulate_sem_chain, "spatial": simulate_spatial}
    if kind not in fns:
        raise ValueError(f"unknown simulation kind {kind!r}; expected one of {KINDS}")
    return fns[kind](seed=seed, **params)
