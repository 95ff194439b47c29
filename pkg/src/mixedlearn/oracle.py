"""Closed-form linear mixed model reference: Henderson's equations and REML profiling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

GRID_POINTS = 61
RATIO_RANGE = (1e-3, 1e3)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class MmeResult:
    beta: np.ndarray
    u: np.ndarray
    sigma_u2: float
    sigma_e2: float
    loglik: float


def solve_mme(x, z, y, sigma_u2: float, sigma_e2: float) -> tuple[np.ndarray, np.ndarray]:
    """Solve [[X'X, X'Z], [Z'X, Z'Z + (se2/su2) I]] [b; u] = [X'y; Z'y]."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    z = np.zeros((x.shape[0], 0)) if z is None else np.asarray(z, dtype=np.float64)
    p, q = x.shape[1], z.shape[1]
    lhs = np.zeros((p + q, p + q))
    lhs[:p, :p] = x.T @ x
    lhs[:p, p:] = x.T @ z
    lhs[p:, :p] = z.T @ x
    lhs[p:, p:] = z.T @ z + (sigma_e2 / sigma_u2) * np.eye(q) if q else z.T @ z
    rhs = np.concatenate([x.T @ y, z.T @ y])
    sol = sla.solve(lhs, rhs, assume_a="sym")
    return sol[:p], sol[p:]


class _Profile:
    """Profiled (RE)ML log-likelihood in the ratio gamma = su2 / se2.

    With ``Z Z' = Q diag(lam) Q'``, ``V = I + gamma Z Z'`` is diagonal in the
    rotated basis, so each evaluation costs O(n p^2).
    """

    def __init__(self, x, z, y, reml: bool):
        lam, q = np.linalg.eigh(z @ z.T)
        self.lam = np.clip(lam, 0.0, None)
        self.xr = q.T @ x
        self.yr = q.T @ y
        self.n, self.p = x.shape
        self.reml = reml

    def __call__(self, log_gamma: float) -> tuple[float, float]:
        d = 1.0 + math.exp(log_gamma) * self.lam
        w = 1.0 / d
        xtvx = self.xr.T @ (self.xr * w[:, None])
        xtvy = self.xr.T @ (self.yr * w)
        beta = np.linalg.solve(xtvx, xtvy)
        r = self.yr - self.xr @ beta
        quad = float(np.sum(r * r * w))
        logdet_v = float(np.sum(np.log(d)))
        if self.reml:
            dof = self.n - self.p
            se2 = quad / dof
            ll = -0.5 * (dof * math.log(2 * math.pi * se2) + logdet_v + np.linalg.slogdet(xtvx)[1] + dof)
        else:
            se2 = quad / self.n
            ll = -0.5 * (self.n * math.log(2 * math.pi * se2) + logdet_v + self.n)
        return ll, se2


def profile_variance(x, z, y, reml: bool = True, grid_points: int = GRID_POINTS,
                     ratio_range=RATIO_RANGE, tol: float = 1e-8) -> tuple[float, float, float]:
    """Maximise the profiled likelihood over su2/se2: log grid, then golden-section.

    Returns ``(sigma_u2, sigma_e2, loglik)``.
    """
    prof = _Profile(np.asarray(x, dtype=np.float64), np.asarray(z, dtype=np.float64),
                    np.asarray(y, dtype=np.float64), reml)
    grid = np.linspace(math.log(ratio_range[0]), math.log(ratio_range[1]), grid_points)
    vals = [prof(g)[0] for g in grid]
    k = int(np.argmax(vals))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, grid_points - 1)]
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = prof(c)[0], prof(d)[0]
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = prof(c)[0]
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = prof(d)[0]
    best = 0.5 * (a + b)
    ll, se2 = prof(best)
    if vals[k] > ll:
        best = grid[k]
        ll, se2 = prof(best)
    return math.exp(best) * se2, se2, ll


def mme_oracle(x, z, y, sigma_u2: float | None = None, sigma_e2: float | None = None,
               reml: bool = True) -> MmeResult:
    """BLUE/BLUP from Henderson's equations.

    Variance components default to the profiled REML estimates. With an
    empty ``z`` the result is ordinary least squares.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if z is None or np.asarray(z).size == 0:
        beta, *_ = np.linalg.lstsq(x, y, rcond=None)
        resid = y - x @ beta
        se2 = float(resid @ resid) / max(x.shape[0] - x.shape[1], 1)
        return MmeResult(beta, np.zeros(0), 0.0, se2, float("nan"))
    z = np.asarray(z, dtype=np.float64)
    ll = float("nan")
    if sigma_u2 is None or sigma_e2 is None:
        sigma_u2, sigma_e2, ll = profile_variance(x, z, y, reml=reml)
    beta, u = solve_mme(x, z, y, sigma_u2, sigma_e2)
    return MmeResult(beta, u, float(sigma_u2), float(sigma_e2), ll)


def indicator_matrix(index, n_levels: int | None = None) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    n_levels = int(index.max()) + 1 if n_levels is None else n_levels
    z = np.zeros((index.size, n_levels))
    z[np.arange(index.size), index] = 1.0
    return z
