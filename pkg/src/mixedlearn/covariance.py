"""Structured covariance matrices for random effects.

Builders return a :class:`CovFactor` (covariance plus lower Cholesky factor).
``structure_factor`` builds the same lower factors as autodiff nodes so that
AR1/CS/GP structure parameters can be trained through the encoder.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy import linalg as sla

from . import autodiff as ad

log = logging.getLogger(__name__)

KINDS = ("IID", "AR1", "ARMA", "CS", "KRON", "KIN", "GP")
_ALIASES = {"K": "KIN", "KINSHIP": "KIN", "KRONECKER": "KRON", "EXCHANGEABLE": "CS"}
MAX_KRON_ROWS = 10_000
JITTER = 1e-8


class CovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class CovFactor:
    sigma: np.ndarray
    chol_lower: np.ndarray

    @property
    def n(self) -> int:
        return self.sigma.shape[0]


@dataclass
class CovarianceSpec:
    """Tagged covariance description, as found in a ``cov_struct_map``.

    ``params`` keeps the user-facing keys: ``rho``; ``phi``/``theta``/``sigma``
    for ARMA; ``group``/``slope`` component specs (or ``slope_matrix``) for
    KRON; ``K_group`` with ``train_levels`` for KIN; ``coordinates_col`` or
    ``coordinates`` with ``lengthscale`` for GP.
    """

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        kind = self.kind.upper()
        kind = _ALIASES.get(kind, kind)
        if kind not in KINDS:
            raise CovarianceError(f"unknown covariance kind {self.kind!r}; expected one of {KINDS}")
        self.kind = kind
        rho = self.params.get("rho")
        if kind == "AR1" and rho is not None and not -1 < rho < 1:
            raise CovarianceError(f"AR1 requires rho in (-1, 1), got {rho}")
        if kind == "GP" and self.params.get("lengthscale", 1.0) <= 0:
            raise CovarianceError("GP lengthscale must be positive")
        if kind == "ARMA" and (len(self.params.get("phi", [])) > 2 or len(self.params.get("theta", [])) > 2):
            raise CovarianceError("ARMA orders above 2 are not supported")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CovarianceSpec":
        d = dict(d)
        kind = d.pop("type", None) or d.pop("kind")
        return cls(kind, d)

    @property
    def exchangeable(self) -> bool:
        return self.kind in ("IID", "CS")


def _check_positive(name: str, value: float) -> None:
    if not value > 0:
        raise CovarianceError(f"{name} must be positive, got {value}")


def _check_n(n: int) -> None:
    if n < 1:
        raise CovarianceError("covariance dimension must be at least 1")


def _factor(sigma: np.ndarray, jitter: float = 0.0) -> CovFactor:
    sigma = 0.5 * (sigma + sigma.T)
    work = sigma
    if jitter:
        work = sigma + jitter * np.mean(np.diag(sigma)) * np.eye(sigma.shape[0])
    try:
        chol = np.linalg.cholesky(work)
    except np.linalg.LinAlgError:
        raise CovarianceError("covariance matrix is not positive definite") from None
    return CovFactor(work, chol)


def build_iid(sigma2: float, n: int) -> CovFactor:
    _check_positive("sigma2", sigma2)
    _check_n(n)
    return CovFactor(sigma2 * np.eye(n), np.sqrt(sigma2) * np.eye(n))


def build_ar1(sigma2: float, rho: float, n: int) -> CovFactor:
    _check_positive("sigma2", sigma2)
    _check_n(n)
    if not -1 < rho < 1:
        raise CovarianceError(f"AR1 requires |rho| < 1, got {rho}")
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return _factor(sigma2 * rho ** lag)


def _check_stationary(phi: list[float]) -> None:
    if len(phi) == 1 and not abs(phi[0]) < 1:
        raise CovarianceError(f"AR(1) part is not stationary: phi={phi}")
    if len(phi) == 2:
        p1, p2 = phi
        if not (p2 < 1 and p1 + p2 < 1 and p2 - p1 < 1):
            raise CovarianceError(f"AR(2) part is not stationary: phi={phi}")


def arma_autocovariance(phi, theta, sigma: float, nlags: int) -> np.ndarray:
    """Theoretical autocovariances gamma_0..gamma_{nlags-1} of an ARMA(p, q) process."""
    phi, theta = [float(v) for v in phi], [float(v) for v in theta]
    if len(phi) > 2 or len(theta) > 2:
        raise CovarianceError("ARMA orders above 2 are not supported")
    _check_stationary(phi)
    p, q = len(phi), len(theta)
    th = [1.0] + theta
    # MA(infinity) weights up to lag q
    psi = [1.0]
    for j in range(1, q + 1):
        psi.append(th[j] + sum(phi[i - 1] * psi[j - i] for i in range(1, min(j, p) + 1)))
    m = max(p, q)
    A = np.zeros((m + 1, m + 1))
    rhs = np.zeros(m + 1)
    for k in range(m + 1):
        A[k, k] += 1.0
        for i in range(1, p + 1):
            A[k, abs(k - i)] -= phi[i - 1]
        rhs[k] = sigma ** 2 * sum(th[j] * psi[j - k] for j in range(k, q + 1))
    gamma = list(np.linalg.solve(A, rhs))
    for k in range(m + 1, nlags):
        gamma.append(sum(phi[i - 1] * gamma[k - i] for i in range(1, p + 1)))
    return np.asarray(gamma[:nlags])


def build_arma(phi, theta, sigma: float, n: int) -> CovFactor:
    _check_positive("sigma", sigma)
    _check_n(n)
    gamma = arma_autocovariance(phi, theta, sigma, n)
    return _factor(sla.toeplitz(gamma[:n]))


def build_cs(sigma2: float, rho: float, n: int) -> CovFactor:
    _check_positive("sigma2", sigma2)
    _check_n(n)
    bound = -1.0 / (n - 1) if n > 1 else -np.inf
    if not (rho >= bound + 1e-9 and rho < 1):
        raise CovarianceError(f"compound symmetry needs rho in [{bound:.6g}, 1) for n={n}, got {rho}")
    return _factor(sigma2 * ((1 - rho) * np.eye(n) + rho * np.ones((n, n))))


def build_kron(a: CovFactor, b: CovFactor) -> CovFactor:
    if a.n * b.n > MAX_KRON_ROWS:
        raise CovarianceError(f"Kronecker product would have {a.n * b.n} rows (limit {MAX_KRON_ROWS})")
    return CovFactor(np.kron(a.sigma, b.sigma), np.kron(a.chol_lower, b.chol_lower))


def build_kinship(genotypes) -> np.ndarray:
    """Genomic relationship matrix from 0/1/2 allele counts (rows = individuals)."""
    g = np.asarray(genotypes, dtype=np.float64)
    if g.ndim != 2:
        raise CovarianceError("genotypes must be a 2-D matrix")
    p = g.mean(axis=0) / 2.0
    keep = (p > 0) & (p < 1)
    if not keep.any():
        raise CovarianceError("all genotype columns are monomorphic")
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} monomorphic genotype column(s)", stacklevel=2)
    g, p = g[:, keep], p[keep]
    z = g - 2.0 * p
    return z @ z.T / (2.0 * np.sum(p * (1 - p)))


def load_kinship(path) -> np.ndarray:
    """Square kinship matrix from whitespace-delimited text."""
    k = np.loadtxt(path, ndmin=2)
    if k.shape[0] != k.shape[1]:
        raise CovarianceError(f"kinship file {path} is not square: {k.shape}")
    return k


def henderson_predict(k_new_train, k_train_train, u_train) -> np.ndarray:
    """Predict effects for new individuals: K_nt K_tt^{-1} u_train.

    A ridge of 1e-8 times the mean diagonal is added only when ``K_tt`` is
    not numerically positive definite.
    """
    k_nt = np.atleast_2d(np.asarray(k_new_train, dtype=np.float64))
    k_tt = np.atleast_2d(np.asarray(k_train_train, dtype=np.float64))
    u = np.asarray(u_train, dtype=np.float64)
    if k_tt.shape[0] != k_tt.shape[1] or k_nt.shape[1] != k_tt.shape[0] or u.shape[0] != k_tt.shape[0]:
        raise CovarianceError(
            f"dimension mismatch: K_new,train {k_nt.shape}, K_train,train {k_tt.shape}, u {u.shape}")
    try:
        cf = sla.cho_factor(k_tt, lower=True)
    except np.linalg.LinAlgError:
        ridge = JITTER * np.mean(np.diag(k_tt))
        cf = sla.cho_factor(k_tt + ridge * np.eye(k_tt.shape[0]), lower=True)
    return k_nt @ sla.cho_solve(cf, u)


def rbf_kernel(xa, xb, sigma2: float, lengthscale: float) -> np.ndarray:
    xa, xb = np.atleast_2d(xa), np.atleast_2d(xb)
    d2 = np.sum((xa[:, None, :] - xb[None, :, :]) ** 2, axis=-1)
    return sigma2 * np.exp(-d2 / (2.0 * lengthscale ** 2))


def build_gp_rbf(coords, sigma2: float, lengthscale: float, jitter: bool = True) -> CovFactor:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    _check_positive("sigma2", sigma2)
    _check_positive("lengthscale", lengthscale)
    _check_n(coords.shape[0])
    if not jitter and len(np.unique(coords, axis=0)) < coords.shape[0]:
        raise CovarianceError("duplicate coordinates give a singular GP covariance; enable jitter")
    k = rbf_kernel(coords, coords, sigma2, lengthscale)
    if jitter:
        k = k + 1e-6 * sigma2 * np.eye(k.shape[0])
    return _factor(k)


def correlated_sample(factor: CovFactor, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[0] != factor.n:
        raise CovarianceError(f"eps has {eps.shape[0]} rows, factor is {factor.n} x {factor.n}")
    return factor.chol_lower @ eps


# ---------------------------------------------------------------- trainable factors

def rho_from_raw(kind: str, raw: float, n: int) -> float:
    if kind == "CS":
        lo = -1.0 / (n - 1) if n > 1 else -0.999
        return lo + (1.0 - lo) / (1.0 + np.exp(-raw))
    return float(np.tanh(raw))


def rho_to_raw(kind: str, rho: float, n: int) -> float:
    if kind == "CS":
        lo = -1.0 / (n - 1) if n > 1 else -0.999
        t = (rho - lo) / (1.0 - lo)
        return float(np.log(t / (1 - t)))
    return float(np.arctanh(rho))


def trainable_structure_params(spec: CovarianceSpec, n_levels: int) -> dict[str, np.ndarray]:
    """Unconstrained initial values for the trainable parts of ``spec``."""
    if spec.kind in ("AR1", "CS"):
        rho = spec.params.get("rho", 0.7 if spec.kind == "AR1" else 0.1)
        return {"rho_raw": np.array(rho_to_raw(spec.kind, rho, n_levels))}
    if spec.kind == "GP":
        return {"log_lengthscale": np.array(np.log(spec.params.get("lengthscale", 1.0)))}
    return {}


def fixed_factor(spec: CovarianceSpec, n_levels: int, n_slopes: int = 1,
                 level_coords: np.ndarray | None = None, kinship: np.ndarray | None = None) -> np.ndarray:
    """Constant lower factor for structures with no trainable parameter."""
    if spec.kind == "IID":
        return np.eye(n_levels)
    if spec.kind == "ARMA":
        f = build_arma(spec.params.get("phi", []), spec.params.get("theta", []), 1.0, n_levels)
        scale = np.sqrt(f.sigma[0, 0])
        return f.chol_lower / scale
    if spec.kind == "KIN":
        if kinship is None:
            raise CovarianceError("kinship structure needs a kinship matrix aligned to the levels")
        return _factor(kinship, jitter=JITTER).chol_lower
    if spec.kind == "KRON":
        group_spec = spec.params.get("group", {"type": "IID"})
        group_spec = group_spec if isinstance(group_spec, CovarianceSpec) else CovarianceSpec.from_dict(group_spec)
        a = _constant_component(group_spec, n_levels, level_coords, kinship)
        if "slope_matrix" in spec.params:
            b = _factor(np.asarray(spec.params["slope_matrix"], dtype=np.float64)).chol_lower
        else:
            slope_spec = spec.params.get("slope", {"type": "IID"})
            slope_spec = slope_spec if isinstance(slope_spec, CovarianceSpec) else CovarianceSpec.from_dict(slope_spec)
            b = _constant_component(slope_spec, n_slopes, None, None)
        if b.shape[0] != n_slopes:
            raise CovarianceError(f"KRON slope component is {b.shape[0]} x {b.shape[0]}, term has {n_slopes} slopes")
        return build_kron(CovFactor(a @ a.T, a), CovFactor(b @ b.T, b)).chol_lower
    raise CovarianceError(f"{spec.kind} structure is trainable, not fixed")


def _constant_component(spec, n, coords, kinship) -> np.ndarray:
    if spec.kind == "AR1":
        return build_ar1(1.0, spec.params.get("rho", 0.7), n).chol_lower
    if spec.kind == "CS":
        return build_cs(1.0, spec.params.get("rho", 0.1), n).chol_lower
    if spec.kind == "GP":
        return build_gp_rbf(coords, 1.0, spec.params.get("lengthscale", 1.0)).chol_lower
    return fixed_factor(spec, n, kinship=kinship)


def structure_factor(spec: CovarianceSpec, n_levels: int, raw: Mapping[str, ad.Node],
                     level_coords: np.ndarray | None = None) -> ad.Node:
    """Lower factor of the unit-scale correlation matrix as an autodiff node."""
    if spec.kind == "AR1":
        rho = ad.tanh(raw["rho_raw"])
        i, j = np.indices((n_levels, n_levels))
        lower = i >= j
        lag = np.where(lower, i - j, 0)
        powers = ad.pow(ad.reshape(rho, (1, 1)), lag)
        # column 0 has scale 1, later columns sqrt(1 - rho^2)
        colscale = ad.sqrt(ad.sub(1.0, ad.square(rho)))
        first = np.zeros((1, n_levels))
        first[0, 0] = 1.0
        scale = ad.add(first, ad.mul(1.0 - first, colscale))
        return ad.mul(ad.mul(powers, scale), lower.astype(np.float64))
    if spec.kind == "CS":
        lo = -1.0 / (n_levels - 1) if n_levels > 1 else -0.999
        rho = ad.add(lo, ad.mul(1.0 - lo, ad.sigmoid(raw["rho_raw"])))
        eye = np.eye(n_levels)
        sigma = ad.add(ad.mul(ad.sub(1.0, rho), eye), ad.mul(rho, np.ones((n_levels, n_levels))))
        sigma = ad.add(sigma, JITTER * eye)
        return ad.cholesky(sigma)
    if spec.kind == "GP":
        if level_coords is None:
            raise CovarianceError("GP structure needs per-level coordinates")
        coords = np.asarray(level_coords, dtype=np.float64).reshape(n_levels, -1)
        d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
        ell2 = ad.exp(ad.mul(2.0, raw["log_lengthscale"]))
        k = ad.exp(ad.neg(ad.div(d2 / 2.0, ad.reshape(ell2, (1, 1)))))
        k = ad.add(k, (1e-6 + JITTER) * np.eye(n_levels))
        return ad.cholesky(k)
    raise CovarianceError(f"{spec.kind} has no trainable factor")
