"""Grid backbone: SPDE Matern precision, sparse-factor sampling, spatial SEM.

Grid cells are numbered in raster (C) order. The SPDE precision is

    Q = (kappa^2 I - Laplacian)^alpha

on a Neumann-boundary grid, factorised after a reverse Cuthill-McKee
reordering as a banded Cholesky factor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import sparse
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import autodiff as ad

MAX_CELLS = 4096
AGGREGATIONS = ("concat", "sum", "attention")


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass
class ManifoldBlockConfig:
    grid_shape: tuple[int, ...] = (8, 8)
    use_spde: bool = True
    spde_alpha: int = 2
    spde_kappa_init: float = 0.3
    use_sem: bool = False
    sem_lengthscale: float = 1.0
    activation: str = "tanh"

    def __post_init__(self):
        self.grid_shape = tuple(int(s) for s in self.grid_shape)
        if len(self.grid_shape) not in (1, 2) or min(self.grid_shape) < 1:
            raise ValueError(f"grid_shape must be 1-D or 2-D with positive sizes, got {self.grid_shape}")
        if self.cells > MAX_CELLS:
            raise ValueError(f"grid has {self.cells} cells; at most {MAX_CELLS} supported")
        if self.spde_alpha not in (1, 2, 3):
            raise ValueError("spde_alpha must be 1, 2 or 3")
        if self.spde_kappa_init <= 0 or self.sem_lengthscale <= 0:
            raise ValueError("kappa and lengthscale must be positive")

    @property
    def cells(self) -> int:
        return int(np.prod(self.grid_shape))


# ---------------------------------------------------------------- sparse precision

def discrete_laplacian(grid_shape: Sequence[int]) -> sparse.csr_matrix:
    """Second-difference stencil with reflecting boundaries (rows sum to zero)."""
    grid_shape = tuple(int(s) for s in grid_shape)
    n = int(np.prod(grid_shape))
    idx = np.arange(n).reshape(grid_shape)
    rows, cols = [], []
    for axis in range(len(grid_shape)):
        a = np.take(idx, np.arange(grid_shape[axis] - 1), axis=axis).ravel()
        b = np.take(idx, np.arange(1, grid_shape[axis]), axis=axis).ravel()
        rows += [a, b]
        cols += [b, a]
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
    adj = sparse.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    degree = np.asarray(adj.sum(axis=1)).ravel()
    return (adj - sparse.diags(degree)).tocsr()


@dataclass
class SparsePrecision:
    """Sparse SPD matrix with a cached banded Cholesky factor."""

    matrix: sparse.csr_matrix
    _perm: np.ndarray | None = field(default=None, repr=False)
    _band: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coo = self.matrix.tocoo()
        return coo.row, coo.col, coo.data

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def factor(self) -> tuple[np.ndarray, np.ndarray]:
        """Permutation and lower band of the Cholesky factor of ``P Q P^T``."""
        if self._band is None:
            perm = np.asarray(reverse_cuthill_mckee(self.matrix, symmetric_mode=True))
            qp = self.matrix[perm][:, perm].tocoo()
            k = int(np.max(np.abs(qp.row - qp.col))) if qp.nnz else 0
            ab = np.zeros((k + 1, self.dim))
            low = qp.row >= qp.col
            ab[qp.row[low] - qp.col[low], qp.col[low]] = qp.data[low]
            try:
                self._band = sla.cholesky_banded(ab, lower=True)
            except np.linalg.LinAlgError as e:
                raise FactorizationError(f"precision is not positive definite: {e}") from None
            self._perm = perm
        return self._perm, self._band

    def _upper_band(self) -> np.ndarray:
        _, ab = self.factor()
        k = ab.shape[0] - 1
        n = self.dim
        ub = np.zeros_like(ab)
        for m in range(k + 1):
            ub[k - m, m:] = ab[m, :n - m]
        return ub

    def solve_lt(self, eps: np.ndarray) -> np.ndarray:
        """``u = P^T L^{-T} P eps``; ``cov(u) = Q^{-1}`` for white ``eps``.

        Permuting ``eps`` as well keeps the draw independent of the ordering,
        so ``Q = I`` returns ``eps`` itself.
        """
        perm, ab = self.factor()
        k = ab.shape[0] - 1
        z = sla.solve_banded((0, k), self._upper_band(), np.asarray(eps)[perm])
        u = np.empty_like(z)
        u[perm] = z
        return u

    def solve(self, b: np.ndarray) -> np.ndarray:
        """``Q^{-1} b`` using the cached factor."""
        perm, ab = self.factor()
        x = sla.cho_solve_banded((ab, True), np.asarray(b)[perm])
        out = np.empty_like(x)
        out[perm] = x
        return out


def spde_precision(kappa: float, alpha: int, lap) -> SparsePrecision:
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if int(alpha) != alpha or alpha < 1:
        raise ValueError(f"alpha must be a positive integer, got {alpha}")
    lap = sparse.csr_matrix(lap)
    a = (kappa ** 2 * sparse.identity(lap.shape[0], format="csr") - lap).tocsr()
    q = a
    for _ in range(int(alpha) - 1):
        q = (q @ a).tocsr()
    q.sum_duplicates()
    return SparsePrecision(q)


def spde_sample(q: SparsePrecision, eps) -> np.ndarray:
    """Field draw ``L^{-T} eps``; ``eps`` may carry extra columns for several draws."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[0] != q.dim:
        raise ad.ShapeError(f"eps has {eps.shape[0]} rows, precision is {q.dim} x {q.dim}")
    try:
        return q.solve_lt(eps)
    except FactorizationError as e:
        raise FactorizationError(f"{e}") from None


# ---------------------------------------------------------------- differentiable pieces

def grid_map(h, w_grid) -> ad.Node:
    """Linear projection of each row onto the grid cells (raster order)."""
    return ad.matmul(h, w_grid)


class SpdeSmoother:
    """Normalised Matern smoothing ``S = kappa^{2 alpha} Q^{-1}`` with a cached factor per kappa.

    Constant fields pass through unchanged because ``Q 1 = kappa^{2 alpha} 1``
    under reflecting boundaries.
    """

    def __init__(self, grid_shape, alpha: int):
        self.lap = discrete_laplacian(grid_shape)
        self.alpha = int(alpha)
        self._cache: dict[float, tuple[SparsePrecision, SparsePrecision]] = {}

    def precisions(self, kappa: float):
        key = float(kappa)
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = (spde_precision(key, self.alpha, self.lap), spde_precision(key, 1, self.lap))
        return self._cache[key]

    def apply(self, g, log_kappa) -> ad.Node:
        g, log_kappa = ad.as_node(g), ad.as_node(log_kappa)
        kappa = math.exp(float(log_kappa.value))
        q, a = self.precisions(kappa)
        scale = kappa ** (2 * self.alpha)
        out = scale * q.solve(g.value.T).T
        alpha = self.alpha

        def bw(gr):
            sg = scale * q.solve(gr.T).T
            # dS/dlog(kappa) = 2 alpha S (I - kappa^2 A^{-1})
            ainv = a.solve(g.value.T).T
            dk = 2.0 * alpha * np.sum(sg * (g.value - kappa ** 2 * ainv))
            return sg, np.array(dk).reshape(log_kappa.shape)
        return ad._make(out, (g, log_kappa), "spde_smooth", bw)


def grid_distances(grid_shape) -> np.ndarray:
    coords = np.stack(np.unravel_index(np.arange(int(np.prod(grid_shape))), tuple(grid_shape)), axis=1)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.sum(diff.astype(np.float64) ** 2, axis=-1))


def spatial_mask(grid_shape, lengthscale: float) -> np.ndarray:
    """RBF proximity weights restricted to raster-order strictly-lower positions."""
    d = grid_distances(grid_shape)
    rbf = np.exp(-d ** 2 / (2.0 * lengthscale ** 2))
    return rbf * np.tril(np.ones_like(rbf), -1)


def sem_layer_spatial(xi, b_free, mask: np.ndarray) -> ad.Node:
    """eta = (I - B(s))^{-1} xi with ``B(s) = b_free * mask`` strictly lower."""
    xi = ad.as_node(xi)
    b = ad.mul(b_free, mask)
    cells = mask.shape[0]
    a = ad.sub(np.eye(cells), b)
    sol = ad.triangular_solve(a, ad.transpose(xi), lower=True, unit_diagonal=True)
    return ad.transpose(sol)


def aggregate(block_outputs: Sequence, mode: str = "concat", logits=None) -> ad.Node:
    outs = [ad.as_node(o) for o in block_outputs]
    if not outs:
        raise ValueError("no block outputs to aggregate")
    if mode == "concat":
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
    widths = {o.shape[1] for o in outs}
    if len(widths) != 1:
        raise ad.ShapeError(f"{mode} aggregation needs equal widths, got {sorted(widths)}")
    if mode == "sum":
        total = outs[0]
        for o in outs[1:]:
            total = ad.add(total, o)
        return total
    if mode == "attention":
        if logits is None:
            logits = np.zeros(len(outs))
        w = ad.softmax(ad.as_node(logits), axis=-1)
        total = None
        for l, o in enumerate(outs):
            term = ad.mul(w[l], o)
            total = term if total is None else ad.add(total, term)
        return total
    raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


# ---------------------------------------------------------------- backbone

_ACTS = {"relu": ad.relu, "tanh": ad.tanh, "gelu": ad.gelu}


class ManifoldBackbone:
    """Sequential grid blocks whose outputs are aggregated.

    Block ``l`` maps its input to the grid, optionally smooths it with the
    SPDE operator (adding a sampled Matern field in train mode), optionally
    applies the spatial SEM, then the activation.
    """

    def __init__(self, configs: Sequence[ManifoldBlockConfig], input_dim: int, aggregation: str = "concat"):
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        self.configs = list(configs)
        if not self.configs:
            raise ValueError("manifold backbone needs at least one block")
        self.input_dim = input_dim
        self.aggregation = aggregation
        self.smoothers = [SpdeSmoother(c.grid_shape, c.spde_alpha) if c.use_spde else None for c in self.configs]
        self.masks = [spatial_mask(c.grid_shape, c.sem_lengthscale) if c.use_sem else None for c in self.configs]
        self.last_info: list = []

    @property
    def output_dim(self) -> int:
        widths = [c.cells for c in self.configs]
        return sum(widths) if self.aggregation == "concat" else widths[-1]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        din = self.input_dim
        for l, c in enumerate(self.configs):
            p = f"mf{l}"
            params[f"{p}.W_grid"] = rng.normal(0.0, math.sqrt(2.0 / (din + c.cells)), size=(din, c.cells))
            params[f"{p}.b"] = np.zeros(c.cells)
            if c.use_spde:
                params[f"{p}.log_kappa"] = np.array(math.log(c.spde_kappa_init))
                params[f"{p}.log_amp"] = np.array(math.log(0.1))
            if c.use_sem:
                params[f"{p}.B"] = np.zeros((c.cells, c.cells))
            din = c.cells
        if self.aggregation == "attention":
            params["mf.agg_logits"] = np.zeros(len(self.configs))
        return params

    def block_forward(self, h, nodes: Mapping, l: int, mode: str, rng) -> ad.Node:
        c = self.configs[l]
        p = f"mf{l}"
        g = ad.add(grid_map(h, nodes[f"{p}.W_grid"]), nodes[f"{p}.b"])
        if c.use_spde:
            g = self.smoothers[l].apply(g, nodes[f"{p}.log_kappa"])
            if mode == "train":
                kappa = math.exp(float(nodes[f"{p}.log_kappa"].value))
                q, _ = self.smoothers[l].precisions(kappa)
                field_ = spde_sample(q, rng.standard_normal((c.cells, g.shape[0]))).T
                # unit variance along the constant mode, whose precision is kappa^(2 alpha)
                field_ = field_ * kappa ** c.spde_alpha
                g = ad.add(g, ad.mul(ad.exp(nodes[f"{p}.log_amp"]), field_))
        if c.use_sem:
            g = sem_layer_spatial(g, nodes[f"{p}.B"], self.masks[l])
        return _ACTS[c.activation](g)

    def forward(self, h, nodes: Mapping, mode: str = "eval", rng=None) -> ad.Node:
        outs = []
        for l in range(len(self.configs)):
            h = self.block_forward(h, nodes, l, mode, rng)
            outs.append(h)
        if len(outs) == 1:
            return outs[0]
        return aggregate(outs, self.aggregation, nodes.get("mf.agg_logits"))

    def penalties(self, nodes: Mapping) -> dict[str, ad.Node]:
        return {}


def export_field_csv(values, grid_shape, path) -> None:
    """Write a field as a CSV grid (1-D grids become a single row)."""
    arr = np.asarray(values, dtype=np.float64).reshape(tuple(grid_shape))
    if arr.ndim == 1:
        arr = arr[None, :]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in arr:
            w.writerow([repr(float(v)) for v in row])
