"""Structural-equation backbone layers.

Within a layer, latent coordinate ``i`` receives ``sum_j B[i, j] * eta[j]``,
so ``B[i, j]`` is the edge ``j -> i``. Exported adjacency matrices are
transposed to the row = source, column = target convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "gelu": ad.gelu}
STRUCTURES = ("none", "static", "dynamic", "hybrid")
EDGE_THRESHOLD = 0.3


class StructureError(ValueError):
    pass


@dataclass
class GsemConfig:
    hidden_dims: list[int] = field(default_factory=lambda: [64, 32])
    activation: str = "relu"
    dropout: float = 0.1
    layer_norm: bool = False
    residual: bool = False
    structure: str = "none"
    static_variant: str = "masked"  # masked (strictly lower) | free (penalty-trained)
    n_heads: int = 2
    attn_dim: int = 8
    damping: float = 0.5
    max_iter: int = 50
    tol: float = 1e-8

    def __post_init__(self):
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        if self.static_variant not in ("masked", "free"):
            raise ValueError("static_variant must be 'masked' or 'free'")
        if self.attn_dim % self.n_heads:
            raise ValueError(f"attn_dim {self.attn_dim} is not divisible by n_heads {self.n_heads}")


def structure_mask(d: int, variant: str = "masked") -> np.ndarray:
    """Free positions of the adjacency: strictly lower, or all off-diagonal."""
    if variant == "masked":
        return np.tril(np.ones((d, d)), -1)
    return 1.0 - np.eye(d)


# ---------------------------------------------------------------- transforms

def static_transform(xi, b) -> ad.Node:
    """eta = (I - B)^{-1} xi for each row of ``xi`` (n x d).

    Strictly lower-triangular ``B`` is solved by forward substitution; any
    other ``B`` falls back to a dense solve.
    """
    xi, b = ad.as_node(xi), ad.as_node(b)
    d = b.shape[0]
    a = ad.sub(np.eye(d), b)
    if np.allclose(np.triu(b.value), 0.0):
        sol = ad.triangular_solve(a, ad.transpose(xi), lower=True, unit_diagonal=True)
    else:
        sol = ad.solve(a, ad.transpose(xi))
    return ad.transpose(sol)


def expm(a: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a truncated Taylor series."""
    a = np.asarray(a, dtype=np.float64)
    norm = np.abs(a).sum(axis=0).max() if a.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    x = a / (2.0 ** s)
    result = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, 40):
        term = term @ x / k
        result = result + term
        if np.abs(term).max() <= tol * np.abs(result).max():
            break
    for _ in range(s):
        result = result @ result
    return result


def dag_penalty(b) -> ad.Node:
    """trace(exp(B * B)) - d; zero exactly when the weighted graph is acyclic."""
    b = ad.as_node(b)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ad.ShapeError(f"dag_penalty needs a square matrix, got {b.shape}")
    e = expm(b.value * b.value)
    value = np.trace(e) - b.shape[0]
    return ad._make(np.array(value), (b,), "dag_penalty", lambda g: (g * e.T * 2.0 * b.value,))


def sparse_penalty(b) -> ad.Node:
    return ad.l1_norm(b)


def spectral_norm_sq(m, steps: int = 20, seed: int = 0) -> ad.Node:
    """Squared largest singular value by power iteration on M^T M."""
    m = ad.as_node(m)
    mv = m.value
    v = np.random.default_rng(seed).standard_normal(mv.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(steps):
        w = mv.T @ (mv @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return ad._make(np.array(0.0), (m,), "spectral_norm_sq", lambda g: (np.zeros_like(mv),))
        v = w / nw
    mvv = mv @ v
    value = float(mvv @ mvv)
    return ad._make(np.array(value), (m,), "spectral_norm_sq",
                    lambda g: (g * 2.0 * np.outer(mvv, v),))


def contraction_penalty(b_s, b_d=None) -> ad.Node:
    """||B_s + B_d||_2^2; a per-sample ``b_d`` (n x d x d) is averaged over samples."""
    m = ad.as_node(b_s)
    if b_d is not None:
        b_d = ad.as_node(b_d)
        if b_d.ndim == 3:
            b_d = ad.mean(b_d, axis=0)
        m = ad.add(m, b_d)
    return spectral_norm_sq(m)


def dynamic_attention(eta, nodes: Mapping[str, ad.Node], prefix: str, n_heads: int):
    """Self-attention over the feature axis, one token per latent coordinate.

    Token ``j`` of sample ``i`` is embedded as ``eta[i, j] * a + p_j``. Returns
    the attended output ``B_d(eta) @ eta`` and the head-averaged weights
    ``B_d`` (n x d x d).
    """
    eta = ad.as_node(eta)
    n, d = eta.shape
    a, pos = nodes[f"{prefix}.att.a"], nodes[f"{prefix}.att.pos"]
    wq, wk = nodes[f"{prefix}.att.Wq"], nodes[f"{prefix}.att.Wk"]
    d_attn = a.shape[0]
    if d_attn % n_heads:
        raise ad.ShapeError(f"attention width {d_attn} not divisible by {n_heads} heads")
    dk = d_attn // n_heads
    tokens = ad.add(ad.mul(ad.reshape(eta, (n, d, 1)), ad.reshape(a, (1, 1, d_attn))),
                    ad.reshape(pos, (1, d, d_attn)))
    q = ad.matmul(tokens, wq)
    k = ad.matmul(tokens, wk)
    weights = None
    for h in range(n_heads):
        qh = q[:, :, h * dk:(h + 1) * dk]
        kh = k[:, :, h * dk:(h + 1) * dk]
        scores = ad.div(ad.matmul(qh, ad.transpose(kh)), math.sqrt(dk))
        att = ad.softmax(scores, axis=-1)
        weights = att if weights is None else ad.add(weights, att)
    weights = ad.div(weights, float(n_heads))
    out = ad.reshape(ad.matmul(weights, ad.reshape(eta, (n, d, 1))), (n, d))
    return out, weights


@dataclass
class SolveInfo:
    iterations: int
    converged: bool
    residual: float


def hybrid_transform(xi, b_static, b_dynamic_fn: Callable[[ad.Node], ad.Node] | None,
                     damping: float = 0.5, max_iter: int = 50, tol: float = 1e-8):
    """Solve eta = xi + (B_s + B_d(eta)) eta by damped fixed-point iteration.

    Every iterate stays on the autodiff graph. Returns ``(eta, SolveInfo)``;
    non-convergence is reported in the info, not raised.
    """
    xi = ad.as_node(xi)
    b_static = ad.as_node(b_static)
    eta = xi
    n, d = xi.shape
    delta = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        mixed = ad.matmul(eta, ad.transpose(b_static))
        if b_dynamic_fn is not None:
            bd = ad.as_node(b_dynamic_fn(eta))
            if bd.ndim == 2:
                mixed = ad.add(mixed, ad.matmul(eta, ad.transpose(bd)))
            else:
                mixed = ad.add(mixed, ad.reshape(ad.matmul(bd, ad.reshape(eta, (n, d, 1))), (n, d)))
        target = ad.add(xi, mixed)
        new = ad.add(ad.mul(1.0 - damping, eta), ad.mul(damping, target))
        delta = float(np.max(np.abs(new.value - eta.value))) if new.value.size else 0.0
        eta = new
        if delta < tol:
            break
    return eta, SolveInfo(it, bool(delta < tol), delta)


# ---------------------------------------------------------------- layers

class GsemBackbone:
    """Stack of hidden layers with optional structure transforms."""

    def __init__(self, config: GsemConfig, input_dim: int):
        self.config = config
        self.input_dim = input_dim
        self.dims = [input_dim] + list(config.hidden_dims)
        self.last_info: list[SolveInfo] = []
        self.last_attention: list[ad.Node] = []

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def structured(self) -> bool:
        return self.config.structure in ("static", "hybrid") and len(self.dims) > 1

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        cfg = self.config
        params = {}
        for l, (din, dout) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            p = f"gsem{l}"
            params[f"{p}.W"] = rng.normal(0.0, math.sqrt(2.0 / (din + dout)), size=(din, dout))
            params[f"{p}.b"] = np.zeros(dout)
            if cfg.structure in ("static", "hybrid"):
                params[f"{p}.B"] = np.zeros((dout, dout))
            if cfg.structure in ("dynamic", "hybrid"):
                params[f"{p}.att.a"] = rng.normal(0.0, 1.0, size=cfg.attn_dim)
                params[f"{p}.att.pos"] = rng.normal(0.0, 0.1, size=(dout, cfg.attn_dim))
                params[f"{p}.att.Wq"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.attn_dim), size=(cfg.attn_dim, cfg.attn_dim))
                params[f"{p}.att.Wk"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.attn_dim), size=(cfg.attn_dim, cfg.attn_dim))
            if cfg.structure == "hybrid":
                # gate on B_d: softmax rows sum to one, so the raw weights are never contractive
                params[f"{p}.att.gate"] = np.array(math.log(0.25 / 0.75))
            if cfg.layer_norm:
                params[f"{p}.ln_gain"] = np.ones(dout)
                params[f"{p}.ln_bias"] = np.zeros(dout)
        return params

    def adjacency(self, nodes: Mapping, layer: int) -> ad.Node:
        b = nodes[f"gsem{layer}.B"]
        return ad.mul(b, structure_mask(b.shape[0], self.config.static_variant))

    def layer_forward(self, h_in, nodes: Mapping, layer: int, mode: str = "eval", rng=None):
        cfg = self.config
        p = f"gsem{layer}"
        xi = ad.add(ad.matmul(h_in, nodes[f"{p}.W"]), nodes[f"{p}.b"])
        eta = xi
        info = None
        if cfg.structure == "static":
            eta = static_transform(xi, self.adjacency(nodes, layer))
        elif cfg.structure == "dynamic":
            eta, att = dynamic_attention(xi, nodes, p, cfg.n_heads)
            self.last_attention.append(att)
        elif cfg.structure == "hybrid":
            gate = ad.sigmoid(nodes[f"{p}.att.gate"])
            holder = []

            def bd(e):
                _, att = dynamic_attention(e, nodes, p, cfg.n_heads)
                att = ad.mul(att, gate)
                holder[:] = [att]
                return att
            eta, info = hybrid_transform(xi, self.adjacency(nodes, layer), bd,
                                         cfg.damping, cfg.max_iter, cfg.tol)
            self.last_attention.append(holder[0])
        h = ACTIVATIONS[cfg.activation](eta)
        if cfg.layer_norm:
            h = ad.layer_norm(h, nodes[f"{p}.ln_gain"], nodes[f"{p}.ln_bias"])
        h = ad.dropout(h, cfg.dropout, train=(mode == "train"), rng=rng)
        if cfg.residual and h.shape == ad.as_node(h_in).shape:
            h = ad.add(h, h_in)
        return h, info

    def forward(self, h, nodes: Mapping, mode: str = "eval", rng=None) -> ad.Node:
        self.last_info = []
        self.last_attention = []
        for l in range(len(self.dims) - 1):
            h, info = self.layer_forward(h, nodes, l, mode, rng)
            if info is not None:
                self.last_info.append(info)
        return h

    def penalties(self, nodes: Mapping) -> dict[str, ad.Node]:
        """DAG, sparsity and contraction terms summed over structured layers."""
        out: dict[str, ad.Node] = {}
        if self.config.structure not in ("static", "hybrid"):
            return out
        for l in range(len(self.dims) - 1):
            b = self.adjacency(nodes, l)
            terms = {"dag": dag_penalty(b), "sparse": sparse_penalty(b)}
            if self.config.structure == "hybrid" and l < len(self.last_attention):
                terms["contract"] = contraction_penalty(b, self.last_attention[l])
            for k, v in terms.items():
                out[k] = v if k not in out else ad.add(out[k], v)
        return out

    def structure_matrix(self, params: Mapping[str, np.ndarray]) -> np.ndarray:
        if not self.structured:
            raise StructureError("no structured layer")
        b = params["gsem0.B"]
        return b * structure_mask(b.shape[0], self.config.static_variant)


# ---------------------------------------------------------------- graph utilities

def threshold_adjacency(b: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Binary source x target adjacency from a latent ``B`` (edge j -> i at B[i, j])."""
    return (np.abs(np.asarray(b)) > threshold).T.astype(int)


def find_cycle(adj: np.ndarray) -> list[int] | None:
    """A directed cycle in a source x target adjacency, or None."""
    adj = np.asarray(adj)
    n = adj.shape[0]
    color = [0] * n
    parent = [-1] * n
    for start in range(n):
        if color[start]:
            continue
        stack = [(start, iter(np.flatnonzero(adj[start])))]
        color[start] = 1
        while stack:
            node, children = stack[-1]
            for c in children:
                c = int(c)
                if color[c] == 0:
                    color[c] = 1
                    parent[c] = node
                    stack.append((c, iter(np.flatnonzero(adj[c]))))
                    break
                if color[c] == 1:
                    path = [c]
                    cur = node
                    while cur != c:
                        path.append(cur)
                        cur = parent[cur]
                    path.append(c)
                    return path[::-1]
            else:
                color[node] = 2
                stack.pop()
    return None


def is_acyclic(adj: np.ndarray) -> bool:
    return find_cycle(adj) is None


def export_structure_csv(b: np.ndarray, path, names=None) -> None:
    """Write the adjacency as CSV, row = source, column = target."""
    import csv

    adj = np.asarray(b).T
    names = list(names) if names is not None else [f"v{i}" for i in range(adj.shape[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source"] + names)
        for name, row in zip(names, adj):
            w.writerow([name] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- observed-variable structure learning

@dataclass
class StructureFit:
    b: np.ndarray
    adjacency: np.ndarray
    loss_history: list[float]

    @property
    def acyclic(self) -> bool:
        return is_acyclic(self.adjacency)


def learn_structure(x, lambda_dag: float = 0.1, lambda_sparse: float = 0.01, max_iter: int = 1000,
                    threshold: float = EDGE_THRESHOLD, seed: int = 0, rho: float = 1.0, rho_max: float = 1e16,
                    h_tol: float = 1e-8, max_rounds: int = 100) -> StructureFit:
    """Fit a linear SEM ``x = B x + e`` on observed columns with a free ``B``.

    The objective is the mean squared structural residual plus
    ``lambda_dag * h(B)`` and the L1 penalty. A fixed weight on ``h`` leaves
    small cycles in place, so each round also adds ``alpha * h + rho/2 * h^2``
    with dual ascent on ``alpha`` and ``rho`` grown tenfold whenever ``h`` fails
    to shrink by a factor of four. Each round is solved with L-BFGS-B on the
    split ``B = P - N`` (``P, N >= 0``), which makes the L1 term smooth.
    """
    from scipy import optimize

    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean(axis=0)
    n, d = x.shape
    mask = structure_mask(d, "free")
    free = np.concatenate([mask.ravel(), mask.ravel()]) > 0
    bounds = [(0.0, None) if f else (0.0, 0.0) for f in free]
    w = np.abs(np.random.default_rng(seed).normal(0.0, 1e-3, size=2 * d * d)) * free
    history = []
    alpha, h_prev = 0.0, np.inf

    def to_b(wv):
        return (wv[:d * d] - wv[d * d:]).reshape(d, d)

    def objective(wv, rho_k, alpha_k):
        pv, nv = ad.variable(wv[:d * d].reshape(d, d)), ad.variable(wv[d * d:].reshape(d, d))
        b = ad.sub(pv, nv)
        resid = ad.sub(x, ad.matmul(x, ad.transpose(b)))
        fit = ad.div(ad.sum(ad.square(resid)), 2.0 * n)
        h = dag_penalty(b)
        pen = ad.add(ad.mul(lambda_dag + alpha_k, h), ad.mul(0.5 * rho_k, ad.square(h)))
        l1 = ad.mul(lambda_sparse, ad.add(ad.sum(pv), ad.sum(nv)))
        loss = ad.add(ad.add(fit, pen), l1)
        ad.backward(loss)
        return loss.item(), np.concatenate([pv.grad.ravel(), nv.grad.ravel()])

    for _ in range(max_rounds):
        while True:
            res = optimize.minimize(objective, w, args=(rho, alpha), jac=True, method="L-BFGS-B",
                                    bounds=bounds, options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-10})
            h = float(dag_penalty(to_b(res.x)).item())
            if h <= 0.25 * h_prev or rho >= rho_max:
                break
            rho *= 10.0
        w = res.x
        history.append(float(res.fun))
        alpha += rho * h
        h_prev = h
        if h <= h_tol or rho >= rho_max:
            break
    b = to_b(w)
    return StructureFit(b, threshold_adjacency(b, threshold), history)
