"""Training objective and loop: Adam, clipping, schedulers, early stopping."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import DataError
from .encoder import VariationalTable, kl_divergence

SCHEDULERS = ("none", "plateau", "cosine")
PLATEAU_FACTOR = 0.5
PLATEAU_PATIENCE = 10
MIN_LR = 1e-5


class TrainingError(FloatingPointError):
    """Non-finite loss; carries the epoch and batch where it happened."""

    def __init__(self, epoch: int, batch: int, detail: str = ""):
        msg = f"non-finite loss at epoch {epoch}, batch {batch}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 256
    epochs: int = 100
    lambda_kl: float | str = "auto"
    lambda_dag: float | None = None  # None: 0.1 when structure is learned, else 0
    lambda_contract: float = 0.0
    lambda_sparse: float = 0.001
    clip_norm: float | None = None
    patience: int = 20
    scheduler: str = "none"
    seed: int = 0
    log_file: str | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}")
        if self.lambda_kl != "auto" and float(self.lambda_kl) < 0:
            raise ValueError("lambda_kl must be non-negative or 'auto'")
        for name in ("lambda_dag", "lambda_contract", "lambda_sparse"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class FitReport:
    train_loss: list[float] = field(default_factory=list)
    components: dict[str, list[float]] = field(default_factory=dict)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    convergence_failures: list[int] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_loss: float = math.inf
    lambda_kl: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------- objective

def kl_term(tables: Sequence[VariationalTable]) -> ad.Node:
    return kl_divergence(list(tables))


def kl_scale_auto(group_sizes) -> float:
    sizes = np.asarray(list(group_sizes), dtype=np.float64)
    if sizes.size == 0:
        return 0.0
    return float(1.0 / sizes.mean())


def resolve_lambdas(config: TrainConfig, model, design) -> dict[str, float]:
    lam_kl = kl_scale_auto(model.group_sizes(design)) if config.lambda_kl == "auto" else float(config.lambda_kl)
    structured = (model.backbone_kind == "gsem" and model.gsem_config.structure in ("static", "hybrid")
                  and model.gsem_config.hidden_dims) or model.out_sem.mode == "learned"
    lam_dag = config.lambda_dag if config.lambda_dag is not None else (0.1 if structured else 0.0)
    return {"kl": lam_kl, "dag": lam_dag, "contract": config.lambda_contract, "sparse": config.lambda_sparse}


def total_loss(batch, model, nodes, lambdas: Mapping[str, float], n_total: int, mode: str = "train",
               rng: np.random.Generator | None = None) -> tuple[ad.Node, dict[str, float]]:
    """Batch objective scaled so one pass over the data matches the dataset objective.

    NLL: batch mean times ``n_total``. KL and structure penalties: weighted
    and scaled by ``batch_size / n_total``, so each counts once per epoch.
    Returns the total and its additive components.
    """
    comps = model.loss_components(batch, nodes, mode, rng)
    frac = batch.n / n_total
    parts = {"nll": ad.mul(float(n_total), comps["nll"])}
    for k in ("kl", "dag", "contract", "sparse"):
        parts[k] = ad.mul(lambdas[k] * frac, comps[k])
    total = None
    for v in parts.values():
        total = v if total is None else ad.add(total, v)
    return total, {k: v.item() for k, v in parts.items()}


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam update applied in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        if g is None:
            continue
        m = state.m.get(k)
        if m is None or m.shape != g.shape:
            m = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        params[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return 1.0
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for k, g in grads.items():
        if g is not None:
            grads[k] = g * factor
    return factor


class PlateauScheduler:
    def __init__(self, lr: float, factor: float = PLATEAU_FACTOR, patience: int = PLATEAU_PATIENCE,
                 min_lr: float = MIN_LR):
        self.lr, self.factor, self.patience, self.min_lr = lr, factor, patience, min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.wait = 0
        return self.lr


def cosine_lr(base: float, epoch: int, total: int, min_lr: float = MIN_LR) -> float:
    if total <= 1:
        return base
    return min_lr + 0.5 * (base - min_lr) * (1.0 + math.cos(math.pi * epoch / (total - 1)))


# ---------------------------------------------------------------- loop

def _eval_nll(model, prep) -> float:
    nodes = model.node_params()
    comps = model.loss_components(prep, nodes, mode="eval")
    return comps["nll"].item()


def _row_count(data) -> int:
    if hasattr(data, "n_rows"):
        return data.n_rows
    cols = list(data.values())
    return len(cols[0]) if cols else 0


def _remap_unknown(batch, rate: float, rng: np.random.Generator):
    """Send a random fraction of rows to the unknown-group row."""
    gi = []
    for idx in batch.design.group_index:
        idx = idx.copy()
        hit = rng.random(idx.shape[0]) < rate
        idx[hit] = -1
        gi.append(idx)
    batch.design.group_index = gi
    return batch


def fit(model, train_data, val_data=None, config: TrainConfig | None = None,
        warm: bool = False, report: FitReport | None = None) -> FitReport:
    """Run the training loop; returns the per-epoch report.

    With ``warm`` the current parameters are kept (the model must already be
    set up). Best-validation parameters are restored on exit when a
    validation set is given; otherwise the final parameters are kept.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    if _row_count(train_data) == 0:
        raise DataError("training data is empty")
    if warm:
        if not model.is_setup:
            raise RuntimeError("warm start needs a set-up model")
        prep = model.prepare(train_data)
    else:
        prep = model.setup(train_data, np.random.default_rng(config.seed))
    val = model.prepare(val_data) if val_data is not None else None
    lambdas = resolve_lambdas(config, model, prep.design)
    report = report or FitReport()
    report.lambda_kl = lambdas["kl"]
    state = AdamState()
    lr = config.lr
    plateau = PlateauScheduler(lr) if config.scheduler == "plateau" else None
    best_params = {k: v.copy() for k, v in model.params.items()}
    best = math.inf
    if warm and val is not None:
        best = _eval_nll(model, val)
    wait = 0
    learned_unknown = model.encoder_config.unknown_strategy == "learned" and model.encoder.terms
    log_fh = open(config.log_file, "a") if config.log_file else None
    n = prep.n
    bs = min(config.batch_size, n)
    epoch = 0
    try:
        for epoch in range(1, config.epochs + 1):
            if config.scheduler == "cosine":
                lr = cosine_lr(config.lr, epoch - 1, config.epochs)
            order = rng.permutation(n)
            epoch_total = 0.0
            epoch_parts: dict[str, float] = {}
            failures = 0
            for bi, start in enumerate(range(0, n, bs)):
                rows = order[start:start + bs]
                batch = prep.take(rows)
                if learned_unknown:
                    batch = _remap_unknown(batch, model.encoder_config.unknown_rate, rng)
                nodes = model.node_params(requires_grad=True)
                try:
                    total, parts = total_loss(batch, model, nodes, lambdas, n, "train", rng)
                except (ad.NonFiniteError, np.linalg.LinAlgError) as e:
                    raise TrainingError(epoch, bi, str(e)) from None
                if not math.isfinite(total.item()):
                    raise TrainingError(epoch, bi)
                ad.backward(total)
                grads = {k: (nd.grad if nd.grad is not None else np.zeros_like(nd.value)) for k, nd in nodes.items()}
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingError(epoch, bi, "non-finite gradient")
                clip_gradients(grads, config.clip_norm)
                adam_step(model.params, grads, state, lr)
                model.encoder.recenter(model.params)
                failures += model.convergence_failures()
                epoch_total += total.item()
                for k, v in parts.items():
                    epoch_parts[k] = epoch_parts.get(k, 0.0) + v
            report.train_loss.append(epoch_total)
            for k, v in epoch_parts.items():
                report.components.setdefault(k, []).append(v)
            report.convergence_failures.append(failures)
            report.lr.append(lr)
            monitor = epoch_total
            if val is not None:
                monitor = _eval_nll(model, val)
                report.val_loss.append(monitor)
            if log_fh is not None:
                rec = {"epoch": epoch, "train_loss": epoch_total, "lr": lr, **epoch_parts,
                       "convergence_failures": failures}
                if val is not None:
                    rec["val_loss"] = monitor
                log_fh.write(json.dumps(rec) + "\n")
            if plateau is not None:
                lr = plateau.step(monitor)
            if monitor < best:
                best = monitor
                report.best_epoch = epoch
                wait = 0
                if val is not None:
                    best_params = {k: v.copy() for k, v in model.params.items()}
            else:
                wait += 1
                # early stopping watches validation loss only
                if val is not None and wait >= config.patience:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    report.stopped_epoch = epoch
    report.best_loss = best
    if val is not None:
        model.params = best_params
    model.fitted = True
    return report


def warm_start_fit(model, data, config: TrainConfig | None = None, val_data=None) -> FitReport:
    """Continue training a fitted model; unseen group levels get fresh table rows."""
    model.extend_levels(data, np.random.default_rng((config or TrainConfig()).seed + 1))
    return fit(model, data, val_data, config, warm=True)
