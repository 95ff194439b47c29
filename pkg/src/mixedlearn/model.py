"""Model assembly: encoder, backbone, outcome heads and output SEM."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .covariance import CovarianceError, CovarianceSpec, henderson_predict, load_kinship
from .encoder import Encoder, EncoderConfig, TermInfo, kl_divergence, table_key
from .families import Family, Gaussian, MultiLabel, Multinomial, MultivariateGaussian, OutcomeSpec, OutputSem, \
    check_outcomes, head_forward
from .formula import DesignError, DesignMatrices, FormulaAst, build_design, level_label, parse_formula
from .gsem import GsemBackbone, GsemConfig
from .manifold import ManifoldBackbone, ManifoldBlockConfig

BACKBONES = ("gsem", "manifold")


@dataclass
class Prepared:
    """Design plus targets for one dataset, ready for batching."""

    design: DesignMatrices
    targets: dict[str, np.ndarray]
    n: int

    def take(self, rows: np.ndarray) -> "Prepared":
        return Prepared(self.design.take(rows), {k: v[rows] for k, v in self.targets.items()}, len(rows))


def _as_spec(spec) -> CovarianceSpec:
    return spec if isinstance(spec, CovarianceSpec) else CovarianceSpec.from_dict(spec)


def _class_sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


class MixedModel:
    """Mixed-effects network built from a formula.

    ``covariance`` maps a grouping column to a covariance spec (object or
    dict with a ``type`` key). Parameters live in ``self.params`` as plain
    arrays keyed by name; ``setup`` must run (directly or through ``fit``)
    before the model can be evaluated.
    """

    def __init__(self, formula: str, outcomes: Sequence[OutcomeSpec] | None = None,
                 family: Family | None = None, schema: Mapping[str, str] | None = None,
                 encoder: EncoderConfig | None = None, backbone: str = "gsem",
                 gsem: GsemConfig | None = None, manifold: Sequence[ManifoldBlockConfig] | None = None,
                 aggregation: str = "concat", covariance: Mapping[str, Any] | None = None,
                 output_sem: str = "none", edges: Sequence[Mapping] | None = None, seed: int = 0):
        if backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        self.formula = formula
        self.ast: FormulaAst = parse_formula(formula).with_schema(schema)
        self.schema = dict(schema or {})
        self.encoder_config = encoder or EncoderConfig()
        self.backbone_kind = backbone
        self.gsem_config = gsem or GsemConfig()
        self.manifold_configs = list(manifold or [ManifoldBlockConfig()])
        self.aggregation = aggregation
        self.covariance = {g: _as_spec(s) for g, s in (covariance or {}).items()}
        self.output_sem_mode = output_sem
        self.edges = [dict(e) for e in (edges or [])]
        self.seed = seed
        self.outcomes = list(outcomes) if outcomes is not None else self._default_outcomes(family)
        if not self.outcomes:
            raise ValueError("no outcomes: give responses in the formula or an outcome list")
        check_outcomes(self.outcomes)
        self.params: dict[str, np.ndarray] = {}
        self.class_maps: dict[str, list[str]] = {}
        self.level_maps: dict[str, dict[str, int]] = {}
        self.cat_levels: dict[str, list[str]] = {}
        self.level_coords: dict[int, np.ndarray] = {}
        self.fitted = False
        self.encoder: Encoder | None = None
        self.backbone = None
        self.out_sem: OutputSem | None = None

    def _default_outcomes(self, family: Family | None) -> list[OutcomeSpec]:
        family = family or Gaussian()
        resp = list(self.ast.responses)
        if not resp:
            return []
        if isinstance(family, (MultivariateGaussian, MultiLabel)):
            fam = copy.deepcopy(family)
            fam.n_outcomes = len(resp)
            return [OutcomeSpec("+".join(resp), resp, fam)]
        return [OutcomeSpec(r, r, copy.deepcopy(family)) for r in resp]

    # ------------------------------------------------------------ setup

    @property
    def is_setup(self) -> bool:
        return self.encoder is not None

    def setup(self, data: Mapping, rng: np.random.Generator | None = None) -> Prepared:
        """Build designs from training data and initialise every parameter."""
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        self._check_targets(data)
        for o in self.outcomes:
            if isinstance(o.family, Multinomial):
                labels = sorted({level_label(v) for v in np.asarray(data[o.y], dtype=object)}, key=_class_sort_key)
                if len(labels) > o.family.n_classes:
                    raise DesignError(f"outcome {o.name!r} has {len(labels)} classes, family declares {o.family.n_classes}")
                self.class_maps[o.name] = labels
        design = build_design(self.ast, data, self.schema)
        self.level_maps = design.level_maps
        self.cat_levels = design.cat_levels
        self.level_coords = {}
        for i, term in enumerate(design.random_terms):
            coords = self._level_coords(term.group, data, design.level_maps[term.group])
            if coords is not None:
                self.level_coords[i] = coords
        self._build_components(design.cont_names, design.cat_names, design.cardinalities,
                               [len(design.level_maps[t.group]) for t in design.random_terms])
        targets = self.targets(data)
        self.params = self._init_params(rng, targets)
        return Prepared(design, targets, design.n_rows)

    def _check_targets(self, data: Mapping) -> None:
        for o in self.outcomes:
            for c in o.columns:
                if c not in data:
                    raise DesignError(f"target column {c!r} for outcome {o.name!r} not found in data")

    def _level_coords(self, group: str, data, level_map) -> np.ndarray | None:
        spec = self.covariance.get(group)
        if spec is None or not (spec.kind == "GP" or "coordinates" in spec.params
                                or "coordinates_col" in spec.params):
            return None
        if "coordinates" in spec.params:
            table = {level_label(k): np.atleast_1d(np.asarray(v, dtype=np.float64))
                     for k, v in spec.params["coordinates"].items()}
            missing = [lab for lab in level_map if lab not in table]
            if missing:
                raise CovarianceError(f"no coordinates for levels {missing[:5]} of {group!r}")
            return np.stack([table[lab] for lab in level_map])
        cols = spec.params.get("coordinates_col")
        if cols is None:
            raise CovarianceError(f"GP structure on {group!r} needs 'coordinates' or 'coordinates_col'")
        cols = [cols] if isinstance(cols, str) else list(cols)
        gvals = [level_label(v) for v in np.asarray(data[group], dtype=object)]
        xs = np.column_stack([np.asarray(data[c], dtype=np.float64) for c in cols])
        coords = np.zeros((len(level_map), len(cols)))
        seen = set()
        for row, lab in enumerate(gvals):
            if lab in level_map and lab not in seen:
                coords[level_map[lab]] = xs[row]
                seen.add(lab)
        return coords

    def _kinship_for(self, group: str, level_map) -> np.ndarray | None:
        spec = self.covariance.get(group)
        if spec is None or spec.kind != "KIN":
            return None
        k_full, ids = self._kinship_source(spec)
        pos = {lab: j for j, lab in enumerate(ids)}
        missing = [lab for lab in level_map if lab not in pos]
        if missing:
            raise CovarianceError(f"levels {missing[:5]} of {group!r} are absent from the kinship matrix")
        idx = [pos[lab] for lab in level_map]
        return k_full[np.ix_(idx, idx)]

    @staticmethod
    def _kinship_source(spec: CovarianceSpec) -> tuple[np.ndarray, list[str]]:
        k = spec.params.get("K_group")
        if k is None:
            raise CovarianceError("kinship structure needs 'K_group'")
        k = load_kinship(k) if isinstance(k, str) else np.asarray(k, dtype=np.float64)
        ids = spec.params.get("train_levels")
        ids = [level_label(v) for v in (ids if ids is not None else range(k.shape[0]))]
        if len(ids) != k.shape[0]:
            raise CovarianceError(f"kinship has {k.shape[0]} rows but {len(ids)} level ids")
        return k, ids

    def _build_components(self, cont_names, cat_names, cardinalities, n_levels: Sequence[int]) -> None:
        terms = []
        for i, (term, nl) in enumerate(zip(self.ast.random, n_levels)):
            cov = self.covariance.get(term.group)
            kin = self._kinship_for(term.group, self.level_maps[term.group]) if cov is not None else None
            terms.append(TermInfo(term, nl, cov, self.level_coords.get(i), kin))
        self.encoder = Encoder(self.encoder_config, cont_names, cat_names, cardinalities, terms)
        if self.backbone_kind == "gsem":
            self.backbone = GsemBackbone(self.gsem_config, self.encoder.output_dim)
        else:
            self.backbone = ManifoldBackbone(self.manifold_configs, self.encoder.output_dim, self.aggregation)
        labels = [f"{o.name}.{p}" for o in self.outcomes for p in o.family.param_names()]
        self.out_sem = OutputSem.build(self.output_sem_mode, labels, self.edges)

    def _init_params(self, rng: np.random.Generator, targets: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        params = self.encoder.init_params(rng)
        params.update(self.backbone.init_params(rng))
        h = self.backbone.output_dim
        for o in self.outcomes:
            w = o.family.width()
            y = targets.get(o.name)
            params[f"out.{o.name}.W"] = rng.normal(0.0, 1.0 / math.sqrt(h + w), size=(h, w))
            params[f"out.{o.name}.b"] = np.asarray(o.family.init_bias(y), dtype=np.float64).reshape(w)
            for k, v in o.family.extra_params(y).items():
                params[f"out.{o.name}.{k}"] = np.asarray(v, dtype=np.float64)
        if self.out_sem.free.any():
            p = len(self.out_sem.labels)
            params["outsem.B"] = np.zeros((p, p))
        return params

    # ------------------------------------------------------------ data

    def targets(self, data: Mapping, required: bool = True) -> dict[str, np.ndarray]:
        out = {}
        for o in self.outcomes:
            if not all(c in data for c in o.columns):
                if required:
                    raise DesignError(f"target column(s) {o.columns} for outcome {o.name!r} not found")
                continue
            if isinstance(o.family, Multinomial):
                index = {lab: k for k, lab in enumerate(self.class_maps[o.name])}
                labs = [level_label(v) for v in np.asarray(data[o.y], dtype=object)]
                unknown = sorted({lab for lab in labs if lab not in index})
                if unknown:
                    raise DesignError(f"unknown class label(s) {unknown[:5]} for outcome {o.name!r}")
                out[o.name] = np.array([index[lab] for lab in labs], dtype=np.int64)
                continue
            try:
                cols = [np.asarray(data[c], dtype=np.float64) for c in o.columns]
            except (TypeError, ValueError):
                raise DesignError(f"target column(s) {o.columns} must be numeric") from None
            y = cols[0] if isinstance(o.y, str) else np.column_stack(cols)
            if not np.all(np.isfinite(y)):
                raise DesignError(f"missing or non-finite target values for outcome {o.name!r}")
            out[o.name] = y
        return out

    def prepare(self, data: Mapping, targets_required: bool = True) -> Prepared:
        """Design under the fitted codings; unseen groups map to the unknown row."""
        if not self.is_setup:
            raise RuntimeError("model is not set up; fit it first")
        design = build_design(self.ast, data, self.schema, level_maps=self.level_maps, cat_levels=self.cat_levels)
        targets = self.targets(data, required=targets_required)
        self._attach_extra_levels(design, data)
        return Prepared(design, targets, design.n_rows)

    def _attach_extra_levels(self, design: DesignMatrices, data: Mapping) -> None:
        """Route unseen kinship-linked levels to Henderson predictions."""
        for i, term in enumerate(design.random_terms):
            spec = self.covariance.get(term.group)
            gi = design.group_index[i]
            if spec is None or spec.kind != "KIN" or not (gi < 0).any():
                continue
            k_full, ids = self._kinship_source(spec)
            pos = {lab: j for j, lab in enumerate(ids)}
            level_map = self.level_maps[term.group]
            labels = [level_label(v) for v in np.asarray(data[term.group], dtype=object)]
            new = []
            for r in np.flatnonzero(gi < 0):
                if labels[r] in pos and labels[r] not in new:
                    new.append(labels[r])
            if not new:
                continue
            train_idx = [pos[lab] for lab in level_map]
            k_tt = k_full[np.ix_(train_idx, train_idx)]
            k_nt = k_full[np.ix_([pos[lab] for lab in new], train_idx)]
            design.extra_levels[i] = henderson_predict(k_nt, k_tt, np.eye(len(train_idx)))
            base = len(level_map)
            slot = {lab: base + j for j, lab in enumerate(new)}
            for r in np.flatnonzero(gi < 0):
                if labels[r] in slot:
                    gi[r] = slot[labels[r]]

    # ------------------------------------------------------------ forward

    def node_params(self, requires_grad: bool = False) -> dict[str, ad.Node]:
        make = ad.variable if requires_grad else ad.constant
        return {k: make(v) for k, v in self.params.items()}

    def forward(self, design: DesignMatrices, nodes: Mapping[str, ad.Node], mode: str = "eval",
                rng: np.random.Generator | None = None, drop_terms=(), eps=None,
                backbone_mode: str | None = None) -> dict[str, ad.Node]:
        """Outcome parameters after the output SEM, keyed by outcome name.

        ``backbone_mode`` overrides ``mode`` for the backbone (random effects
        sampled while dropout stays off, for instance).
        """
        h = self.encoder.forward(design, nodes, mode, rng, extra_levels=design.extra_levels,
                                 drop_terms=drop_terms, eps=eps)
        hb = self.backbone.forward(h, nodes, backbone_mode or mode, rng)
        return self.decode(hb, nodes)

    def decode(self, hb, nodes: Mapping[str, ad.Node]) -> dict[str, ad.Node]:
        """Heads plus output SEM applied to backbone features."""
        raws = [head_forward(hb, nodes[f"out.{o.name}.W"], nodes[f"out.{o.name}.b"]) for o in self.outcomes]
        if self.out_sem.mode != "none":
            stacked = raws[0] if len(raws) == 1 else ad.concat(raws, axis=1)
            stacked = self.out_sem.apply(stacked, nodes)
            raws, start = [], 0
            for o in self.outcomes:
                w = o.family.width()
                raws.append(stacked[:, start:start + w])
                start += w
        return {o.name: t for o, t in zip(self.outcomes, raws)}

    def extras(self, o: OutcomeSpec, nodes: Mapping) -> dict:
        prefix = f"out.{o.name}."
        return {k[len(prefix):]: v for k, v in nodes.items()
                if k.startswith(prefix) and k[len(prefix):] not in ("W", "b")}

    def outcome_nll(self, thetas, targets, nodes) -> dict[str, ad.Node]:
        """Per-outcome mean NLL (unweighted)."""
        out = {}
        for o in self.outcomes:
            per_row = o.family.nll(thetas[o.name], targets[o.name], self.extras(o, nodes))
            out[o.name] = ad.mean(per_row)
        return out

    def loss_components(self, batch: Prepared, nodes: Mapping, mode: str = "train",
                        rng: np.random.Generator | None = None) -> dict[str, ad.Node]:
        """Weighted mean NLL, KL and structure penalties for one batch."""
        thetas = self.forward(batch.design, nodes, mode, rng)
        per = self.outcome_nll(thetas, batch.targets, nodes)
        nll = None
        for o in self.outcomes:
            term = ad.mul(o.weight, per[o.name])
            nll = term if nll is None else ad.add(nll, term)
        comps = {"nll": nll, "kl": kl_divergence(self.encoder.tables(nodes))}
        pens = dict(self.backbone.penalties(nodes))
        for k, v in self.out_sem.penalties(nodes).items():
            pens[k] = v if k not in pens else ad.add(pens[k], v)
        for k in ("dag", "sparse", "contract"):
            comps[k] = pens.get(k, ad.constant(0.0))
        return comps

    def convergence_failures(self) -> int:
        return sum(1 for info in getattr(self.backbone, "last_info", []) if not info.converged)

    # ------------------------------------------------------------ structure

    def get_structure_matrix(self) -> np.ndarray:
        if self.backbone_kind != "gsem":
            from .gsem import StructureError
            raise StructureError("no structured layer")
        return self.backbone.structure_matrix(self.params)

    def group_sizes(self, design: DesignMatrices) -> list[int]:
        sizes = []
        for gi in design.group_index:
            sizes += [int(c) for c in np.bincount(gi[gi >= 0]) if c > 0]
        return sizes

    # ------------------------------------------------------------ growth

    def extend_levels(self, data: Mapping, rng: np.random.Generator | None = None) -> dict[str, int]:
        """Append unseen group levels with fresh table rows; returns new-level counts per group."""
        rng = rng if rng is not None else np.random.default_rng(self.seed + 1)
        added: dict[str, int] = {}
        for i, term in enumerate(self.ast.random):
            level_map = self.level_maps[term.group]
            if term.group in added:
                continue
            new = []
            for v in np.asarray(data[term.group], dtype=object):
                lab = level_label(v)
                if lab not in level_map and lab not in new:
                    new.append(lab)
            for lab in new:
                level_map[lab] = len(level_map)
            added[term.group] = len(new)
        for i, term in enumerate(self.ast.random):
            k = added.get(term.group, 0)
            info = self.encoder.terms[i]
            if not k:
                continue
            if info.cov is not None and info.cov.kind != "IID":
                if info.cov.kind == "KIN":
                    info.kinship = self._kinship_for(term.group, self.level_maps[term.group])
                else:
                    coords = self._level_coords(term.group, data, self.level_maps[term.group])
                    if coords is not None:
                        old = self.level_coords.get(i)
                        if old is not None:
                            coords[:old.shape[0]] = old
                        self.level_coords[i] = coords
                        info.level_coords = coords
            for s in term.columns:
                fresh = self.encoder.new_table_params(i, s, k, rng)
                key = table_key(i, s)
                for suffix in ("mu", "log_var"):
                    name = f"{key}.{suffix}"
                    self.params[name] = np.concatenate([self.params[name], fresh[name]], axis=0)
            info.n_levels += k
        return added

    # ------------------------------------------------------------ persistence helpers

    def config_dict(self) -> dict[str, Any]:
        def spec_dict(spec: CovarianceSpec):
            params = {}
            for k, v in spec.params.items():
                if isinstance(v, CovarianceSpec):
                    v = {"type": v.kind, **v.params}
                params[k] = v.tolist() if isinstance(v, np.ndarray) else v
            return {"type": spec.kind, **params}

        return {
            "formula": self.formula,
            "schema": self.schema,
            "outcomes": [o.to_dict() for o in self.outcomes],
            "encoder": asdict(self.encoder_config),
            "backbone": self.backbone_kind,
            "gsem": asdict(self.gsem_config),
            "manifold": [dict(asdict(c), grid_shape=list(c.grid_shape)) for c in self.manifold_configs],
            "aggregation": self.aggregation,
            "covariance": {g: spec_dict(s) for g, s in self.covariance.items()},
            "output_sem": self.output_sem_mode,
            "edges": self.edges,
            "seed": self.seed,
        }

    def design_meta(self) -> dict[str, Any]:
        return {
            "cont_names": list(self.encoder.cont_names),
            "cat_names": list(self.encoder.cat_names),
            "cardinalities": list(self.encoder.cardinalities),
            "n_levels": [t.n_levels for t in self.encoder.terms],
            "level_maps": self.level_maps,
            "cat_levels": self.cat_levels,
            "class_maps": self.class_maps,
            "level_coords": {str(i): c.tolist() for i, c in self.level_coords.items()},
        }

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> "MixedModel":
        model = cls(
            cfg["formula"],
            outcomes=[OutcomeSpec.from_dict(o) for o in cfg["outcomes"]],
            schema=cfg.get("schema"),
            encoder=EncoderConfig(**cfg.get("encoder", {})),
            backbone=cfg.get("backbone", "gsem"),
            gsem=GsemConfig(**cfg.get("gsem", {})),
            manifold=[ManifoldBlockConfig(**c) for c in cfg.get("manifold", [])] or None,
            aggregation=cfg.get("aggregation", "concat"),
            covariance=cfg.get("covariance"),
            output_sem=cfg.get("output_sem", "none"),
            edges=cfg.get("edges"),
            seed=cfg.get("seed", 0),
        )
        if meta is not None:
            model.level_maps = {g: dict(m) for g, m in meta["level_maps"].items()}
            model.cat_levels = {c: list(v) for c, v in meta["cat_levels"].items()}
            model.class_maps = {k: list(v) for k, v in meta.get("class_maps", {}).items()}
            model.level_coords = {int(i): np.asarray(c, dtype=np.float64)
                                  for i, c in meta.get("level_coords", {}).items()}
            model._build_components(meta["cont_names"], meta["cat_names"], meta["cardinalities"], meta["n_levels"])
        return model
