"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .covariance import CovarianceError
from .data import ColumnTable, DataError, atomic_write, load_csv
from .encoder import EncoderConfig
from .families import CycleError, OutcomeSpec, family_from_dict
from .formula import DesignError, FormulaSyntaxError
from .gsem import GsemConfig, StructureError
from .interpret import predict_interval, predict_point, shapley_values, summary
from .manifold import ManifoldBlockConfig
from .model import MixedModel
from .persistence import PersistenceError, load_model, save_model
from .simulate import KINDS, simulate
from .trainer import TrainConfig, TrainingError, fit

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _schema(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        name, _, kind = item.partition("=")
        if kind not in ("categorical", "continuous"):
            raise UsageError(f"--schema expects column=categorical|continuous, got {item!r}")
        out[name] = kind
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mixedlearn", description="Mixed-effects neural models for grouped tabular data.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="fit a model and write a model bundle")
    t.add_argument("--data", required=True)
    t.add_argument("--formula", required=True)
    t.add_argument("--config", help="JSON file with model and training settings")
    t.add_argument("--out", required=True, help="output model directory")
    t.add_argument("--val", help="validation CSV for early stopping")
    t.add_argument("--schema", nargs="*", metavar="COL=KIND")
    t.add_argument("--family", default=None, help="outcome family for formula responses (default gaussian)")
    t.add_argument("--log-file")
    t.add_argument("--impute-mean", action="store_true")
    t.add_argument("--report", help="write the fit report JSON here")

    pr = sub.add_parser("predict", help="point predictions (and optional intervals)")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--interval", type=float, metavar="ALPHA")
    pr.add_argument("--samples", type=int, default=200)
    pr.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("summary", help="lme4-style summary table")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--format", choices=("text", "csv", "json"), default="text")
    s.add_argument("--out")

    sh = sub.add_parser("shap", help="Shapley values of fixed-effect features")
    sh.add_argument("--model", required=True)
    sh.add_argument("--data", required=True)
    sh.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    sh.add_argument("--permutations", type=int, default=64)
    sh.add_argument("--seed", type=int, default=0)
    sh.add_argument("--format", choices=("csv", "json"), default="csv")
    sh.add_argument("--out")

    sm = sub.add_parser("simulate", help="write a simulated dataset")
    sm.add_argument("--kind", required=True, choices=KINDS)
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--params", help="JSON object of simulation parameters")
    sm.add_argument("--out", required=True)
    return p


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return cfg


def _model_from_config(formula: str, cfg: dict, schema: dict, family_name: str | None) -> MixedModel:
    outcomes = [OutcomeSpec.from_dict(o) for o in cfg["outcomes"]] if "outcomes" in cfg else None
    family = None
    fam_cfg = cfg.get("family", family_name)
    if fam_cfg is not None:
        family = family_from_dict(fam_cfg if isinstance(fam_cfg, dict) else {"family": fam_cfg})
    return MixedModel(
        formula, outcomes=outcomes, family=family, schema={**cfg.get("schema", {}), **schema},
        encoder=EncoderConfig(**cfg.get("encoder", {})),
        backbone=cfg.get("backbone", "gsem"),
        gsem=GsemConfig(**cfg.get("gsem", {})),
        manifold=[ManifoldBlockConfig(**c) for c in cfg.get("manifold", [])] or None,
        aggregation=cfg.get("aggregation", "concat"),
        covariance=cfg.get("covariance"),
        output_sem=cfg.get("output_sem", "none"),
        edges=cfg.get("edges"),
        seed=cfg.get("seed", cfg.get("train", {}).get("seed", 0)),
    )


def _train_config(cfg: dict, log_file: str | None) -> TrainConfig:
    train = dict(cfg.get("train", {}))
    for k in TrainConfig.__dataclass_fields__:
        if k in cfg and k not in train:
            train[k] = cfg[k]
    if log_file:
        train["log_file"] = log_file
    return TrainConfig.from_dict(train)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    schema = _schema(args.schema)
    model = _model_from_config(args.formula, cfg, schema, args.family)
    targets = [c for o in model.outcomes for c in o.columns]
    data = load_csv(args.data, {**model.schema}, targets=targets, impute_mean=args.impute_mean)
    if data.dropped:
        print(f"dropped {data.dropped} row(s) with missing targets", file=sys.stderr)
    val = load_csv(args.val, model.schema, targets=targets, impute_mean=args.impute_mean) if args.val else None
    tc = _train_config(cfg, args.log_file)
    report = fit(model, data, val, tc)
    save_model(model, args.out, train_config={k: v for k, v in tc.__dict__.items()},
               fit_meta={"stopped_epoch": report.stopped_epoch, "best_epoch": report.best_epoch,
                         "best_loss": report.best_loss, "lambda_kl": report.lambda_kl})
    if args.report:
        atomic_write(args.report, report.to_json())
    print(f"trained {report.stopped_epoch} epoch(s); model written to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.model)
    data = load_csv(args.data, model.schema)
    preds = predict_point(model, data)
    cols: dict[str, np.ndarray] = {}
    for name, res in preds.items():
        mean = res["mean"]
        if mean.ndim == 1:
            cols[f"{name}.mean"] = mean
        else:
            for k in range(mean.shape[1]):
                cols[f"{name}.mean{k}"] = mean[:, k]
        if "class" in res and res["class"].ndim == 1:
            cols[f"{name}.class"] = res["class"]
    if args.interval is not None:
        ivals = predict_interval(model, data, args.samples, args.interval, args.seed)
        for name, (lo, hi) in ivals.items():
            if lo.ndim == 1:
                cols[f"{name}.lower"] = lo
                cols[f"{name}.upper"] = hi
    ColumnTable(cols).to_csv(args.out)
    return EXIT_OK


def cmd_summary(args) -> int:
    model = load_model(args.model)
    targets = [c for o in model.outcomes for c in o.columns]
    data = load_csv(args.data, model.schema, targets=targets)
    s = summary(model, data)
    text = {"text": str, "csv": lambda x: x.to_csv(), "json": lambda x: x.to_json()}[args.format](s)
    _emit(text, args.out)
    return EXIT_OK


def cmd_shap(args) -> int:
    model = load_model(args.model)
    data = load_csv(args.data, model.schema)
    rep = shapley_values(model, data, mode=args.mode, n_permutations=args.permutations, seed=args.seed)
    _emit(rep.to_csv() if args.format == "csv" else rep.to_json(), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    params = json.loads(args.params) if args.params else {}
    sim = simulate(args.kind, params, args.seed)
    sim.data.to_csv(args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "summary": cmd_summary, "shap": cmd_shap,
            "simulate": cmd_simulate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ad.NonFiniteError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DesignError, FormulaSyntaxError, PersistenceError, CovarianceError, CycleError,
            StructureError, FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
