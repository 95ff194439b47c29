"""Mixed-effects neural models for grouped tabular data."""

from .covariance import CovarianceSpec
from .data import ColumnTable, load_csv
from .encoder import EncoderConfig
from .families import (Binomial, Gaussian, MultiLabel, Multinomial, MultivariateGaussian, NegativeBinomial,
                       OutcomeSpec, Poisson)
from .formula import build_design, parse_formula, print_formula
from .gsem import GsemConfig
from .interpret import (extract_parameters, predict_interval, predict_point, shapley_random_effects,
                        shapley_values, summary, variance_decomposition)
from .manifold import ManifoldBlockConfig
from .model import MixedModel
from .oracle import mme_oracle
from .persistence import load_model, save_model
from .simulate import simulate
from .trainer import FitReport, TrainConfig, fit, warm_start_fit

__version__ = "0.1.0"

__all__ = [
    "Binomial", "ColumnTable", "CovarianceSpec", "EncoderConfig", "FitReport", "Gaussian", "GsemConfig",
    "ManifoldBlockConfig", "MixedModel", "MultiLabel", "Multinomial", "MultivariateGaussian",
    "NegativeBinomial", "OutcomeSpec", "Poisson", "TrainConfig", "build_design", "extract_parameters", "fit",
    "load_csv", "load_model", "mme_oracle", "parse_formula", "predict_interval", "predict_point",
    "print_formula", "save_model", "shapley_random_effects", "shapley_values", "simulate", "summary",
    "variance_decomposition", "warm_start_fit",
]
