"""Latent-class joint model for high-dimensional longitudinal markers and survival."""

from .data import (Cohort, ColumnSpec, DesignPair, MarkerSeries, ModelParams, SolverError,
                   SubjectRecord, ValidationError, build_designs, load_cohort, write_cohort)
from .em import FitConfig, FittedModel, PosteriorStats, e_step, fit, penalized_objective
from .evaluation import (bootstrap_se, c_index_uno, cross_validate, evaluate, fit_with_cv,
                         kaplan_meier, predictive_marker, predictive_markers, select_K)
from .features import FeatureCatalog, build_association, extract, screen
from .penalties import PenaltySpec
from .simulate import GroundTruth, SimConfig, simulate

__version__ = "0.1.0"
