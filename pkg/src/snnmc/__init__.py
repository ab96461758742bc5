"""Matrix completion with synthetic nearest neighbours under missing-not-at-random data."""

from .anchors import AnchorPlan, Biclique, anchor_submatrix, build_plan, maximal_bicliques, partition_rows
from .baselines import BaselineConfig, knn_impute, soft_impute, usvt
from .config import ExperimentConfig, load_config
from .experiments import ResultTable, run_experiment
from .lti import (
    InterventionSchedule,
    LrfSpec,
    LtiFactorSystem,
    augmented_step,
    build_system,
    companion_block,
    selection_matrix,
    simulate,
    step,
)
from .matrix import EvalReport, MaskedMatrix, evaluate, histogram, read_masked_csv, total_variation, write_masked_csv
from .snn import ALL_MISSING, NoiseModel, SnnConfig, SnnEstimate, confidence_interval, snn_complete, snn_entry, snn_entry_transposed
from .spectral import EnergyThreshold, Fixed, UniversalThreshold, hsvt, pcr, select_rank, svd, truncated_pinv

__version__ = "0.1.0"
