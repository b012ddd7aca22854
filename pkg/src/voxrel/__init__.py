"""voxrel: volumetric CNN training, relevance-map explanation, evaluation.

The pieces compose left to right: synthetic cohort or manifest -> covariate
residualization -> stratified folds -> trained fold models -> relevance maps
-> region statistics, all driven by one JSON config through the CLI.
"""

from .errors import VoxrelError
from .manifest import DatasetManifest, SubjectRecord, load_manifest, save_manifest
from .model import ModelSpec, TrainedModel, build_model, count_parameters, load_model, save_model
from .preprocess import (
    FoldSplit,
    ResidualModel,
    fit_residual_model,
    make_augmented_training_set,
    residualize,
    stratified_kfold,
)
from .relevance import LrpConfig, RelevanceMap, canonicalize, conservation_report, lrp_relevance
from .synthetic import SynthConfig, generate_synthetic_cohort
from .train import CvReport, TrainConfig, run_cv, train_fold
from .volume import BinaryMask, Volume3D, read_volume, shift_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "CvReport",
    "DatasetManifest",
    "FoldSplit",
    "LrpConfig",
    "ModelSpec",
    "RelevanceMap",
    "ResidualModel",
    "SubjectRecord",
    "SynthConfig",
    "TrainConfig",
    "TrainedModel",
    "Volume3D",
    "VoxrelError",
    "__version__",
    "build_model",
    "canonicalize",
    "conservation_report",
    "count_parameters",
    "fit_residual_model",
    "generate_synthetic_cohort",
    "load_manifest",
    "load_model",
    "lrp_relevance",
    "make_augmented_training_set",
    "read_volume",
    "residualize",
    "run_cv",
    "save_manifest",
    "save_model",
    "shift_volume",
    "stratified_kfold",
    "train_fold",
    "write_volume",
]
