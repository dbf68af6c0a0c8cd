"""mriseq: 3D multi-parametric MRI series classification and header auditing.

The package covers the full loop at desk scale: synthetic phantom data,
DICOM/volume-file ingestion with header-conflict detection, deterministic
preprocessing, 3D DenseNet/ResNet classifiers, patient-level k-fold
cross-validation with best-epoch checkpointing, and metric/audit reports.

Heavyweight pieces (torch-backed models, training) import lazily through
their submodules; the names exported here are the light structural core.
"""

from .errors import MriseqError
from .labels import PROFILES, UNKNOWN, SequenceLabel, default_rule_table, make_label
from .manifest import HeaderFields, SeriesEntry, StudyRecord, read_manifest, write_manifest
from .preprocess import PreprocessConfig, preprocess_pipeline
from .split import FoldPlan, SplitSpec, make_folds, split_patients
from .volume import SeriesVolume

__version__ = "0.1.0"

__all__ = [
    "FoldPlan",
    "HeaderFields",
    "MriseqError",
    "PROFILES",
    "PreprocessConfig",
    "SequenceLabel",
    "SeriesEntry",
    "SeriesVolume",
    "SplitSpec",
    "StudyRecord",
    "UNKNOWN",
    "default_rule_table",
    "make_folds",
    "make_label",
    "preprocess_pipeline",
    "read_manifest",
    "split_patients",
    "write_manifest",
    "__version__",
]
