"""Uncertainty-guided patch-graph fusion of multi-modal token features.

Modalities are fused by (1) lifting per-patch tokens to Gaussian nodes and
smoothing them over a similarity graph, then (2) routing the aggregated
modal features through a cross-modal mixture of experts whose weights are
tempered by sample-level uncertainty. Training is end-to-end on synthetic
identity datasets; evaluation is closed-set retrieval (mAP / CMC) plus
noise-robustness sweeps.
"""

__version__ = "0.1.0"

from . import config, dataio, evalkit, gpgr, model, numerics, objective, ugmoe
from .checkpoint import load_checkpoint, save_checkpoint, write_history_csv
from .estimator import UggReid
from .errors import (
    BadMagicError,
    ConfigError,
    ContractViolationError,
    DomainError,
    MissingCheckpointError,
    NonFiniteLossError,
    TruncatedPayloadError,
    VersionMismatchError,
)

__all__ = [
    "__version__",
    "numerics",
    "gpgr",
    "ugmoe",
    "model",
    "objective",
    "dataio",
    "evalkit",
    "config",
    "UggReid",
    "load_checkpoint",
    "save_checkpoint",
    "write_history_csv",
    "BadMagicError",
    "ConfigError",
    "ContractViolationError",
    "DomainError",
    "MissingCheckpointError",
    "NonFiniteLossError",
    "TruncatedPayloadError",
    "VersionMismatchError",
]
