"""Deterministic desk-scale simulator of mixed-modality federated learning
with adaptively constructed prototypes, relationship-graph model
aggregation, and global knowledge-transfer losses."""

from .config import ExperimentConfig, load_config, serialize_config
from .data import SyntheticSpec
from .federation import run_training
from .harness import run, sweep

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "SyntheticSpec",
    "load_config",
    "serialize_config",
    "run",
    "run_training",
    "sweep",
    "__version__",
]
