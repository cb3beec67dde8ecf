from .config import ExperimentSpec, RunConfig, load_spec
from .cpc import PrototypeBank, partition_cpc
from .gmm import fit_gmm_1d, gmm_agnostic_scores, gmm_aware_scores
from .semisup import Partition
from .trainer import EpochRecord, run

__version__ = "0.3.0"

__all__ = [
    "__version__",
    "ExperimentSpec",
    "RunConfig",
    "load_spec",
    "PrototypeBank",
    "partition_cpc",
    "fit_gmm_1d",
    "gmm_agnostic_scores",
    "gmm_aware_scores",
    "Partition",
    "EpochRecord",
    "run",
]
