from enum import Enum


class NoiseKind(str, Enum):
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"


class CleanerSource(str, Enum):
    """Which cleaner produced a set of clean-probability scores."""

    GMM_AGNOSTIC = "gmm_agnostic"
    GMM_AWARE = "gmm_aware"
    CPC = "cpc"

    @property
    def short_name(self):
        return _SHORT_NAMES[self]


_SHORT_NAMES = {
    CleanerSource.GMM_AGNOSTIC: "gmm_agn",
    CleanerSource.GMM_AWARE: "gmm_awr",
    CleanerSource.CPC: "cpc",
}


class CleanerMode(str, Enum):
    """Experiment arm.

    The prefix names the cleaner whose partition drives stage 2 once the CPC
    warm-up is over; the suffix names the GMM flavor supervising the prototypes
    (and driving stage 2 in the ``gmm_*`` arms).
    """

    GMM_AGN = "gmm_agn"
    GMM_AWR = "gmm_awr"
    CPC_AGN = "cpc_agn"
    CPC_AWR = "cpc_awr"


class PrototypeSupervision(str, Enum):
    """Where the prototypes get their clean/noise targets from.

    ``self`` replaces the GMM partition with argmax prototype similarity.
    """

    GMM = "gmm"
    SELF = "self"


class Phase(str, Enum):
    WARMUP = "warmup"
    TRAIN = "train"
