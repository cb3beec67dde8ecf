from typing import Callable, NamedTuple

from .enums import CleanerMode, CleanerSource


class CleanerModeSpec(NamedTuple):
    gmm_source: CleanerSource
    partition_source: CleanerSource


class Registry(object):
    """Maps cleaner sources to scoring functions and experiment arms to cleaners.

    A GMM scorer is called as ``scorer(losses, labels, num_classes, **options)``
    and returns :class:`cpclab.gmm.CleanerScores`.
    """

    def __init__(self):
        self._registry_gmm_cleaners = {}
        self._registry_modes = {}

    def register_gmm_cleaner(self, source: CleanerSource, scorer: Callable):
        if not isinstance(source, CleanerSource) or source is CleanerSource.CPC:
            raise TypeError("Expected a GMM CleanerSource, but got: {!r}".format(source))
        if not callable(scorer):
            raise TypeError("Expected a scoring function, but got: {!r}".format(scorer))
        self._registry_gmm_cleaners[source] = scorer

    def get_gmm_cleaner(self, source: CleanerSource) -> Callable:
        try:
            return self._registry_gmm_cleaners[CleanerSource(source)]
        except (KeyError, ValueError):
            raise KeyError("No GMM cleaner registered for {!r}".format(source))

    def register_cleaner_mode(
        self,
        mode: CleanerMode,
        gmm_source: CleanerSource,
        partition_source: CleanerSource,
    ):
        if not isinstance(mode, CleanerMode):
            raise TypeError("Expected CleanerMode, but got: {!r}".format(mode))
        if gmm_source not in self._registry_gmm_cleaners:
            raise TypeError(
                "Expected a registered GMM cleaner, but got: {!r}".format(gmm_source)
            )
        if partition_source not in (gmm_source, CleanerSource.CPC):
            raise TypeError(
                "Expected {!r} or the CPC cleaner as partition source, but got: {!r}".format(
                    gmm_source, partition_source
                )
            )
        self._registry_modes[mode] = CleanerModeSpec(gmm_source, partition_source)

    def get_cleaner_mode(self, mode: CleanerMode) -> CleanerModeSpec:
        try:
            return self._registry_modes[CleanerMode(mode)]
        except (KeyError, ValueError):
            raise KeyError("No cleaner mode registered for {!r}".format(mode))

    @property
    def gmm_sources(self):
        return list(self._registry_gmm_cleaners)


def _register_defaults(reg):
    from .gmm import gmm_agnostic_scores, gmm_aware_scores

    reg.register_gmm_cleaner(CleanerSource.GMM_AGNOSTIC, gmm_agnostic_scores)
    reg.register_gmm_cleaner(CleanerSource.GMM_AWARE, gmm_aware_scores)
    agn, awr, cpc = CleanerSource.GMM_AGNOSTIC, CleanerSource.GMM_AWARE, CleanerSource.CPC
    reg.register_cleaner_mode(CleanerMode.GMM_AGN, agn, agn)
    reg.register_cleaner_mode(CleanerMode.GMM_AWR, awr, awr)
    reg.register_cleaner_mode(CleanerMode.CPC_AGN, agn, cpc)
    reg.register_cleaner_mode(CleanerMode.CPC_AWR, awr, cpc)


registry = None


def get_global_registry():
    global registry
    if not registry:
        registry = Registry()
        _register_defaults(registry)
    return registry


def reset_global_registry():
    global registry
    registry = None
