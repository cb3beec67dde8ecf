"""Cleaner and classifier instrumentation: AUC, KS heterogeneity, posterior agreement, accuracy."""
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import rel_entr
from scipy.stats import kstwobign, rankdata

from .exceptions import ParameterError
from .nnet import NetworkParams, forward

KLD_EPSILON = 1e-6


class KsResult(NamedTuple):
    statistic: float
    pvalue: float


@dataclass(frozen=True)
class AucCurve:
    cleaner: str
    network: int
    epochs: Tuple[int, ...]
    values: Tuple[float, ...]

    def __post_init__(self):
        if any(not 0.0 <= value <= 1.0 for value in self.values if value is not None):
            raise ParameterError("AUC values must lie in [0, 1]")


@dataclass(frozen=True)
class KsReport:
    """Per-class two-sample KS tests of class losses against the losses of all classes.

    ``clean[k]`` compares the clean samples labeled ``k`` with every clean
    sample, ``noise[k]`` does the same within the corrupted samples. Entries
    are ``None`` when a side has fewer than 2 samples.
    """

    clean: Tuple[Optional[KsResult], ...]
    noise: Tuple[Optional[KsResult], ...]
    alpha: float

    @staticmethod
    def _fraction(results, alpha):
        tested = [result.pvalue for result in results if result is not None]
        return float(np.mean(np.array(tested) < alpha)) if tested else float("nan")

    @property
    def fraction_significant_clean(self):
        return self._fraction(self.clean, self.alpha)

    @property
    def fraction_significant_noise(self):
        return self._fraction(self.noise, self.alpha)

    def rows(self):
        for name, results in (("clean", self.clean), ("noise", self.noise)):
            for k, result in enumerate(results):
                if result is not None:
                    yield {"subpopulation": name, "class": k, "statistic": result.statistic, "pvalue": result.pvalue}


def auc(scores, is_clean) -> float:
    """Probability that a clean sample outscores a noisy one, ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    is_clean = np.asarray(is_clean, dtype=bool)
    if scores.shape != is_clean.shape:
        raise ParameterError("expected one flag per score")
    n_pos = int(is_clean.sum())
    n_neg = is_clean.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("AUC is undefined unless both clean and noisy samples are present")
    ranks = rankdata(scores)
    u = ranks[is_clean].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ks_two_sample(a, b) -> KsResult:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        raise ParameterError("KS test needs at least 2 values per sample, got {} and {}".format(n1, n2))
    support = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, support, side="right") / n1
    cdf_b = np.searchsorted(b, support, side="right") / n2
    statistic = float(np.max(np.abs(cdf_a - cdf_b)))
    en = np.sqrt(n1 * n2 / float(n1 + n2))
    pvalue = float(np.clip(kstwobign.sf((en + 0.12 + 0.11 / en) * statistic), 0.0, 1.0))
    return KsResult(statistic, pvalue)


def heterogeneity_report(losses, labels, corrupted, num_classes: int, alpha: float = 0.05) -> KsReport:
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(labels)
    corrupted = np.asarray(corrupted, dtype=bool)
    sides = []
    for subpopulation in (~corrupted, corrupted):
        pooled = losses[subpopulation]
        results = []
        for k in range(num_classes):
            members = losses[subpopulation & (labels == k)]
            results.append(ks_two_sample(members, pooled) if members.size >= 2 and pooled.size >= 2 else None)
        sides.append(tuple(results))
    return KsReport(sides[0], sides[1], alpha)


def _clamped_pair(q_prime, q, epsilon):
    q_prime = np.asarray(q_prime, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if q_prime.shape != q.shape:
        raise ParameterError("length mismatch: {} vs {}".format(q_prime.shape, q.shape))
    return np.clip(q_prime, epsilon, 1 - epsilon), np.clip(q, epsilon, 1 - epsilon)


def kld_bernoulli(q_prime, q, epsilon: float = KLD_EPSILON) -> float:
    """Mean of ``KL(Bern(q'_i) || Bern(q_i))`` over samples."""
    q_prime, q = _clamped_pair(q_prime, q, epsilon)
    return float(np.mean(rel_entr(q_prime, q) + rel_entr(1 - q_prime, 1 - q)))


def consistency_rate(q_prime, q, tau: float) -> float:
    """Fraction of samples both score vectors put on the same side of ``tau``."""
    q_prime = np.asarray(q_prime, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if q_prime.shape != q.shape:
        raise ParameterError("length mismatch: {} vs {}".format(q_prime.shape, q.shape))
    return float(np.mean((q_prime > tau) == (q > tau)))


def predict_proba(networks: Sequence[NetworkParams], features) -> np.ndarray:
    return np.mean([np.atleast_2d(forward(net, features).probs) for net in networks], axis=0)


def test_accuracy(networks: Sequence[NetworkParams], test_set, ensemble: bool = True) -> float:
    """Accuracy of the argmax of the averaged softmax (first network only without ``ensemble``)."""
    networks = list(networks) if ensemble else list(networks)[:1]
    predictions = predict_proba(networks, test_set.features).argmax(axis=1)
    return float(np.mean(predictions == test_set.true_labels))


# not a test for pytest to collect
test_accuracy.__test__ = False


def auc_curves(records: Iterable[Mapping]) -> Dict[Tuple[str, int], AucCurve]:
    """AUC-vs-epoch curves keyed by ``(cleaner, network)`` from metrics records."""
    points: Dict[Tuple[str, int], List[Tuple[int, float]]] = {}
    for record in records:
        for cleaner, value in (record.get("auc") or {}).items():
            if value is not None:
                points.setdefault((cleaner, record["network"]), []).append((record["epoch"], value))
    return {
        key: AucCurve(key[0], key[1], tuple(epoch for epoch, _ in pairs), tuple(value for _, value in pairs))
        for key, pairs in points.items()
    }


def window_means(values) -> Tuple[float, float, float]:
    """Means over the first, middle and final thirds of ``values``."""
    values = np.asarray([value for value in values if value is not None], dtype=np.float64)
    if values.size < 3:
        raise ParameterError("need at least 3 values to split into thirds, got {}".format(values.size))
    first, middle, last = np.array_split(values, 3)
    return float(first.mean()), float(middle.mean()), float(last.mean())
