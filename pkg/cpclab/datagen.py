"""Synthetic datasets with controllable per-class difficulty, and label-noise injection."""
import csv
import io
import json
import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .enums import NoiseKind
from .exceptions import DatasetError, ParameterError

logger = logging.getLogger(__name__)

DATASET_FORMAT = "cpclab.dataset"
DATASET_FORMAT_VERSION = 1


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class CleanDataset:
    """Features with their ground-truth labels.

    Parameters
    - features: (N, D) float64 array, finite
    - true_labels: (N,) int64 array with values in ``[0, num_classes)``
    - num_classes: K
    - separations: (K,) distance of every class center from the origin
    - class_counts: (K,) samples per class (imbalance), ``None`` when balanced
    """

    features: np.ndarray
    true_labels: np.ndarray
    num_classes: int
    separations: np.ndarray
    class_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        object.__setattr__(self, "true_labels", _frozen(self.true_labels, np.int64))
        object.__setattr__(self, "separations", _frozen(self.separations, np.float64))
        if self.class_counts is not None:
            object.__setattr__(self, "class_counts", _frozen(self.class_counts, np.int64))
        if self.features.ndim != 2:
            raise ParameterError("features must be a 2-D matrix, got shape {}".format(self.features.shape))
        if self.true_labels.shape != (self.features.shape[0],):
            raise ParameterError("expected one label per feature row")
        if self.num_classes < 2:
            raise ParameterError("need at least 2 classes, got {}".format(self.num_classes))
        if self.separations.shape != (self.num_classes,):
            raise ParameterError("expected {} separations".format(self.num_classes))
        if not np.all(np.isfinite(self.features)):
            raise ParameterError("features contain NaN or Inf")
        if self.true_labels.min() < 0 or self.true_labels.max() >= self.num_classes:
            raise ParameterError("labels must lie in [0, {})".format(self.num_classes))
        counts = np.bincount(self.true_labels, minlength=self.num_classes)
        if counts.min() < 2:
            k = int(counts.argmin())
            raise ParameterError("every class needs at least 2 samples, class {} has {}".format(k, int(counts[k])))

    @property
    def num_samples(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class NoisyDataset:
    """A :class:`CleanDataset` whose labels went through a noise process.

    ``base.true_labels`` and ``corrupted`` are ground truth: only evaluation
    code may look at them.
    """

    base: CleanDataset
    observed_labels: np.ndarray
    corrupted: np.ndarray
    noise_kind: NoiseKind
    noise_rate: float

    def __post_init__(self):
        object.__setattr__(self, "observed_labels", _frozen(self.observed_labels, np.int64))
        object.__setattr__(self, "corrupted", _frozen(self.corrupted, bool))
        object.__setattr__(self, "noise_kind", NoiseKind(self.noise_kind))
        if self.observed_labels.shape != self.base.true_labels.shape:
            raise ParameterError("expected one observed label per sample")
        if self.observed_labels.min() < 0 or self.observed_labels.max() >= self.num_classes:
            raise ParameterError("observed labels must lie in [0, {})".format(self.num_classes))
        if not np.array_equal(self.corrupted, self.observed_labels != self.base.true_labels):
            raise ParameterError("corrupted flags disagree with observed vs true labels")

    @property
    def features(self):
        return self.base.features

    @property
    def num_classes(self):
        return self.base.num_classes

    @property
    def num_samples(self):
        return self.base.num_samples

    @property
    def corruption_fraction(self):
        return float(self.corrupted.mean())


def _check_rate(rate):
    if not 0.0 <= rate <= 1.0:
        raise ParameterError("noise rate must lie in [0, 1], got {!r}".format(rate))


def heterogeneous_separations(num_classes: int, low: float = 2.0, high: float = 6.0) -> np.ndarray:
    """Evenly spaced class separations from ``low`` to ``high``."""
    if not 0 < low <= high:
        raise ParameterError("expected 0 < low <= high, got {!r}, {!r}".format(low, high))
    return np.linspace(low, high, num_classes)


def _center_directions(num_classes, dim, rng):
    if num_classes <= 2 * dim:
        rotation, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        # cross-polytope vertices +e_0, -e_0, +e_1, ... in a random orientation
        axes = np.arange(num_classes) // 2
        signs = np.where(np.arange(num_classes) % 2 == 0, 1.0, -1.0)
        return rotation[:, axes].T * signs[:, None]
    directions = rng.standard_normal((num_classes, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def _check_blob_args(n_per_class, num_classes, dim, separations, counts):
    if num_classes < 2:
        raise ParameterError("K must be at least 2, got {!r}".format(num_classes))
    if dim < 2:
        raise ParameterError("dim must be at least 2, got {!r}".format(dim))
    separations = np.asarray(separations, dtype=np.float64)
    if separations.shape != (num_classes,):
        raise ParameterError("expected {} separations, got {}".format(num_classes, separations.size))
    if np.any(separations <= 0) or not np.all(np.isfinite(separations)):
        raise ParameterError("separations must be finite and positive")
    if counts is None:
        if n_per_class < 2:
            raise ParameterError("n_per_class must be at least 2, got {!r}".format(n_per_class))
        counts = np.full(num_classes, n_per_class, dtype=np.int64)
    else:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes,) or counts.min() < 2:
            raise ParameterError("class counts need K entries of at least 2")
    return separations, counts


def _sample_clusters(centers, counts, rng):
    labels = np.repeat(np.arange(len(counts)), counts)
    features = centers[labels] + rng.standard_normal((labels.size, centers.shape[1]))
    return features, labels


def make_blobs(
    n_per_class: int,
    num_classes: int,
    dim: int,
    separations: Sequence[float],
    seed: int,
    counts: Optional[Sequence[int]] = None,
) -> CleanDataset:
    """Sample K unit-variance Gaussian clusters.

    Cluster ``k`` is centered at distance ``separations[k]`` from the origin,
    the centroid of the cross-polytope the directions come from. The data
    centroid is not recentered: opposing classes with unequal separations
    pull it off the origin (by about 0.14 for eight classes on the 2..6 ramp).
    ``counts`` overrides ``n_per_class`` with one size per class.
    """
    separations, counts = _check_blob_args(n_per_class, num_classes, dim, separations, counts)
    rng = np.random.default_rng(seed)
    centers = _center_directions(num_classes, dim, rng) * separations[:, None]
    features, labels = _sample_clusters(centers, counts, rng)
    return CleanDataset(
        features, labels, num_classes, separations,
        class_counts=None if len(set(counts.tolist())) == 1 else counts,
    )


def make_train_test(
    n_train_per_class: int,
    n_test_per_class: int,
    num_classes: int,
    dim: int,
    separations: Sequence[float],
    seed: int,
    counts: Optional[Sequence[int]] = None,
) -> Tuple[CleanDataset, CleanDataset]:
    """Training set as :func:`make_blobs` plus a balanced test set from the same centers."""
    train = make_blobs(n_train_per_class, num_classes, dim, separations, seed, counts=counts)
    _, test_counts = _check_blob_args(n_test_per_class, num_classes, dim, separations, None)
    rng = np.random.default_rng(seed)
    centers = _center_directions(num_classes, dim, rng) * train.separations[:, None]
    test_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    features, labels = _sample_clusters(centers, test_counts, test_rng)
    return train, CleanDataset(features, labels, num_classes, train.separations)


def inject_symmetric(ds: CleanDataset, rate: float, seed: int, exclude_true: bool = False) -> NoisyDataset:
    """Relabel every sample with probability ``rate``.

    The replacement is uniform over all K classes, so it may hit the true
    class again; ``exclude_true`` draws among the other K - 1 classes instead.
    """
    _check_rate(rate)
    rng = np.random.default_rng(seed)
    selected = rng.random(ds.num_samples) < rate
    if exclude_true:
        offsets = rng.integers(1, ds.num_classes, size=ds.num_samples)
        replacement = (ds.true_labels + offsets) % ds.num_classes
    else:
        replacement = rng.integers(0, ds.num_classes, size=ds.num_samples)
    observed = np.where(selected, replacement, ds.true_labels)
    return NoisyDataset(ds, observed, observed != ds.true_labels, NoiseKind.SYMMETRIC, rate)


def default_asymmetric_map(num_classes: int) -> Dict[int, int]:
    """Pairwise flips over half the classes: 0->1, 2->3, ..."""
    return {2 * k: 2 * k + 1 for k in range(num_classes // 2)}


def inject_asymmetric(
    ds: CleanDataset, rate: float, class_map: Mapping[int, int], seed: int
) -> NoisyDataset:
    """Flip samples of the mapped classes to ``class_map[true]`` with probability ``rate``."""
    _check_rate(rate)
    class_map = {int(k): int(v) for k, v in class_map.items()}
    if not class_map or len(class_map) >= ds.num_classes:
        raise ParameterError("class_map must cover a non-empty strict subset of the classes")
    for source, target in class_map.items():
        if source == target:
            raise ParameterError("class_map maps class {} to itself".format(source))
        if not (0 <= source < ds.num_classes and 0 <= target < ds.num_classes):
            raise ParameterError("class_map entry {}->{} is out of range".format(source, target))
    lookup = np.arange(ds.num_classes)
    lookup[list(class_map)] = list(class_map.values())

    rng = np.random.default_rng(seed)
    eligible = np.isin(ds.true_labels, list(class_map))
    flip = eligible & (rng.random(ds.num_samples) < rate)
    observed = np.where(flip, lookup[ds.true_labels], ds.true_labels)
    return NoisyDataset(ds, observed, observed != ds.true_labels, NoiseKind.ASYMMETRIC, rate)


def _parse_header(cells, row):
    declaration = cells[-1].strip()
    name, _, value = declaration.partition("=")
    if name.strip() != "label" or not value:
        raise DatasetError("last header cell must declare K as 'label=K', got {!r}".format(declaration), row)
    try:
        num_classes = int(value)
    except ValueError:
        raise DatasetError("K must be an integer, got {!r}".format(value), row)
    if num_classes < 2 or len(cells) < 2:
        raise DatasetError("header needs at least one feature column and K >= 2", row)
    return len(cells) - 1, num_classes


def load_csv(path) -> CleanDataset:
    """Read a dataset from CSV.

    Lines starting with ``#`` are comments. The first other row is the header:
    feature names followed by ``label=K``. Every data row holds the feature
    values and an integer label in ``[0, K)``.
    """
    try:
        with open(path, "rb") as handle:
            text = handle.read().decode("utf-8")
    except FileNotFoundError:
        raise DatasetError("no such file: {}".format(path))
    except UnicodeDecodeError as error:
        raise DatasetError("{} is not UTF-8 text (byte offset {})".format(path, error.start))
    header = None
    features, labels = [], []
    for row, cells in enumerate(csv.reader(io.StringIO(text, newline="")), start=1):
        if not cells or not "".join(cells).strip() or cells[0].lstrip().startswith("#"):
            continue
        if header is None:
            header = _parse_header(cells, row)
            continue
        num_features, num_classes = header
        if len(cells) != num_features + 1:
            raise DatasetError("expected {} cells, got {}".format(num_features + 1, len(cells)), row)
        try:
            values = [float(cell) for cell in cells[:-1]]
        except ValueError:
            raise DatasetError("non-numeric feature value", row)
        try:
            label = int(cells[-1])
        except ValueError:
            raise DatasetError("label {!r} is not an integer".format(cells[-1]), row)
        if not 0 <= label < num_classes:
            raise DatasetError("label {} out of range [0, {})".format(label, num_classes), row)
        if not np.all(np.isfinite(values)):
            raise DatasetError("feature values must be finite", row)
        features.append(values)
        labels.append(label)
    if header is None or not features:
        raise DatasetError("no samples in {}".format(path))
    num_classes = header[1]
    features = np.array(features)
    labels = np.array(labels)
    counts = np.bincount(labels, minlength=num_classes)
    if counts.min() < 2:
        k = int(counts.argmin())
        raise DatasetError("class {} has {} samples, every class needs at least 2".format(k, int(counts[k])))
    # Empirical distance of each class mean from the global mean.
    centroid = features.mean(axis=0)
    separations = np.array([
        np.linalg.norm(features[labels == k].mean(axis=0) - centroid) for k in range(num_classes)
    ])
    logger.info("loaded %d samples with %d features and %d classes from %s",
                len(labels), features.shape[1], num_classes, path)
    return CleanDataset(features, labels, num_classes, np.maximum(separations, 1e-12))


def save_dataset(ds: NoisyDataset, path):
    """Write a noisy dataset to JSON; ground truth goes to the ``eval_only`` section."""
    document = {
        "format": DATASET_FORMAT,
        "version": DATASET_FORMAT_VERSION,
        "num_classes": ds.num_classes,
        "features": ds.features.tolist(),
        "observed_labels": ds.observed_labels.tolist(),
        "noise": {"kind": ds.noise_kind.value, "rate": ds.noise_rate},
        "eval_only": {
            "true_labels": ds.base.true_labels.tolist(),
            "corrupted": ds.corrupted.tolist(),
            "separations": ds.base.separations.tolist(),
            "class_counts": None if ds.base.class_counts is None else ds.base.class_counts.tolist(),
        },
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle)


def load_dataset(path) -> NoisyDataset:
    try:
        with open(path, encoding="utf-8") as handle:
            document = json.load(handle)
    except FileNotFoundError:
        raise DatasetError("no such file: {}".format(path))
    except json.JSONDecodeError as error:
        raise DatasetError("not a JSON document: {}".format(error))
    if document.get("format") != DATASET_FORMAT or document.get("version") != DATASET_FORMAT_VERSION:
        raise DatasetError("unsupported dataset format {!r} version {!r}".format(
            document.get("format"), document.get("version")))
    truth = document["eval_only"]
    base = CleanDataset(
        np.array(document["features"], dtype=np.float64).reshape(len(truth["true_labels"]), -1),
        truth["true_labels"],
        document["num_classes"],
        truth["separations"],
        class_counts=truth["class_counts"],
    )
    return NoisyDataset(
        base,
        document["observed_labels"],
        truth["corrupted"],
        document["noise"]["kind"],
        document["noise"]["rate"],
    )
