"""Class prototype-based cleaner.

Every class ``k`` owns a prototype ``c_k``; a sample with embedding ``v`` and
label ``y`` is scored ``sigmoid(v . c_y)``. Prototypes and the projector are
trained on the GMM partition:

- clean set: positive pair with ``c_y`` plus negatives against every other
  prototype, the negatives weighted ``1 / K``
- noise set: pushes ``sigmoid(v . c_y)`` towards 0 for the observed label
- confident set: noise-set samples predicted with more confidence than the
  clean-set average of their predicted class, pulled towards that class

and the total objective is ``clean + noise + alpha * confident``.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from .enums import CleanerSource
from .exceptions import NumericalError, ParameterError
from .gmm import CleanerScores, partition_from_scores
from .nnet import PROJECTOR, NetworkParams, backward, forward, momentum_update, param_keys, sgd_step
from .semisup import Partition

logger = logging.getLogger(__name__)

BANK_FORMAT = "cpclab.bank"
BANK_VERSION = 1


@dataclass(eq=False)
class PrototypeBank:
    """Prototype matrix (K, d) and the cleaner's hyperparameters.

    ``warmup`` is the fraction of training epochs, counted after the network
    warm-up, during which the GMM partition still drives stage 2.
    """

    prototypes: np.ndarray
    tau: float = 0.5
    alpha: float = 1.0
    warmup: float = 0.05
    exclude_confident_from_noise: bool = True
    velocity: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.prototypes = np.array(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 2:
            raise ParameterError("prototypes must be a (K, d) matrix with K >= 2")
        if not np.all(np.isfinite(self.prototypes)):
            raise ParameterError("prototypes must be finite")
        if not 0.0 < self.tau < 1.0:
            raise ParameterError("tau must lie in (0, 1), got {!r}".format(self.tau))
        if self.alpha < 0:
            raise ParameterError("alpha must be nonnegative, got {!r}".format(self.alpha))
        if not 0.0 <= self.warmup < 1.0:
            raise ParameterError("warmup must be a fraction in [0, 1), got {!r}".format(self.warmup))

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def dim(self):
        return self.prototypes.shape[1]

    @property
    def lambda_neg(self):
        return 1.0 / self.num_classes

    def warmup_epochs(self, epochs: int) -> int:
        return int(math.ceil(self.warmup * epochs - 1e-9))

    def copy(self):
        return PrototypeBank(
            self.prototypes.copy(), self.tau, self.alpha, self.warmup, self.exclude_confident_from_noise,
            None if self.velocity is None else self.velocity.copy(),
        )


@dataclass(frozen=True)
class ConfidentSet:
    indices: np.ndarray
    pseudo_labels: np.ndarray
    thresholds: np.ndarray

    @classmethod
    def empty(cls, num_classes):
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.full(num_classes, np.inf))

    def __len__(self):
        return self.indices.size

    def check(self, probs):
        """Recompute the admission rule for every member."""
        probs = np.atleast_2d(probs)
        if np.any(probs[self.indices].argmax(axis=1) != self.pseudo_labels):
            raise AssertionError("pseudo-labels differ from the predicted classes")
        if np.any(probs[self.indices, self.pseudo_labels] <= self.thresholds[self.pseudo_labels]):
            raise AssertionError("a confident sample does not exceed its class threshold")


@dataclass(frozen=True)
class CpcLoss:
    value: float
    grad_prototypes: np.ndarray
    grad_embeddings: np.ndarray
    empty: bool = False


@dataclass(frozen=True)
class CpcLossBreakdown:
    clean: float
    noise: float
    confident: float
    alpha: float
    total: float
    confident_size: int = 0


@dataclass(frozen=True)
class CpcBatch:
    """One minibatch for the prototype objective; the masks select the rows of each loss."""

    features: np.ndarray
    labels: np.ndarray
    clean: np.ndarray
    noise: np.ndarray
    confident: np.ndarray
    pseudo_labels: np.ndarray


def make_bank(num_classes, dim, seed=0, scale=0.01, **options) -> PrototypeBank:
    rng = np.random.default_rng(seed)
    return PrototypeBank(rng.standard_normal((num_classes, dim)) * scale, **options)


def init_prototypes(embeddings, labels, clean_indices, num_classes) -> np.ndarray:
    """Per-class mean embedding over the clean set.

    A class with no clean member uses the mean of every sample carrying its
    label, and the global mean when it has none.
    """
    embeddings = np.atleast_2d(embeddings)
    labels = np.asarray(labels)
    clean = np.zeros(len(labels), dtype=bool)
    clean[np.asarray(clean_indices, dtype=np.int64)] = True
    prototypes = np.empty((num_classes, embeddings.shape[1]))
    for k in range(num_classes):
        members = clean & (labels == k)
        if not members.any():
            members = labels == k
        prototypes[k] = embeddings[members].mean(axis=0) if members.any() else embeddings.mean(axis=0)
    return prototypes


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError("labels must lie in [0, {})".format(num_classes))
    return labels


def clean_score(embedding, bank: PrototypeBank, label: int) -> float:
    """``sigmoid(v . c_label)``."""
    if not 0 <= label < bank.num_classes:
        raise ParameterError("label {} out of range [0, {})".format(label, bank.num_classes))
    return float(expit(np.dot(embedding, bank.prototypes[label])))


def clean_scores(embeddings, bank: PrototypeBank, labels) -> np.ndarray:
    labels = _check_labels(labels, bank.num_classes)
    embeddings = np.atleast_2d(embeddings)
    return expit(np.einsum("nd,nd->n", embeddings, bank.prototypes[labels]))


def cpc_scores(bank: PrototypeBank, embeddings, labels) -> CleanerScores:
    return CleanerScores(clean_scores(embeddings, bank, labels), CleanerSource.CPC)


def _empty_loss(bank, dim):
    return CpcLoss(0.0, np.zeros_like(bank.prototypes), np.zeros((0, dim)), empty=True)


def _finish(bank, embeddings, values, grad_scores):
    n = embeddings.shape[0]
    grad_scores = grad_scores / n
    return CpcLoss(
        float(values.sum() / n),
        grad_scores.T @ embeddings,
        grad_scores @ bank.prototypes,
    )


def loss_clean_set(embeddings, labels, bank: PrototypeBank) -> CpcLoss:
    """Positive pair with the labeled prototype, negatives with the others weighted 1/K."""
    embeddings = np.atleast_2d(embeddings)
    labels = _check_labels(labels, bank.num_classes)
    if labels.size == 0:
        return _empty_loss(bank, bank.dim)
    s = embeddings @ bank.prototypes.T
    positive = np.eye(bank.num_classes, dtype=bool)[labels]
    lam = bank.lambda_neg
    values = -(log_expit(s[positive]) + lam * np.sum(np.where(positive, 0.0, log_expit(-s)), axis=1))
    sig = expit(s)
    grad_scores = np.where(positive, sig - 1.0, lam * sig)
    return _finish(bank, embeddings, values, grad_scores)


def loss_noise_set(embeddings, labels, bank: PrototypeBank) -> CpcLoss:
    """``-log(1 - sigmoid(v . c_y))`` for the observed (noisy) label ``y``."""
    embeddings = np.atleast_2d(embeddings)
    labels = _check_labels(labels, bank.num_classes)
    if labels.size == 0:
        return _empty_loss(bank, bank.dim)
    s = np.einsum("nd,nd->n", embeddings, bank.prototypes[labels])
    grad_scores = np.zeros((labels.size, bank.num_classes))
    grad_scores[np.arange(labels.size), labels] = expit(s)
    return _finish(bank, embeddings, -log_expit(-s), grad_scores)


def loss_confident_set(embeddings, pseudo_labels, bank: PrototypeBank) -> CpcLoss:
    """``-log sigmoid(v . c_k)`` for the predicted class ``k``."""
    embeddings = np.atleast_2d(embeddings)
    labels = _check_labels(pseudo_labels, bank.num_classes)
    if labels.size == 0:
        return _empty_loss(bank, bank.dim)
    s = np.einsum("nd,nd->n", embeddings, bank.prototypes[labels])
    grad_scores = np.zeros((labels.size, bank.num_classes))
    grad_scores[np.arange(labels.size), labels] = expit(s) - 1.0
    return _finish(bank, embeddings, -log_expit(s), grad_scores)


def select_confident(noise_indices, clean_indices, labels, probs) -> ConfidentSet:
    """Noise-set samples whose top prediction beats the clean-set mean confidence of that class.

    Classes without clean samples admit nobody.
    """
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels)
    noise_indices = np.asarray(noise_indices, dtype=np.int64)
    clean_indices = np.asarray(clean_indices, dtype=np.int64)
    num_classes = probs.shape[1]
    thresholds = np.full(num_classes, np.inf)
    clean_labels = labels[clean_indices]
    for k in range(num_classes):
        members = clean_indices[clean_labels == k]
        if members.size:
            thresholds[k] = probs[members, k].mean()
    if noise_indices.size == 0:
        return ConfidentSet(noise_indices, noise_indices.copy(), thresholds)
    predicted = probs[noise_indices].argmax(axis=1)
    admitted = probs[noise_indices, predicted] > thresholds[predicted]
    return ConfidentSet(noise_indices[admitted], predicted[admitted], thresholds)


def cpc_objective(bank: PrototypeBank, params: NetworkParams, batch: CpcBatch):
    """Prototype objective of one batch, the prototype gradient and the network gradients.

    Network gradients stop at the projector input, so only projector entries are nonzero.
    """
    out = forward(params, batch.features)
    embeddings = np.atleast_2d(out.embedding)
    clean = loss_clean_set(embeddings[batch.clean], batch.labels[batch.clean], bank)
    noise = loss_noise_set(embeddings[batch.noise], batch.labels[batch.noise], bank)
    d_embedding = np.zeros_like(embeddings)
    d_embedding[batch.clean] += clean.grad_embeddings
    d_embedding[batch.noise] += noise.grad_embeddings
    grad_prototypes = clean.grad_prototypes + noise.grad_prototypes
    confident_value = 0.0
    alpha = bank.alpha
    if alpha > 0:
        confident = loss_confident_set(embeddings[batch.confident], batch.pseudo_labels[batch.confident], bank)
        confident_value = confident.value
        d_embedding[batch.confident] += alpha * confident.grad_embeddings
        grad_prototypes = grad_prototypes + alpha * confident.grad_prototypes
    breakdown = CpcLossBreakdown(
        clean.value, noise.value, confident_value, alpha,
        clean.value + noise.value + alpha * confident_value,
        int(batch.confident.sum()) if alpha > 0 else 0,
    )
    grads = backward(params, out.cache, d_embedding=d_embedding, stop_at_projector_input=True)
    return breakdown, grad_prototypes, grads


def update(
    bank: PrototypeBank,
    params: NetworkParams,
    features,
    labels,
    partition: Partition,
    confident: Optional[ConfidentSet] = None,
    batch_size: int = 64,
    rng=None,
    lr: Optional[float] = None,
) -> CpcLossBreakdown:
    """One SGD pass over the data on the prototype objective.

    Prototypes and projector weights move, the backbone and classifier do not.
    With ``alpha == 0`` the confident set is ignored entirely. Returns the mean
    batch breakdown.
    """
    labels = np.asarray(labels)
    n = partition.num_samples
    if n != len(labels):
        raise ParameterError("partition covers {} samples, got {} labels".format(n, len(labels)))
    lr = params.hyper.lr if lr is None else lr
    rng = np.random.default_rng(rng)

    clean = partition.clean_mask()
    confident_mask = np.zeros(n, dtype=bool)
    pseudo = np.zeros(n, dtype=np.int64)
    if confident is not None and bank.alpha > 0 and len(confident):
        confident_mask[confident.indices] = True
        pseudo[confident.indices] = confident.pseudo_labels
    noise = ~clean
    if bank.exclude_confident_from_noise:
        noise &= ~confident_mask

    projector_keys = param_keys(params, PROJECTOR)
    order = rng.permutation(n)
    totals = np.zeros(4)
    confident_size = 0
    num_batches = 0
    for start in range(0, n, batch_size):
        rows = order[start:start + batch_size]
        batch = CpcBatch(features[rows], labels[rows], clean[rows], noise[rows], confident_mask[rows], pseudo[rows])
        breakdown, grad_prototypes, grads = cpc_objective(bank, params, batch)
        if not np.isfinite(breakdown.total):
            raise NumericalError(
                "prototype loss is not finite (clean={}, noise={}, confident={})".format(
                    breakdown.clean, breakdown.noise, breakdown.confident
                )
            )
        if not np.all(np.isfinite(grad_prototypes)):
            raise NumericalError("non-finite gradient for 'prototypes'")
        hyper = params.hyper
        bank.velocity = momentum_update(
            bank.prototypes, grad_prototypes, bank.velocity, lr, hyper.momentum, hyper.weight_decay
        )
        sgd_step(params, grads, keys=projector_keys, lr=lr)
        totals += (breakdown.clean, breakdown.noise, breakdown.confident, breakdown.total)
        confident_size += breakdown.confident_size
        num_batches += 1
    if num_batches == 0:
        return CpcLossBreakdown(0.0, 0.0, 0.0, bank.alpha, 0.0)
    clean_loss, noise_loss, confident_loss, total = totals / num_batches
    return CpcLossBreakdown(clean_loss, noise_loss, confident_loss, bank.alpha, total, confident_size)


def partition_cpc(
    bank: PrototypeBank, embeddings, labels, tau: Optional[float] = None, provenance: Optional[int] = None
) -> Partition:
    """Split by prototype similarity: ``sigmoid(v . c_y) > tau`` is clean."""
    tau = bank.tau if tau is None else tau
    return partition_from_scores(cpc_scores(bank, embeddings, labels), labels, tau, provenance=provenance)


def self_labeled_partition(
    bank: PrototypeBank, embeddings, labels, provenance: Optional[int] = None
) -> Partition:
    """A sample is clean when its most similar prototype is the one of its label.

    Replaces the GMM supervision of the prototypes for the self-labeling ablation.
    """
    labels = _check_labels(labels, bank.num_classes)
    embeddings = np.atleast_2d(embeddings)
    similarity = embeddings @ bank.prototypes.T
    agree = similarity.argmax(axis=1) == labels
    clean = np.flatnonzero(agree)
    weights = np.maximum(expit(similarity[clean, labels[clean]]), np.finfo(float).tiny)
    return Partition(clean, weights, np.flatnonzero(~agree), CleanerSource.CPC, provenance=provenance)


def score_histogram(scores, bins: int = 10):
    counts, edges = np.histogram(np.asarray(scores), bins=bins, range=(0.0, 1.0))
    return {"counts": counts.tolist(), "edges": edges.tolist()}


def save_bank(bank: PrototypeBank, path):
    document = {
        "format": BANK_FORMAT,
        "version": BANK_VERSION,
        "prototypes": bank.prototypes.tolist(),
        "velocity": None if bank.velocity is None else bank.velocity.tolist(),
        "tau": bank.tau,
        "alpha": bank.alpha,
        "warmup": bank.warmup,
        "exclude_confident_from_noise": bank.exclude_confident_from_noise,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle)


def load_bank(path) -> PrototypeBank:
    with open(path, encoding="utf-8") as handle:
        document = json.load(handle)
    if document.get("format") != BANK_FORMAT or document.get("version") != BANK_VERSION:
        raise ParameterError("{} is not a version {} prototype bank".format(path, BANK_VERSION))
    velocity = document["velocity"]
    return PrototypeBank(
        np.array(document["prototypes"]),
        document["tau"],
        document["alpha"],
        document["warmup"],
        document["exclude_confident_from_noise"],
        None if velocity is None else np.array(velocity),
    )
