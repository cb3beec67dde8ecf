"""Stage-2 semi-supervised training: label co-refinement, co-guessing, mixup and the vicinal risk."""
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import softmax

from .enums import CleanerSource
from .exceptions import NumericalError, ParameterError
from .nnet import (
    BACKBONE,
    CLASSIFIER,
    NetworkParams,
    backward,
    cross_entropy,
    forward,
    param_keys,
    sgd_step,
)


@dataclass(frozen=True)
class Partition:
    """Clean/noise split of a dataset produced by one cleaner.

    Parameters
    - clean_indices, clean_weights: labeled set X with weights w_i in (0, 1]
    - noise_indices: unlabeled set U (observed labels are kept by the dataset)
    - source: cleaner that produced the split
    - provenance: index of the network whose outputs produced the split
    - fallback: the split was carried over from an earlier epoch
    """

    clean_indices: np.ndarray
    clean_weights: np.ndarray
    noise_indices: np.ndarray
    source: CleanerSource
    provenance: Optional[int] = None
    fallback: bool = False

    def __post_init__(self):
        clean = np.asarray(self.clean_indices, dtype=np.int64)
        weights = np.asarray(self.clean_weights, dtype=np.float64)
        noise = np.asarray(self.noise_indices, dtype=np.int64)
        if weights.shape != clean.shape:
            raise ParameterError("expected one weight per clean index")
        if np.any(weights <= 0) or np.any(weights > 1):
            raise ParameterError("clean weights must lie in (0, 1]")
        both = np.concatenate([clean, noise])
        if not np.array_equal(np.sort(both), np.arange(both.size)):
            raise ParameterError("clean and noise sets must be disjoint and cover every sample")
        for array in (clean, weights, noise):
            array.flags.writeable = False
        object.__setattr__(self, "clean_indices", clean)
        object.__setattr__(self, "clean_weights", weights)
        object.__setattr__(self, "noise_indices", noise)
        object.__setattr__(self, "source", CleanerSource(self.source))

    @property
    def num_samples(self):
        return self.clean_indices.size + self.noise_indices.size

    def clean_mask(self):
        mask = np.zeros(self.num_samples, dtype=bool)
        mask[self.clean_indices] = True
        return mask

    def carried_over(self):
        """The same split, flagged as reused from an earlier epoch."""
        return replace(self, fallback=True)


class VicinalSample(NamedTuple):
    inputs: np.ndarray
    targets: np.ndarray
    lam: float


@dataclass(frozen=True)
class VicinalBatch:
    inputs: np.ndarray
    targets: np.ndarray
    labeled: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        if np.any(self.targets < -1e-12) or not np.allclose(self.targets.sum(axis=1), 1.0, atol=1e-9):
            raise ParameterError("vicinal targets must be probability vectors")
        if np.any(self.lam < 0) or np.any(self.lam > 1):
            raise ParameterError("mix coefficients must lie in [0, 1]")


@dataclass(frozen=True)
class EvrBreakdown:
    labeled: float
    unlabeled: float
    lambda_u: float
    penalty: float
    evr: float
    objective: float


def sharpen(probs, temperature: float) -> np.ndarray:
    """``p_k^(1/T) / sum_j p_j^(1/T)`` row-wise."""
    if temperature <= 0:
        raise ParameterError("temperature must be positive, got {!r}".format(temperature))
    probs = np.asarray(probs, dtype=np.float64)
    if temperature == 1.0:
        return probs / probs.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return softmax(np.log(probs) / temperature, axis=-1)


def refine_labels(labels, weights, p_avg, temperature: float = 0.5) -> np.ndarray:
    """Co-refined targets ``w onehot(y) + (1 - w) p_avg``, sharpened."""
    p_avg = np.atleast_2d(p_avg)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    if np.any(weights <= 0) or np.any(weights > 1):
        raise ParameterError("clean weights must lie in (0, 1]")
    onehot = np.eye(p_avg.shape[1])[np.asarray(labels)]
    return sharpen(weights * onehot + (1.0 - weights) * p_avg, temperature)


def guess_from_probs(probs: Sequence[np.ndarray], temperature: float = 0.5) -> np.ndarray:
    return sharpen(np.mean(probs, axis=0), temperature)


def guess_labels(x, networks: Sequence[NetworkParams], temperature: float = 0.5) -> np.ndarray:
    """Co-guessed targets: sharpened mean of the networks' predictions on ``x``."""
    return guess_from_probs([np.atleast_2d(forward(net, x).probs) for net in networks], temperature)


def mixup_pair(x_i, y_i, x_j, y_j, a: float, seed=None, lam: Optional[float] = None, max_lambda: bool = True):
    """Mix two samples with ``lam ~ Beta(a, a)``, then ``lam <- max(lam, 1 - lam)``.

    ``lam`` fixes the coefficient instead of drawing it.
    """
    if a <= 0:
        raise ParameterError("Beta parameter must be positive, got {!r}".format(a))
    if lam is None:
        lam = float(np.random.default_rng(seed).beta(a, a))
        if max_lambda:
            lam = max(lam, 1.0 - lam)
    x_i, y_i, x_j, y_j = (np.asarray(v, dtype=np.float64) for v in (x_i, y_i, x_j, y_j))
    return VicinalSample(lam * x_i + (1.0 - lam) * x_j, lam * y_i + (1.0 - lam) * y_j, lam)


def mixup_batch(inputs, targets, labeled, a: float, rng, max_lambda: bool = True) -> VicinalBatch:
    """Mix every sample with a partner drawn from a shuffle of the whole batch (X and U)."""
    if a <= 0:
        raise ParameterError("Beta parameter must be positive, got {!r}".format(a))
    rng = np.random.default_rng(rng)
    n = len(inputs)
    lam = rng.beta(a, a, size=n)
    if max_lambda:
        lam = np.maximum(lam, 1.0 - lam)
    partner = rng.permutation(n)
    column = lam[:, None]
    return VicinalBatch(
        column * inputs + (1.0 - column) * inputs[partner],
        column * targets + (1.0 - column) * targets[partner],
        np.asarray(labeled, dtype=bool),
        lam,
    )


def linear_rampup(epoch: int, start: int, length: int = 16) -> float:
    """Weight growing linearly from 0 at ``start`` to 1 after ``length`` epochs."""
    if length <= 0:
        return 1.0 if epoch >= start else 0.0
    return float(np.clip((epoch - start) / length, 0.0, 1.0))


def _softmax_backward(probs, d_probs):
    return probs * (d_probs - np.sum(d_probs * probs, axis=1, keepdims=True))


def evr_loss(params: NetworkParams, batch: VicinalBatch, lambda_u: float, prior_weight: float = 1.0):
    """Vicinal risk of a mixed batch and its parameter gradients.

    Labeled rows use soft cross-entropy, unlabeled rows the mean squared error
    between prediction and target. A uniform-prior penalty on the batch-mean
    prediction is added on top, weighted by ``prior_weight``.
    """
    if lambda_u < 0:
        raise ParameterError("lambda_u must be nonnegative, got {!r}".format(lambda_u))
    out = forward(params, batch.inputs)
    probs = out.probs
    n, num_classes = probs.shape
    labeled = batch.labeled
    unlabeled = ~labeled
    d_logits = np.zeros_like(out.logits)

    loss_x = 0.0
    if labeled.any():
        loss_x, d_x = cross_entropy(out.logits[labeled], batch.targets[labeled])
        d_logits[labeled] += d_x
    loss_u = 0.0
    if unlabeled.any():
        diff = probs[unlabeled] - batch.targets[unlabeled]
        loss_u = float(np.mean(diff ** 2))
        d_probs = 2.0 * diff / diff.size
        d_logits[unlabeled] += lambda_u * _softmax_backward(probs[unlabeled], d_probs)

    penalty = 0.0
    if prior_weight:
        prior = np.full(num_classes, 1.0 / num_classes)
        mean_pred = probs.mean(axis=0)
        penalty = prior_weight * float(np.sum(prior * np.log(prior / mean_pred)))
        d_probs = np.broadcast_to(-prior_weight * prior / mean_pred / n, probs.shape)
        d_logits += _softmax_backward(probs, d_probs)

    evr = loss_x + lambda_u * loss_u
    breakdown = EvrBreakdown(loss_x, loss_u, lambda_u, penalty, evr, evr + penalty)
    return breakdown, backward(params, out.cache, d_logits=d_logits)


def evr_step(
    params: NetworkParams,
    batch: VicinalBatch,
    lambda_u: float,
    lr: Optional[float] = None,
    prior_weight: float = 1.0,
) -> EvrBreakdown:
    """One SGD step of the vicinal risk on the backbone and classifier, in place."""
    breakdown, grads = evr_loss(params, batch, lambda_u, prior_weight)
    if not np.isfinite(breakdown.objective):
        raise NumericalError(
            "vicinal risk is not finite (labeled={}, unlabeled={}, penalty={})".format(
                breakdown.labeled, breakdown.unlabeled, breakdown.penalty
            )
        )
    sgd_step(params, grads, keys=param_keys(params, BACKBONE, CLASSIFIER), lr=lr)
    return breakdown
