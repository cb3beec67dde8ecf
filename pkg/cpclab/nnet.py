"""A small numpy network: ReLU backbone, classifier head and L2-normalized projector.

Parameters are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of
shape ``(B, D)`` flows as ``x @ W + b``. Parameter names are grouped by prefix:

- ``backbone.<i>.weight`` / ``backbone.<i>.bias``
- ``classifier.weight`` / ``classifier.bias``
- ``projector.<j>.weight`` / ``projector.<j>.bias``
"""
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .exceptions import NumericalError, ParameterError, StaleCacheError

logger = logging.getLogger(__name__)

BACKBONE = "backbone"
CLASSIFIER = "classifier"
PROJECTOR = "projector"

CHECKPOINT_FORMAT = "cpclab.network"
CHECKPOINT_VERSION = 1

_NORM_FLOOR = 1e-12

Gradients = Dict[str, np.ndarray]


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass(eq=False)
class NetworkParams:
    weights: Dict[str, np.ndarray]
    backbone_depth: int
    projector_depth: int
    hyper: SgdConfig = field(default_factory=SgdConfig)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    # bumped by every sgd_step, caches remember it
    version: int = 0

    def __post_init__(self):
        if self.embedding_dim >= self.feature_dim:
            raise ParameterError(
                "embedding dim {} must be smaller than feature dim {}".format(
                    self.embedding_dim, self.feature_dim
                )
            )

    @property
    def in_dim(self):
        return self.weights["backbone.0.weight"].shape[0]

    @property
    def feature_dim(self):
        return self.weights["classifier.weight"].shape[0]

    @property
    def num_classes(self):
        return self.weights["classifier.weight"].shape[1]

    @property
    def embedding_dim(self):
        return self.weights["projector.{}.weight".format(self.projector_depth - 1)].shape[1]

    def copy(self):
        """Snapshot that shares no arrays with ``self``."""
        return replace(
            self,
            weights={name: value.copy() for name, value in self.weights.items()},
            velocity={name: value.copy() for name, value in self.velocity.items()},
        )


def copy_network(params: NetworkParams) -> NetworkParams:
    if not isinstance(params, NetworkParams):
        raise TypeError("Expected NetworkParams, but got: {!r}".format(params))
    return params.copy()


def param_keys(params: NetworkParams, *groups: str) -> List[str]:
    """Names of the parameters that belong to any of ``groups``."""
    prefixes = tuple(group + "." for group in groups)
    return [name for name in params.weights if name.startswith(prefixes)]


@dataclass(frozen=True)
class ForwardCache:
    version: int
    backbone_inputs: List[np.ndarray]
    backbone_pre: List[np.ndarray]
    projector_inputs: List[np.ndarray]
    projector_pre: List[np.ndarray]
    norms: np.ndarray
    embedding: np.ndarray

    @property
    def feature(self):
        return self.projector_inputs[0]


@dataclass(frozen=True)
class ForwardOut:
    logits: np.ndarray
    probs: np.ndarray
    feature: np.ndarray
    embedding: np.ndarray
    cache: ForwardCache


def _affine_init(rng, fan_in, fan_out, gain):
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in), np.zeros(fan_out)


def init_network(
    in_dim: int,
    num_classes: int,
    hidden: Sequence[int] = (64, 64),
    embedding_dim: int = 16,
    projector_depth: int = 1,
    projector_hidden: int = 32,
    seed=0,
    hyper: Optional[SgdConfig] = None,
) -> NetworkParams:
    """He-initialized network. ``seed`` may be an int or a ``numpy.random.Generator``."""
    if in_dim < 1 or num_classes < 2 or not hidden or projector_depth < 1:
        raise ParameterError("invalid network shape")
    rng = np.random.default_rng(seed)
    weights = {}
    fan_in = in_dim
    for i, width in enumerate(hidden):
        weights["backbone.{}.weight".format(i)], weights["backbone.{}.bias".format(i)] = _affine_init(
            rng, fan_in, width, 2.0
        )
        fan_in = width
    weights["classifier.weight"], weights["classifier.bias"] = _affine_init(rng, fan_in, num_classes, 1.0)
    widths = [projector_hidden] * (projector_depth - 1) + [embedding_dim]
    for j, width in enumerate(widths):
        gain = 2.0 if j < projector_depth - 1 else 1.0
        weights["projector.{}.weight".format(j)], weights["projector.{}.bias".format(j)] = _affine_init(
            rng, fan_in, width, gain
        )
        fan_in = width
    return NetworkParams(weights, len(hidden), projector_depth, hyper or SgdConfig())


def forward(params: NetworkParams, x) -> ForwardOut:
    """Run a sample ``(D,)`` or a batch ``(B, D)`` through the network.

    A single sample returns unbatched outputs; the cache is always batched.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    if batch.ndim != 2 or batch.shape[1] != params.in_dim:
        raise ParameterError(
            "dimension mismatch: network expects {} inputs, got shape {}".format(params.in_dim, x.shape)
        )
    if not np.all(np.isfinite(batch)):
        raise ParameterError("inputs contain NaN or Inf")
    w = params.weights

    inputs, pre = [batch], []
    h = batch
    for i in range(params.backbone_depth):
        z = h @ w["backbone.{}.weight".format(i)] + w["backbone.{}.bias".format(i)]
        h = np.maximum(z, 0.0)
        pre.append(z)
        inputs.append(h)
    feature = h
    logits = feature @ w["classifier.weight"] + w["classifier.bias"]
    probs = softmax(logits, axis=1)

    proj_inputs, proj_pre = [feature], []
    g = feature
    for j in range(params.projector_depth):
        z = g @ w["projector.{}.weight".format(j)] + w["projector.{}.bias".format(j)]
        proj_pre.append(z)
        if j < params.projector_depth - 1:
            g = np.maximum(z, 0.0)
            proj_inputs.append(g)
    norms = np.maximum(np.linalg.norm(proj_pre[-1], axis=1, keepdims=True), _NORM_FLOOR)
    embedding = proj_pre[-1] / norms

    cache = ForwardCache(params.version, inputs[:-1], pre, proj_inputs, proj_pre, norms, embedding)
    if single:
        return ForwardOut(logits[0], probs[0], feature[0], embedding[0], cache)
    return ForwardOut(logits, probs, feature, embedding, cache)


def ce_loss(probs, label: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise ParameterError("label {} out of range [0, {})".format(label, probs.shape[-1]))
    with np.errstate(divide="ignore"):
        return float(-np.log(probs[label])) + 0.0


def per_sample_losses(logits, labels) -> np.ndarray:
    """Cross-entropy of every row, computed with log-sum-exp."""
    logits = np.atleast_2d(logits)
    return -log_softmax(logits, axis=1)[np.arange(len(logits)), labels]


def cross_entropy(logits, targets):
    """Mean cross-entropy against integer labels or soft targets, and its logit gradient."""
    logits = np.atleast_2d(logits)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = np.eye(logits.shape[1])[targets]
    n = logits.shape[0]
    log_probs = log_softmax(logits, axis=1)
    loss = -np.sum(targets * log_probs) / n
    d_logits = (np.exp(log_probs) * targets.sum(axis=1, keepdims=True) - targets) / n
    return float(loss), d_logits


def backward(
    params: NetworkParams,
    cache: ForwardCache,
    d_logits=None,
    d_embedding=None,
    stop_at_projector_input: bool = True,
) -> Gradients:
    """Gradients of every parameter given upstream gradients on logits and embeddings.

    With ``stop_at_projector_input`` the projector path does not reach the backbone.
    """
    if cache.version != params.version:
        raise StaleCacheError(
            "cache computed at parameter version {}, parameters are at {}".format(cache.version, params.version)
        )
    w = params.weights
    grads = {name: np.zeros_like(value) for name, value in w.items()}
    feature = cache.feature
    d_feature = np.zeros_like(feature)

    if d_logits is not None:
        d_logits = np.asarray(d_logits, dtype=np.float64).reshape(feature.shape[0], -1)
        grads["classifier.weight"] = feature.T @ d_logits
        grads["classifier.bias"] = d_logits.sum(axis=0)
        d_feature += d_logits @ w["classifier.weight"].T

    if d_embedding is not None:
        e = cache.embedding
        d_e = np.asarray(d_embedding, dtype=np.float64).reshape(e.shape)
        d_z = (d_e - e * np.sum(e * d_e, axis=1, keepdims=True)) / cache.norms
        for j in reversed(range(params.projector_depth)):
            grads["projector.{}.weight".format(j)] = cache.projector_inputs[j].T @ d_z
            grads["projector.{}.bias".format(j)] = d_z.sum(axis=0)
            d_in = d_z @ w["projector.{}.weight".format(j)].T
            if j > 0:
                d_z = d_in * (cache.projector_pre[j - 1] > 0)
        if not stop_at_projector_input:
            d_feature += d_in

    d_z = d_feature * (cache.backbone_pre[-1] > 0)
    for i in reversed(range(params.backbone_depth)):
        grads["backbone.{}.weight".format(i)] = cache.backbone_inputs[i].T @ d_z
        grads["backbone.{}.bias".format(i)] = d_z.sum(axis=0)
        if i > 0:
            d_z = (d_z @ w["backbone.{}.weight".format(i)].T) * (cache.backbone_pre[i - 1] > 0)
    return grads


def momentum_update(param, grad, buffer, lr, momentum, weight_decay):
    """In-place SGD step with heavy-ball momentum and L2 weight decay; returns the buffer."""
    step = grad + weight_decay * param
    if buffer is None:
        buffer = step.copy()
    else:
        buffer *= momentum
        buffer += step
    param -= lr * buffer
    return buffer


def sgd_step(
    params: NetworkParams,
    grads: Gradients,
    keys: Optional[Iterable[str]] = None,
    lr: Optional[float] = None,
) -> NetworkParams:
    """Apply one momentum step to ``keys`` (all parameters by default), in place.

    ``lr`` overrides ``params.hyper.lr``; schedules are the caller's business.
    """
    hyper = params.hyper
    lr = hyper.lr if lr is None else lr
    keys = list(params.weights) if keys is None else list(keys)
    for name in keys:
        grad = grads[name]
        if grad.shape != params.weights[name].shape:
            raise ParameterError(
                "gradient for {!r} has shape {}, expected {}".format(name, grad.shape, params.weights[name].shape)
            )
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient for {!r}".format(name))
    for name in keys:
        params.velocity[name] = momentum_update(
            params.weights[name], grads[name], params.velocity.get(name), lr, hyper.momentum, hyper.weight_decay
        )
        if not np.all(np.isfinite(params.weights[name])):
            raise NumericalError("parameter {!r} became non-finite (lr={})".format(name, lr))
    params.version += 1
    return params


def learning_rate(base_lr: float, epoch: int, drop_epoch: Optional[int]) -> float:
    """Constant rate, divided by 10 from ``drop_epoch`` on."""
    if drop_epoch is not None and epoch >= drop_epoch:
        return base_lr * 0.1
    return base_lr


def _arrays_to_json(arrays):
    return [
        {"name": name, "shape": list(value.shape), "data": value.ravel().tolist()} for name, value in arrays.items()
    ]


def _arrays_from_json(entries):
    return {entry["name"]: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]) for entry in entries}


def save_network(params: NetworkParams, path):
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone_depth": params.backbone_depth,
        "projector_depth": params.projector_depth,
        "hyper": {"lr": params.hyper.lr, "momentum": params.hyper.momentum, "weight_decay": params.hyper.weight_decay},
        "state_version": params.version,
        "layers": _arrays_to_json(params.weights),
        "velocity": _arrays_to_json(params.velocity),
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle)


def load_network(path) -> NetworkParams:
    with open(path, encoding="utf-8") as handle:
        document = json.load(handle)
    if document.get("format") != CHECKPOINT_FORMAT or document.get("version") != CHECKPOINT_VERSION:
        raise ParameterError("{} is not a version {} network checkpoint".format(path, CHECKPOINT_VERSION))
    return NetworkParams(
        _arrays_from_json(document["layers"]),
        document["backbone_depth"],
        document["projector_depth"],
        SgdConfig(**document["hyper"]),
        velocity=_arrays_from_json(document["velocity"]),
        version=document["state_version"],
    )
