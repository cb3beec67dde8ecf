"""Two-component 1-D Gaussian mixtures over per-sample losses (the small-loss cleaner)."""
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .enums import CleanerSource
from .exceptions import DegenerateFitError, ParameterError
from .semisup import Partition

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4
MIN_CLASS_SAMPLES = 4
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class ClassAwareFallbackWarning(UserWarning):
    """A class got the global fit because its own fit was impossible or degenerate."""


class DegenerateFitWarning(UserWarning):
    """A cleaner partition was replaced because its GMM fit was degenerate."""


@dataclass(frozen=True)
class GmmFit:
    """``phi0 N(mu0, sigma0) + phi1 N(mu1, sigma1)``; component 0 is the clean one.

    ``log_likelihood`` holds the mean observed-data log-likelihood after every
    EM iteration.
    """

    mu0: float
    sigma0: float
    phi0: float
    mu1: float
    sigma1: float
    phi1: float
    degenerate: bool = False
    n_iter: int = 0
    log_likelihood: Tuple[float, ...] = field(default=(), repr=False, metadata={"serialize": False})

    @property
    def means(self):
        return np.array([self.mu0, self.mu1])

    @property
    def sigmas(self):
        return np.array([self.sigma0, self.sigma1])

    @property
    def weights(self):
        return np.array([self.phi0, self.phi1])


@dataclass(frozen=True)
class CleanerScores:
    """Per-sample probability of being clean, as estimated by one cleaner."""

    q_clean: np.ndarray
    source: CleanerSource
    degenerate: bool = False
    fits: Tuple[GmmFit, ...] = ()
    fallback_classes: Tuple[int, ...] = ()

    def __post_init__(self):
        q = np.array(self.q_clean, dtype=np.float64)
        if q.ndim != 1 or np.any(~np.isfinite(q)) or np.any(q < 0) or np.any(q > 1):
            raise ParameterError("clean probabilities must be finite and lie in [0, 1]")
        q.flags.writeable = False
        object.__setattr__(self, "q_clean", q)
        object.__setattr__(self, "source", CleanerSource(self.source))


@dataclass(frozen=True)
class ClassAwareFit:
    fits: List[GmmFit]
    fallback: List[bool]
    global_fit: GmmFit

    @property
    def fallback_classes(self):
        return tuple(k for k, flag in enumerate(self.fallback) if flag)


def _log_normal(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - _LOG_SQRT_2PI


def _component_log_weights(x, mu, sigma, phi):
    with np.errstate(divide="ignore"):
        return np.log(phi) + _log_normal(x[:, None], mu, sigma)


def _degenerate_fit(value, sigma_floor):
    return GmmFit(value, sigma_floor, 1.0, value, sigma_floor, 0.0, degenerate=True)


def fit_gmm_1d(
    losses,
    max_iter: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    sigma_floor: float = SIGMA_FLOOR,
) -> GmmFit:
    """Fit a two-component mixture with EM.

    EM starts from a split at the median (moments per side); ``seed`` only
    breaks ties between equal losses at the split. Iteration stops when the
    mean log-likelihood changes by less than ``tol`` or after ``max_iter``
    iterations. All-equal losses give a fit flagged ``degenerate``.
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    n = x.size
    if n < 4:
        raise ParameterError("need at least 4 losses to fit a mixture, got {}".format(n))
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise ParameterError("losses must be finite and nonnegative")
    if np.ptp(x) == 0:
        return _degenerate_fit(float(x[0]), sigma_floor)

    tie_break = np.random.default_rng(seed).permutation(n)
    order = np.lexsort((tie_break, x))
    low, high = x[order[: n // 2]], x[order[n // 2:]]
    mu = np.array([low.mean(), high.mean()])
    sigma = np.maximum([low.std(), high.std()], sigma_floor)
    phi = np.array([0.5, 0.5])

    history = []
    converged = False
    for _ in range(max_iter):
        log_w = _component_log_weights(x, mu, sigma, phi)
        log_norm = logsumexp(log_w, axis=1)
        ll = float(log_norm.mean())
        if history:
            assert ll >= history[-1] - 1e-9 * (1.0 + abs(history[-1])), "EM decreased the log-likelihood"
            if abs(ll - history[-1]) < tol:
                history.append(ll)
                converged = True
                break
        history.append(ll)

        resp = np.exp(log_w - log_norm[:, None])
        nk = resp.sum(axis=0)
        if nk.min() <= 0:
            break
        phi = nk / n
        mu = resp.T @ x / nk
        var = np.sum(resp * (x[:, None] - mu) ** 2, axis=0) / nk
        sigma = np.maximum(np.sqrt(var), sigma_floor)
    if not converged:
        history.append(float(logsumexp(_component_log_weights(x, mu, sigma, phi), axis=1).mean()))
    logger.debug("EM stopped after %d iterations (ll=%.6f)", len(history) - 1, history[-1])

    if mu[0] > mu[1]:
        mu, sigma, phi = mu[::-1], sigma[::-1], phi[::-1]
    phi = phi / phi.sum()
    if not mu[0] < mu[1] or phi.min() == 0 or not np.all(np.isfinite(mu)):
        return _degenerate_fit(float(np.median(x)), sigma_floor)
    return GmmFit(
        float(mu[0]), float(sigma[0]), float(phi[0]),
        float(mu[1]), float(sigma[1]), float(phi[1]),
        n_iter=len(history) - 1,
        log_likelihood=tuple(history),
    )


def posterior_clean(fit: GmmFit, loss):
    """Posterior probability that ``loss`` comes from the clean (small-mean) component."""
    if fit.degenerate:
        raise DegenerateFitError(
            "posterior of a degenerate fit is undefined; treat all samples as one component"
        )
    x = np.asarray(loss, dtype=np.float64)
    log_w = _component_log_weights(np.atleast_1d(x).ravel(), fit.means, fit.sigmas, fit.weights)
    post = np.clip(np.exp(log_w[:, 0] - logsumexp(log_w, axis=1)), 0.0, 1.0)
    if x.ndim == 0:
        return float(post[0])
    return post.reshape(x.shape)


def fit_class_aware(
    losses,
    labels,
    num_classes: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    sigma_floor: float = SIGMA_FLOOR,
) -> ClassAwareFit:
    """One mixture per observed class; tiny or degenerate classes fall back to the global fit."""
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(labels)
    global_fit = fit_gmm_1d(losses, max_iter, tol, seed, sigma_floor)
    fits, fallback = [], []
    for k in range(num_classes):
        class_losses = losses[labels == k]
        fit = None
        if class_losses.size >= MIN_CLASS_SAMPLES:
            fit = fit_gmm_1d(class_losses, max_iter, tol, seed, sigma_floor)
        if fit is None or fit.degenerate:
            fits.append(global_fit)
            fallback.append(True)
        else:
            fits.append(fit)
            fallback.append(False)
    result = ClassAwareFit(fits, fallback, global_fit)
    if result.fallback_classes:
        warnings.warn(
            "classes {} use the global fit (fewer than {} samples or degenerate EM)".format(
                list(result.fallback_classes), MIN_CLASS_SAMPLES
            ),
            ClassAwareFallbackWarning,
            stacklevel=2,
        )
    return result


def normalize_losses(losses) -> np.ndarray:
    """Scale losses into [0, 1] by their maximum."""
    losses = np.asarray(losses, dtype=np.float64)
    top = losses.max() if losses.size else 0.0
    return losses / top if top > 0 else losses.copy()


def gmm_agnostic_scores(
    losses,
    labels=None,
    num_classes: Optional[int] = None,
    normalize: bool = True,
    **fit_options,
) -> CleanerScores:
    """Clean probabilities from one mixture over all losses."""
    x = normalize_losses(losses) if normalize else np.asarray(losses, dtype=np.float64)
    fit = fit_gmm_1d(x, **fit_options)
    if fit.degenerate:
        return CleanerScores(np.ones_like(x), CleanerSource.GMM_AGNOSTIC, degenerate=True, fits=(fit,))
    return CleanerScores(posterior_clean(fit, x), CleanerSource.GMM_AGNOSTIC, fits=(fit,))


def gmm_aware_scores(
    losses,
    labels,
    num_classes: int,
    normalize: bool = True,
    **fit_options,
) -> CleanerScores:
    """Clean probabilities from one mixture per observed class."""
    x = normalize_losses(losses) if normalize else np.asarray(losses, dtype=np.float64)
    labels = np.asarray(labels)
    aware = fit_class_aware(x, labels, num_classes, **fit_options)
    q = np.ones_like(x)
    for k, fit in enumerate(aware.fits):
        mask = labels == k
        if not fit.degenerate and mask.any():
            q[mask] = posterior_clean(fit, x[mask])
    degenerate = all(fit.degenerate for fit in aware.fits)
    return CleanerScores(
        q, CleanerSource.GMM_AWARE, degenerate=degenerate,
        fits=tuple(aware.fits), fallback_classes=aware.fallback_classes,
    )


def partition_from_scores(
    scores: CleanerScores, labels, tau: float, provenance: Optional[int] = None
) -> Partition:
    """Samples with ``q_clean > tau`` are clean (weight ``q_clean``), the rest are noise."""
    if not 0.0 < tau < 1.0:
        raise ParameterError("tau must lie in (0, 1), got {!r}".format(tau))
    q = scores.q_clean
    if len(labels) != q.size:
        raise ParameterError("expected {} labels, got {}".format(q.size, len(labels)))
    clean = np.flatnonzero(q > tau)
    noise = np.flatnonzero(q <= tau)
    return Partition(clean, q[clean], noise, scores.source, provenance=provenance)
