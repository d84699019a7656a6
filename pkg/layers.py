"""
Unified normalization layer: forward and backward passes under any
statistics partition, with training-mode batch statistics and blended
inference statistics.

    y = gamma_c * (x - mu_g) / sqrt(var_g + eps) + beta_c
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import ConfigurationError, DimensionError, DomainError, NumericError
from moments import (DEFAULT_RHO, Moments, MovingMoments, blend, compute_moments,
                     update_moving)
from partition import NormScheme, StatPartition, partition_of
from tensor import Tensor4

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True, eq=False)
class NormParams:
    """Per-channel scale gamma and shift beta, and the stabilizer epsilon."""
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=np.float64).ravel()
        beta = np.array(self.beta, dtype=np.float64).ravel()
        if gamma.shape != beta.shape:
            raise DimensionError("gamma and beta must have one entry per channel")
        if not (np.all(np.isfinite(gamma)) and np.all(np.isfinite(beta))):
            raise NumericError("gamma and beta must be finite")
        if not self.epsilon > 0.0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def identity(cls, n_channels: int, epsilon: float = DEFAULT_EPSILON) -> "NormParams":
        """gamma = 1, beta = 0."""
        return cls(np.ones(n_channels), np.zeros(n_channels), epsilon)

    @property
    def n_channels(self) -> int:
        return int(self.gamma.size)


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Everything backward needs from a training forward pass."""
    x: Tensor4
    partition: StatPartition
    moments: Moments
    xhat: np.ndarray
    params: NormParams


@dataclass(frozen=True, eq=False)
class GradientBundle:
    d_input: Tensor4
    d_gamma: np.ndarray
    d_beta: np.ndarray


def _check_channels(x: Tensor4, params: NormParams):
    if x.n_channels != params.n_channels:
        raise DimensionError(
            f"Input has {x.n_channels} channels, parameters cover {params.n_channels}")


def _normalize(values: np.ndarray, p: StatPartition, moments: Moments, epsilon: float) -> np.ndarray:
    labels = p.labels
    return (values - moments.mean[labels]) / np.sqrt(moments.var[labels] + epsilon)


def _affine(xhat: np.ndarray, params: NormParams) -> np.ndarray:
    return params.gamma.reshape(1, -1, 1, 1) * xhat + params.beta.reshape(1, -1, 1, 1)


def _finite_tensor(values: np.ndarray, what: str) -> Tensor4:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Normalization {what} produced a non-finite value")
    return Tensor4(values)


def forward_train(x: Tensor4, params: NormParams, scheme: NormScheme,
                  moving: MovingMoments) -> Tuple[Tensor4, ForwardCache, MovingMoments]:
    """
    Normalize x with statistics of its own training-mode groups.

    Returns the output, the cache for backward and the updated moving moments.
    """
    _check_channels(x, params)
    p = partition_of(scheme, x.shape, "train")
    moments = compute_moments(x, p)
    xhat = _normalize(x.values, p, moments, params.epsilon)
    y = _finite_tensor(_affine(xhat, params), "output")
    cache = ForwardCache(x=x, partition=p, moments=moments, xhat=xhat, params=params)
    return y, cache, update_moving(moving, x)


def infer_normalize(x: Tensor4, params: NormParams, scheme: NormScheme, moving: MovingMoments,
                    alpha: Optional[float] = None, extrapolate: bool = False) -> np.ndarray:
    """
    Pre-affine inference values: each example's own group statistics blended
    with the moving moments. Examples never see each other.
    """
    _check_channels(x, params)
    if alpha is None:
        alpha = scheme.alpha
    p = partition_of(scheme, x.shape, "infer")
    example = compute_moments(x, p)
    blended = blend(example, moving, alpha, p, extrapolate=extrapolate)
    return _normalize(x.values, p, blended, params.epsilon)


def forward_infer(x: Tensor4, params: NormParams, scheme: NormScheme, moving: MovingMoments,
                  alpha: Optional[float] = None, extrapolate: bool = False) -> Tensor4:
    """Inference output with example weighing alpha (defaults to scheme.alpha)."""
    xhat = infer_normalize(x, params, scheme, moving, alpha, extrapolate)
    return _finite_tensor(_affine(xhat, params), "inference output")


def backward(cache: ForwardCache, dy: Tensor4) -> GradientBundle:
    """Gradients of a training forward pass, differentiating through group statistics."""
    if dy.shape != cache.x.shape:
        raise DimensionError(f"Gradient shape {dy.shape} does not match input {cache.x.shape}")
    p = cache.partition
    labels = p.flat_labels
    counts = cache.moments.count
    xhat = cache.xhat
    grad = dy.values
    params = cache.params

    d_beta = grad.sum(axis=(0, 2, 3))
    d_gamma = (grad * xhat).sum(axis=(0, 2, 3))

    d_xhat = grad * params.gamma.reshape(1, -1, 1, 1)
    mean_d_xhat = np.bincount(labels, weights=d_xhat.ravel(), minlength=p.n_groups) / counts
    mean_d_xhat_xhat = np.bincount(labels, weights=(d_xhat * xhat).ravel(),
                                   minlength=p.n_groups) / counts
    inv_std = 1.0 / np.sqrt(cache.moments.var + params.epsilon)
    grid = p.labels
    d_input = inv_std[grid] * (d_xhat - mean_d_xhat[grid] - xhat * mean_d_xhat_xhat[grid])
    return GradientBundle(d_input=_finite_tensor(d_input, "gradient"),
                          d_gamma=d_gamma, d_beta=d_beta)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, elementwise: bool = False) -> float:
    """
    Gradient-check error between two arrays of the same shape.

    By default this is the worst absolute difference over the whole array
    divided by the largest magnitude found in either array, so a small entry
    next to a large one is judged against the large one. With
    ``elementwise=True`` every entry is scaled by its own magnitude,
    max |a - n| / max(|a|, |n|), and entries where both are below ``floor``
    count as exact.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    if elementwise:
        floor = 1e-8
        magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
        ratios = np.where(magnitude < floor, 0.0, diff / np.maximum(magnitude, floor))
        return float(np.max(ratios, initial=0.0))
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(diff, initial=0.0)) / scale


def finite_diff_check(x: Tensor4, params: NormParams, scheme: NormScheme, dy: Tensor4,
                      step: float = 1e-5) -> float:
    """
    Largest ``relative_error`` between backward and central differences of
    <y, dy>, taken separately for the input, gamma and beta arrays. Each array's
    error is scaled by that array's largest gradient magnitude, not per entry.
    """
    if not step > 0.0:
        raise DomainError(f"step must be positive, got {step}")
    moving = MovingMoments.initial(x.n_channels)
    _, cache, _ = forward_train(x, params, scheme, moving)
    grads = backward(cache, dy)

    def objective(values, gamma, beta) -> float:
        trial = NormParams(gamma, beta, params.epsilon)
        y, _, _ = forward_train(Tensor4(values), trial, scheme, moving)
        return float(np.sum(y.values * dy.values))

    def central(array: np.ndarray, evaluate) -> np.ndarray:
        numeric = np.zeros(array.size)
        flat = array.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            plus = evaluate()
            flat[i] = saved - step
            minus = evaluate()
            flat[i] = saved
            numeric[i] = (plus - minus) / (2.0 * step)
        return numeric.reshape(array.shape)

    values = x.values.copy()
    gamma = params.gamma.copy()
    beta = params.beta.copy()
    evaluate = lambda: objective(values, gamma, beta)

    errors = [
        relative_error(grads.d_input.values, central(values, evaluate)),
        relative_error(grads.d_gamma, central(gamma, evaluate)),
        relative_error(grads.d_beta, central(beta, evaluate)),
    ]
    logger.debug("Gradient check for %s on %s: input %.3e, gamma %.3e, beta %.3e",
                 scheme, x.shape, *errors)
    return max(errors)


class NormLayer:
    """
    A normalization layer instance: its scheme, learnable parameters and
    moving moments. Training calls update the moving moments in place.
    """

    def __init__(self, n_channels: int, scheme: NormScheme, epsilon: float = DEFAULT_EPSILON,
                 rho: float = DEFAULT_RHO):
        self.scheme = scheme
        self.params = NormParams.identity(n_channels, epsilon)
        self.moving = MovingMoments.initial(n_channels, rho)
        self.cache: Optional[ForwardCache] = None
        self.last_normalized: Optional[np.ndarray] = None

    @property
    def n_channels(self) -> int:
        return self.params.n_channels

    def forward(self, x: Tensor4, train: bool = True, alpha: Optional[float] = None,
                extrapolate: bool = False) -> Tensor4:
        if train:
            y, self.cache, self.moving = forward_train(x, self.params, self.scheme, self.moving)
            self.last_normalized = self.cache.xhat
            return y
        self.cache = None
        self.last_normalized = infer_normalize(x, self.params, self.scheme, self.moving,
                                               alpha, extrapolate)
        return _finite_tensor(_affine(self.last_normalized, self.params), "inference output")

    def backward(self, dy: Tensor4) -> GradientBundle:
        if self.cache is None:
            raise ConfigurationError("backward needs a preceding training forward pass")
        return backward(self.cache, dy)
