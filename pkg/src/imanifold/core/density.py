"""Isotropic Gaussian log-densities.

The canonical convention is the natural-log density summed over all
elements. ``per_dim_nll`` converts to the per-dimension negative
log-likelihood some figures in the literature plot instead.
"""

from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor, as_tensor

LOG_2PI = math.log(2.0 * math.pi)


class DensityError(ValueError):
    pass


def gaussian_log_density(x, mean, variance: float) -> float:
    """log N(x | mean, variance * I) summed over every element of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if x.shape != mean.shape:
        raise DensityError("x and mean must share shape")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mean)) and math.isfinite(variance)):
        raise DensityError("non-finite input")
    if variance <= 0:
        raise DensityError("invalid variance")
    d = x.size
    r = x - mean
    return -0.5 * d * LOG_2PI - 0.5 * d * math.log(variance) - float(np.sum(r * r)) / (2.0 * variance)


def gaussian_log_density_rows(x: np.ndarray, mean, variance) -> np.ndarray:
    """Row-wise version: sums over all axes but the first.

    ``variance`` is a positive scalar or broadcasts against the rows.
    """
    x = np.asarray(x, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance <= 0):
        raise DensityError("invalid variance")
    r = (x - mean).reshape(x.shape[0], -1)
    d = r.shape[1]
    var = variance.reshape(-1) if variance.ndim else variance
    return -0.5 * d * (LOG_2PI + np.log(var)) - np.sum(r * r, axis=1) / (2.0 * var)


def standard_normal_log_density_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
    return -0.5 * z.shape[1] * LOG_2PI - 0.5 * np.sum(z * z, axis=1)


def per_dim_nll(log_p, d: int):
    """Negative log-density divided by the dimension."""
    return -np.asarray(log_p, dtype=np.float64) / float(d)


def gaussian_log_density_t(x, mean, variance: float) -> Tensor:
    """Differentiable row-wise log-density for a fixed scalar variance."""
    x, mean = as_tensor(x), as_tensor(mean)
    if variance <= 0:
        raise DensityError("invalid variance")
    diff = x - mean
    d = int(np.prod(x.shape[1:]))
    return (diff.square() * (-0.5 / variance)).sum(axis=1) + (-0.5 * d * (LOG_2PI + math.log(variance)))
