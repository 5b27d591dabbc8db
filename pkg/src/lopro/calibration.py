"""Calibration statistics: proxy Hessian, channel means and activation scale."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .linalg import SizeError, as_matrix

log = logging.getLogger(__name__)


@dataclass
class CalibrationStats:
    """Second-moment statistics of a layer's inputs.

    ``hessian`` is ``E[x x^T]`` over token rows, ``act_mean`` is ``E|x|``
    per channel and ``scale`` is filled in by :func:`derive_scale`.
    """

    hessian: np.ndarray
    act_mean: np.ndarray
    sample_count: int
    scale: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.act_mean.shape[0]


class StatsAccumulator:
    """Streaming accumulator; feed token batches of shape (tokens, n)."""

    def __init__(self, n: Optional[int] = None):
        self.n = n
        self._xtx = None
        self._abs = None
        self.count = 0

    def update(self, batch) -> None:
        x = as_matrix(batch, "calibration batch")
        if self.n is None:
            self.n = x.shape[1]
        if x.shape[1] != self.n:
            raise SizeError(f"batch has {x.shape[1]} channels, expected {self.n}")
        if self._xtx is None:
            self._xtx = np.zeros((self.n, self.n))
            self._abs = np.zeros(self.n)
        self._xtx += x.T @ x
        self._abs += np.abs(x).sum(axis=0)
        self.count += x.shape[0]

    def finalize(self) -> CalibrationStats:
        if self.count == 0:
            raise ValueError("no calibration rows were accumulated")
        h = self._xtx / self.count
        h = 0.5 * (h + h.T)
        return CalibrationStats(h, self._abs / self.count, self.count)


def accumulate_stats(batches: Iterable) -> CalibrationStats:
    """Pool all token rows of ``batches`` into one :class:`CalibrationStats`."""
    acc = StatsAccumulator()
    for b in batches:
        acc.update(b)
    return acc.finalize()


def derive_scale(stats: CalibrationStats, exponent: float = 2.5, eps: float = 1e-8) -> np.ndarray:
    """Activation-aware channel scale ``mean^p / sqrt(max(mean) * min(mean))``.

    Dead channels are clamped to ``eps`` so the result is always finite and
    strictly positive.  The vector is also stored on ``stats.scale``.
    """
    xbar = np.asarray(stats.act_mean, dtype=np.float64)
    if np.any(xbar < 0) or not np.all(np.isfinite(xbar)):
        raise ValueError("act_mean must be finite and non-negative")
    if not np.any(xbar > 0):
        log.warning("all activation means are zero; scale falls back to the eps floor")
    clamped = np.maximum(xbar, eps)
    denom = np.sqrt(max(xbar.max(), eps) * max(xbar.min(), eps))
    s = clamped**exponent / denom
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise FloatingPointError("derived scale is not finite and positive; lower the exponent")
    stats.scale = s
    return s


def synthesize_calibration(
    n: int,
    tokens: int,
    outlier_channels: int = 0,
    outlier_gain: float = 1.0,
    seed: int = 0,
    return_outliers: bool = False,
):
    """Gaussian activations (tokens x n) with a few high-variance channels.

    The outlier channels are picked from ``seed`` as well; pass
    ``return_outliers=True`` to get their indices back.
    """
    if not 0 <= outlier_channels <= n:
        raise ValueError(f"outlier_channels must lie in [0, {n}]")
    if tokens < 1 or n < 1:
        raise ValueError("tokens and n must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((tokens, n))
    outliers = np.sort(rng.choice(n, size=outlier_channels, replace=False))
    x[:, outliers] *= outlier_gain
    if return_outliers:
        return x, outliers
    return x
