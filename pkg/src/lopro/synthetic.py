"""Synthetic layers for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .calibration import CalibrationStats, accumulate_stats, synthesize_calibration


def synthesize_weights(m: int, n: int, seed: int = 0, rank: int = 8, df: float = 3.0,
                       lowrank_gain: float = 1.0, outlier_frac: float = 0.01,
                       outlier_gain: float = 10.0) -> np.ndarray:
    """Weights with correlated columns and heavy tails.

    ``W = G A + T + O``: a rank-``rank`` Gaussian part that correlates the
    columns, Student-t noise with ``df`` degrees of freedom, and a sparse set
    of large entries.
    """
    rng = np.random.default_rng(seed)
    corr = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n)) / np.sqrt(rank)
    noise = rng.standard_t(df, size=(m, n))
    spikes = rng.random((m, n)) < outlier_frac
    sparse = np.where(spikes, rng.standard_normal((m, n)) * outlier_gain, 0.0)
    return lowrank_gain * corr + noise + sparse


def synthetic_layer(m: int, n: int, seed: int = 0, tokens: int = 1024,
                    outlier_channels: int | None = None, act_gain: float = 10.0, **weight_kw):
    """``(W, stats)`` for a synthetic layer; activations use ``seed + 1``."""
    if outlier_channels is None:
        outlier_channels = max(1, n // 16)
    w = synthesize_weights(m, n, seed, **weight_kw)
    x = synthesize_calibration(n, tokens, outlier_channels, act_gain, seed + 1)
    return w, accumulate_stats([x])


__all__ = ["synthesize_weights", "synthetic_layer", "CalibrationStats"]
