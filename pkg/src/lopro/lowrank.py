"""Rank-1 sketch SVD (R1SVD) with optional 8-bit float storage of U and V.

Each component is extracted from a single Gaussian sketch vector pushed
through a few Gram power iterations; the QR and small SVD of a regular
randomized SVD collapse to vector normalizations in the rank-1 case.  The
extracted ``u`` and ``v`` are rounded to their storage format *before* the
component is deflated, so the rounding error stays in the working matrix and
is picked up by later components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .calibration import CalibrationStats
from .linalg import SizeError, as_matrix

PRECISIONS = ("full", "e4m3")
PRNG_NAME = "numpy.PCG64"
MAX_REDRAWS = 8

E4M3_MAX = 448.0
E4M3_NAN = 0x7F
_E4M3_MIN_EXP = -6  # exponent of the smallest normal, 2**-6


# -- e4m3 -------------------------------------------------------------------

def e4m3_round(x):
    """Round to the nearest e4m3 value (ties to even), saturating at +-448.

    1 sign, 4 exponent (bias 7) and 3 mantissa bits, subnormals down to
    2**-9, no infinities.  NaN stays NaN.
    """
    a = np.asarray(x, dtype=np.float64)
    mag = np.abs(a)
    _, e = np.frexp(mag)  # mag = f * 2**e with f in [0.5, 1)
    exp = np.maximum(e - 1, _E4M3_MIN_EXP)
    quantum = np.ldexp(1.0, exp - 3)
    r = np.rint(mag / quantum) * quantum
    r = np.minimum(r, E4M3_MAX)
    out = np.copysign(r, a)
    out = np.where(np.isnan(a), np.nan, out)
    if np.ndim(x) == 0:
        return float(out)
    return out


def _decode_table() -> np.ndarray:
    codes = np.arange(256)
    sign = np.where(codes & 0x80, -1.0, 1.0)
    exp = (codes >> 3) & 0xF
    man = codes & 0x7
    val = np.where(
        exp == 0,
        man / 8.0 * 2.0**_E4M3_MIN_EXP,
        (1.0 + man / 8.0) * np.ldexp(1.0, exp - 7),
    )
    val = sign * val
    val[(codes & 0x7F) == 0x7F] = np.nan
    return val


E4M3_TABLE = _decode_table()


def e4m3_decode(codes) -> np.ndarray:
    return E4M3_TABLE[np.asarray(codes, dtype=np.uint8)]


def e4m3_encode(x) -> np.ndarray:
    """Bit patterns (uint8) of ``e4m3_round(x)``."""
    v = np.atleast_1d(e4m3_round(np.asarray(x, dtype=np.float64)))
    nan = np.isnan(v)
    mag = np.where(nan, 0.0, np.abs(v))
    sign = np.signbit(v).astype(np.uint8) << 7
    _, e = np.frexp(mag)
    exp = e - 1
    normal = mag >= 2.0**_E4M3_MIN_EXP
    biased = np.where(normal, exp + 7, 0)
    man = np.where(
        normal,
        np.rint((mag / np.ldexp(1.0, exp) - 1.0) * 8),
        np.rint(mag / 2.0 ** (_E4M3_MIN_EXP - 3)),
    )
    out = sign | (biased.astype(np.uint8) << 3) | man.astype(np.uint8)
    out = np.where(nan, E4M3_NAN, out).astype(np.uint8)
    return out.reshape(np.shape(x))


def round_to_storage(x, precision: str):
    if precision == "full":
        return np.asarray(x, dtype=np.float64)
    if precision == "e4m3":
        return e4m3_round(x)
    raise ValueError(f"unknown storage precision {precision!r}; expected one of {PRECISIONS}")


def sigma_storage(sigma: float, precision: str) -> float:
    """Singular values are kept in float32 when the factors are compressed."""
    return float(np.float32(sigma)) if precision == "e4m3" else float(sigma)


# -- R1SVD ------------------------------------------------------------------

def _norm(v: np.ndarray) -> float:
    # compensated sum of squares; sigma is a ratio of two such norms
    return math.sqrt(math.fsum((v * v).tolist()))


@dataclass
class LowRankFactors:
    """``W_r = U diag(S) V'`` with ``V' = V diag(scale)^{-1}``.

    ``U`` is (m, r) with unit columns, ``V`` is (r, n) with unit rows, both
    as stored (e4m3-exact when ``precision == "e4m3"``).  ``scale`` is the
    activation scale the decomposition ran under; ``None`` means unscaled.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    precision: str = "full"
    scale: Optional[np.ndarray] = None

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[1]

    @property
    def V_prime(self) -> np.ndarray:
        if self.scale is None:
            return self.V
        return self.V / self.scale

    def dense(self) -> np.ndarray:
        return (self.U * self.S) @ self.V_prime

    def apply(self, X) -> np.ndarray:
        """``W_r X`` computed as ``U (S (V' X))``."""
        y = self.V_prime @ X
        return self.U @ (self.S[:, None] * y)

    @classmethod
    def empty(cls, m: int, n: int, precision: str = "full", scale=None) -> "LowRankFactors":
        return cls(np.zeros((m, 0)), np.zeros(0), np.zeros((0, n)), precision, scale)


def draw_sketch(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


def r1svd_step(A, it: int = 8, seed: int = 0):
    """Extract one dominant singular triplet ``(u, sigma, v)`` of ``A``.

    ``u`` is the normalized ``(A A^T)^it A s`` for a Gaussian sketch ``s``;
    then ``b = A^T u``, ``sigma = |b|`` and ``v = b / sigma``.  Intermediate
    vectors are renormalized between power iterations, which leaves the
    direction unchanged and avoids overflow for large ``it``.
    """
    a = np.asarray(A, dtype=np.float64)
    if it < 0:
        raise ValueError("it must be non-negative")
    m, n = a.shape
    if not np.any(a):
        u = np.zeros(m)
        v = np.zeros(n)
        u[0] = v[0] = 1.0
        return u, 0.0, v
    for redraw in range(MAX_REDRAWS + 1):
        y = a @ draw_sketch(n, seed + redraw)
        for _ in range(it):
            ny = _norm(y)
            if ny == 0.0:
                break
            y = a @ (a.T @ (y / ny))
        ny = _norm(y)
        if ny > 0.0:
            break
    else:
        raise ArithmeticError(f"sketch fell in the null space after {MAX_REDRAWS} redraws")
    u = y / ny
    b = a.T @ u
    sigma = _norm(b)
    if sigma == 0.0:
        v = np.zeros(n)
        v[0] = 1.0
        return u, 0.0, v
    return u, sigma, b / sigma


def r1svd_decompose(A, rank: int = 16, it: int = 8, precision: str = "full", seed: int = 0):
    """Rank-``rank`` factorization by repeated :func:`r1svd_step` and deflation.

    Step ``k`` draws its sketch from ``seed + k``.  Returns
    ``(LowRankFactors, residual)`` where the residual is the deflated working
    matrix, i.e. ``A - U diag(S) V`` with the stored factors.
    """
    if precision not in PRECISIONS:
        raise ValueError(f"unknown storage precision {precision!r}; expected one of {PRECISIONS}")
    work = np.array(A, dtype=np.float64, copy=True)
    m, n = work.shape
    if not 0 <= rank <= min(m, n):
        raise SizeError(f"rank must lie in [0, {min(m, n)}], got {rank}")
    us = np.zeros((m, rank))
    vs = np.zeros((rank, n))
    ss = np.zeros(rank)
    for k in range(rank):
        u, sigma, v = r1svd_step(work, it, seed + k)
        u = round_to_storage(u, precision)
        v = round_to_storage(v, precision)
        sigma = sigma_storage(sigma, precision)
        work -= sigma * np.outer(u, v)
        us[:, k] = u
        vs[k] = v
        ss[k] = sigma
    return LowRankFactors(us, ss, vs, precision), work


def scaled_decompose(
    W,
    stats: CalibrationStats | np.ndarray,
    rank: int = 16,
    it: int = 8,
    precision: str = "e4m3",
    seed: int = 0,
):
    """Decompose ``W diag(s)`` and return ``(factors, W - U diag(S) V')``.

    ``s`` scales the input-channel (column) dimension.  The returned factors
    keep ``V`` as stored and carry ``s``; ``factors.V_prime`` folds the
    inverse scale back in.  The residual is recomputed from the stored
    factors so it is the exact complement of what will be serialized.
    """
    w = as_matrix(W, "W")
    s = stats.scale if isinstance(stats, CalibrationStats) else stats
    if s is None:
        raise ValueError("calibration stats carry no scale; call derive_scale first")
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (w.shape[1],):
        raise SizeError(f"scale of length {s.shape} does not match {w.shape[1]} input channels")
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ValueError("scale must be finite and strictly positive")
    factors, _ = r1svd_decompose(w * s, rank, it, precision, seed)
    factors.scale = s
    if factors.rank == 0:
        return factors, w.copy()
    return factors, w - factors.dense()
