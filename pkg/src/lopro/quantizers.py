"""Residual quantizers and the proxy-Hessian loss.

Scalar quantizers work on per-row groups of ``group_size`` consecutive
columns.  Group scales are rounded to float16 at quantization time, which is
how they are stored, so dequantization from a loaded container reproduces
the in-memory result bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import SizeError

SCALAR_BITS = (2, 3, 4, 8)
MAX_CODEBOOK_ENTRIES = 1 << 16
_F16_TINY = float(np.finfo(np.float16).smallest_subnormal)
_F16_MAX = float(np.finfo(np.float16).max)


class QuantizationError(RuntimeError):
    pass


def proxy_loss(W, W_hat, H) -> float:
    """``tr((W_hat - W) H (W_hat - W)^T)``."""
    w = np.asarray(W, dtype=np.float64)
    wh = np.asarray(W_hat, dtype=np.float64)
    h = np.asarray(H, dtype=np.float64)
    if w.shape != wh.shape:
        raise SizeError(f"shape mismatch: {w.shape} vs {wh.shape}")
    if h.shape != (w.shape[1], w.shape[1]):
        raise SizeError(f"Hessian shape {h.shape} does not match {w.shape[1]} columns")
    e = wh - w
    return float(np.einsum("ij,ij->", e @ h, e))


# -- scalar grid --------------------------------------------------------------

@dataclass
class QuantGrid:
    """Uniform per-group grid.

    Symmetric mode uses levels ``-qmax..qmax`` with ``qmax = 2**(bits-1) - 1``
    and stores ``code = level + qmax``.  Asymmetric mode stores
    ``code = clamp(round(x / scale) + zero, 0, 2**bits - 1)``.
    """

    bits: int = 2
    group_size: int = 128
    symmetric: bool = True
    scales: Optional[np.ndarray] = field(default=None, repr=False)
    zeros: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.bits not in SCALAR_BITS:
            raise ValueError(f"bits must be one of {SCALAR_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise ValueError("group_size must be positive")

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def maxcode(self) -> int:
        return (1 << self.bits) - 1

    def check(self, cols: int) -> int:
        if cols % self.group_size:
            raise SizeError(f"group size {self.group_size} does not divide {cols} columns")
        return cols // self.group_size

    def with_params(self, scales, zeros=None) -> "QuantGrid":
        return QuantGrid(self.bits, self.group_size, self.symmetric, scales, zeros)

    def fit(self, block: np.ndarray):
        """Scale (and zero) for each row of ``block`` (rows x group_size)."""
        if self.symmetric:
            amax = np.abs(block).max(axis=1)
            raw = amax / self.qmax
            scale = _to_f16(raw)
            scale = np.where(amax == 0, 1.0, scale)
            return scale, None
        lo = np.minimum(block.min(axis=1), 0.0)
        hi = np.maximum(block.max(axis=1), 0.0)
        span = hi - lo
        scale = _to_f16(span / self.maxcode)
        scale = np.where(span == 0, 1.0, scale)
        zero = np.clip(np.rint(-lo / scale), 0, self.maxcode)
        return scale, zero

    def quantize(self, x: np.ndarray, scale: np.ndarray, zero=None) -> np.ndarray:
        """Codes for a column or block ``x`` given per-row ``scale``."""
        if x.ndim == 2:
            scale = scale[:, None]
            zero = None if zero is None else zero[:, None]
        if self.symmetric:
            q = np.clip(np.rint(x / scale), -self.qmax, self.qmax)
            return (q + self.qmax).astype(np.uint8)
        q = np.clip(np.rint(x / scale) + zero, 0, self.maxcode)
        return q.astype(np.uint8)

    def dequantize_codes(self, codes: np.ndarray, scale: np.ndarray, zero=None) -> np.ndarray:
        if codes.ndim == 2 and scale.ndim == 1:
            scale = scale[:, None]
            zero = None if zero is None else zero[:, None]
        c = codes.astype(np.float64)
        if self.symmetric:
            return (c - self.qmax) * scale
        return (c - zero) * scale

    def dequantize(self, codes: np.ndarray) -> np.ndarray:
        """Full-matrix dequantization using the grid's stored scales."""
        if self.scales is None:
            raise ValueError("grid carries no scales")
        rows, cols = codes.shape
        self.check(cols)
        g = self.group_size
        scale = np.repeat(self.scales.astype(np.float64), g, axis=1)
        c = codes.astype(np.float64)
        if self.symmetric:
            return (c - self.qmax) * scale
        zero = np.repeat(self.zeros.astype(np.float64), g, axis=1)
        return (c - zero) * scale


def _to_f16(x: np.ndarray) -> np.ndarray:
    """Round positive scales to float16, never to zero or infinity."""
    if np.any(x > _F16_MAX):
        raise QuantizationError("group scale overflows float16; rescale the weights")
    r = np.asarray(x, dtype=np.float16).astype(np.float64)
    return np.where((r == 0) & (x > 0), _F16_TINY, r)


def rtn_quantize(M, grid: QuantGrid):
    """Round-to-nearest per group.  Returns ``(codes, grid_with_scales, dequantized)``."""
    m = np.asarray(M, dtype=np.float64)
    rows, cols = m.shape
    ngroups = grid.check(cols)
    g = grid.group_size
    scales = np.empty((rows, ngroups))
    zeros = None if grid.symmetric else np.empty((rows, ngroups))
    codes = np.empty((rows, cols), dtype=np.uint8)
    for k in range(ngroups):
        block = m[:, k * g:(k + 1) * g]
        scale, zero = grid.fit(block)
        scales[:, k] = scale
        if zeros is not None:
            zeros[:, k] = zero
        codes[:, k * g:(k + 1) * g] = grid.quantize(block, scale, zero)
    out = grid.with_params(
        scales.astype(np.float16), None if zeros is None else zeros.astype(np.uint8)
    )
    return codes, out, out.dequantize(codes)


# -- GPTQ ---------------------------------------------------------------------

def damped_inverse_cholesky(H, damp: float = 0.01, retries: int = 3) -> np.ndarray:
    """Upper Cholesky factor of ``(H + damp * mean(diag H) * I)^{-1}``.

    Zero diagonal entries (dead inputs) are set to one first.  On failure the
    damping grows tenfold, up to ``retries`` times.
    """
    h = np.array(H, dtype=np.float64, copy=True)
    n = h.shape[0]
    dead = np.diag(h) == 0
    h[dead, dead] = 1.0
    mean_diag = float(np.mean(np.diag(h)))
    d = damp
    for attempt in range(retries + 1):
        hd = h + d * mean_diag * np.eye(n)
        try:
            lower = np.linalg.cholesky(hd)
            inv = np.linalg.inv(lower)
            hinv = inv.T @ inv
            return np.linalg.cholesky(hinv).T
        except np.linalg.LinAlgError:
            d = d * 10 if d > 0 else 0.01
    raise QuantizationError(f"Hessian is not positive definite after {retries} damping retries")


def gptq_quantize(R_rot, H_rot, grid: QuantGrid, damp: float = 0.01):
    """Column-sequential error-compensating quantization under ``tr(E H E^T)``.

    Columns are taken in their given order; after each column is rounded its
    error is pushed onto the remaining columns through the upper Cholesky
    factor of the damped inverse Hessian.  Group scales are fitted on the
    already-updated columns when a group starts.  With a diagonal Hessian
    nothing is propagated and the result equals :func:`rtn_quantize`.
    """
    w = np.array(R_rot, dtype=np.float64, copy=True)
    rows, cols = w.shape
    h = np.asarray(H_rot, dtype=np.float64)
    if h.shape != (cols, cols):
        raise SizeError(f"Hessian shape {h.shape} does not match {cols} columns")
    ngroups = grid.check(cols)
    g = grid.group_size
    u = damped_inverse_cholesky(h, damp)

    codes = np.empty((rows, cols), dtype=np.uint8)
    scales = np.empty((rows, ngroups))
    zeros = None if grid.symmetric else np.empty((rows, ngroups))
    scale = zero = None
    for j in range(cols):
        if j % g == 0:
            k = j // g
            scale, zero = grid.fit(w[:, j:j + g])
            scales[:, k] = scale
            if zeros is not None:
                zeros[:, k] = zero
        col = w[:, j]
        c = grid.quantize(col, scale, zero)
        codes[:, j] = c
        q = grid.dequantize_codes(c, scale, zero)
        err = (col - q) / u[j, j]
        tail = u[j, j + 1:]
        if j + 1 < cols and np.any(tail):
            w[:, j + 1:] -= np.outer(err, tail)
    out = grid.with_params(
        scales.astype(np.float16), None if zeros is None else zeros.astype(np.uint8)
    )
    return codes, out, out.dequantize(codes)


# -- vector quantization ------------------------------------------------------

@dataclass
class Codebook:
    """``2**(bits*dim)`` vectors of length ``dim``, float32-exact."""

    bits: int
    dim: int
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.entries.shape != (1 << (self.bits * self.dim), self.dim):
            raise ValueError(
                f"codebook must hold {1 << (self.bits * self.dim)} x {self.dim} entries, "
                f"got {self.entries.shape}"
            )
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")

    def lookup(self, indices: np.ndarray) -> np.ndarray:
        """Dequantize (rows, cols/dim) indices to a (rows, cols) matrix."""
        rows, nb = indices.shape
        return self.entries[indices].reshape(rows, nb * self.dim)


def _block_vectors(m: np.ndarray, dim: int) -> np.ndarray:
    rows, cols = m.shape
    return m.reshape(rows, cols // dim, dim).reshape(-1, dim)


def _nearest(vectors: np.ndarray, entries: np.ndarray, weights=None) -> np.ndarray:
    diff = vectors[:, None, :] - entries[None, :, :]
    d2 = diff * diff
    if weights is not None:
        d2 = d2 * weights
    return np.argmin(d2.sum(axis=-1), axis=1)


def init_codebook(R, bits: int, dim: int, seed: int = 0, lloyd_iters: int = 0) -> Codebook:
    """Sample codebook entries from the ``dim``-blocks of ``R``, then optionally
    refine them with unweighted Lloyd iterations."""
    count = 1 << (bits * dim)
    if count > MAX_CODEBOOK_ENTRIES:
        raise ValueError(f"codebook would need {count} entries (> {MAX_CODEBOOK_ENTRIES})")
    data = _block_vectors(np.asarray(R, dtype=np.float64), dim)
    rng = np.random.default_rng(seed)
    pick = rng.choice(data.shape[0], size=count, replace=count > data.shape[0])
    entries = data[pick].copy()
    for _ in range(lloyd_iters):
        assign = _nearest(data, entries)
        sums = np.zeros_like(entries)
        np.add.at(sums, assign, data)
        counts = np.bincount(assign, minlength=count)
        live = counts > 0
        entries[live] = sums[live] / counts[live, None]
    entries = entries.astype(np.float32).astype(np.float64)
    return Codebook(bits, dim, entries)


def vq_quantize(R_rot, H_rot, bits: int = 2, dim: int = 4, lloyd_iters: int = 0,
                seed: int = 0, damp: float = 0.01, codebook: Optional[Codebook] = None):
    """Codebook quantization of ``dim``-wide column blocks with block-wise
    error compensation.

    Each block vector picks the entry minimizing the distance weighted by
    the Hessian diagonal of its columns; the block error is then propagated
    onto later columns exactly as in GPTQ, using the block of the inverse
    Cholesky factor.  Returns ``(indices, codebook, dequantized)``.
    """
    w = np.array(R_rot, dtype=np.float64, copy=True)
    rows, cols = w.shape
    if dim < 1 or cols % dim:
        raise SizeError(f"vector dim {dim} does not divide {cols} columns")
    h = np.asarray(H_rot, dtype=np.float64)
    if h.shape != (cols, cols):
        raise SizeError(f"Hessian shape {h.shape} does not match {cols} columns")
    if codebook is None:
        codebook = init_codebook(w, bits, dim, seed, lloyd_iters)
    u = damped_inverse_cholesky(h, damp)
    hdiag = np.diag(h).copy()
    hdiag[hdiag == 0] = 1.0

    nb = cols // dim
    index_dtype = np.uint8 if bits * dim <= 8 else np.uint16
    indices = np.empty((rows, nb), dtype=index_dtype)
    entries = codebook.entries
    for b in range(nb):
        sl = slice(b * dim, (b + 1) * dim)
        blk = w[:, sl]
        idx = _nearest(blk, entries, hdiag[sl])
        indices[:, b] = idx
        q = entries[idx]
        if (b + 1) * dim < cols:
            err = np.linalg.solve(u[sl, sl].T, (blk - q).T).T
            w[:, (b + 1) * dim:] -= err @ u[sl, (b + 1) * dim:]
    return indices, codebook, codebook.lookup(indices)
