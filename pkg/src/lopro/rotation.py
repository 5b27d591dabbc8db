"""Importance permutation and partial block Walsh-Hadamard rotation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import SizeError, apply_block_rotation, is_power_of_two


class GeometryError(ValueError):
    """Invalid rotation-plan geometry."""


def validate_permutation(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.shape[0] != n:
        raise GeometryError(f"permutation must have length {n}, got shape {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise GeometryError("permutation indices must be integers")
    seen = np.zeros(n, dtype=bool)
    if n and (idx.min() < 0 or idx.max() >= n):
        raise GeometryError("permutation index out of range")
    seen[idx] = True
    if not seen.all():
        raise GeometryError("permutation is not a bijection")
    return idx.astype(np.int64)


@dataclass(frozen=True)
class RotationPlan:
    """Column permutation ``P`` and block rotation ``Q = diag(I_{b_I}, H, ..., H)``."""

    n: int
    indices: np.ndarray = field(repr=False)
    b_i: int
    b_h: int

    def __post_init__(self):
        object.__setattr__(self, "indices", validate_permutation(self.indices, self.n))
        check_geometry(self.n, self.b_i, self.b_h)

    @property
    def n_blocks(self) -> int:
        return (self.n - self.b_i) // self.b_h

    @classmethod
    def identity(cls, n: int) -> "RotationPlan":
        return cls(n, np.arange(n), n, 1)

    def __eq__(self, other):
        if not isinstance(other, RotationPlan):
            return NotImplemented
        return (
            (self.n, self.b_i, self.b_h) == (other.n, other.b_i, other.b_h)
            and np.array_equal(self.indices, other.indices)
        )

    __hash__ = None


def _suggest_b_i(n: int, b_i: int, b_h: int) -> list[int]:
    # valid b_I satisfy b_I = n (mod b_H); report the neighbours on either side
    rem = (n - b_i) % b_h
    out = []
    if b_i - (b_h - rem) >= 0:
        out.append(b_i - (b_h - rem))
    if b_i + rem <= n:
        out.append(b_i + rem)
    return sorted(set(out))


def check_geometry(n: int, b_i: int, b_h: int) -> None:
    if n < 1:
        raise GeometryError(f"n must be positive, got {n}")
    if not is_power_of_two(b_h):
        raise GeometryError(f"b_H must be a power of two, got {b_h}")
    if b_i < 0 or b_i > n:
        raise GeometryError(f"b_I must lie in [0, {n}], got {b_i}")
    if (n - b_i) % b_h:
        raise GeometryError(
            f"(n - b_I) = {n - b_i} is not divisible by b_H = {b_h}; "
            f"nearest valid b_I: {_suggest_b_i(n, b_i, b_h)}"
        )


def make_plan(n: int, indices=None, b_i: int = 256, b_h: int = 256) -> RotationPlan:
    """Validated :class:`RotationPlan`; ``indices=None`` means no permutation."""
    if indices is None:
        indices = np.arange(n)
    return RotationPlan(n, indices, b_i, b_h)


def column_amean(R) -> np.ndarray:
    """Mean absolute value of each column."""
    return np.mean(np.abs(np.asarray(R, dtype=np.float64)), axis=0)


def build_permutation(hessian_diag, residual, eps: float = 1e-12) -> np.ndarray:
    """Order columns by ``diag(H) / amean(R)``, largest first.

    Columns that are both heavily exercised by the inputs and already small
    after the low-rank fit land in front, where the identity block leaves
    them unrotated.  Ties keep their original order.
    """
    d = np.asarray(hessian_diag, dtype=np.float64)
    r = np.asarray(residual, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != d.shape[0]:
        raise SizeError(f"residual shape {r.shape} does not match {d.shape[0]} Hessian entries")
    if np.any(d < 0):
        raise ValueError("Hessian diagonal must be non-negative")
    metric = d / np.maximum(column_amean(r), eps)
    return np.argsort(-metric, kind="stable")


def rotate_hessian(H, plan: RotationPlan, sym_tol: float = 1e-10) -> np.ndarray:
    """``Q^T P^T H P Q`` via gathers and blocked FWHTs on both sides."""
    h = np.asarray(H, dtype=np.float64)
    if h.shape != (plan.n, plan.n):
        raise SizeError(f"Hessian shape {h.shape} does not match plan size {plan.n}")
    scale = max(np.abs(h).max(), np.finfo(float).tiny)
    if np.abs(h - h.T).max() > sym_tol * scale:
        raise ValueError("Hessian is not symmetric")
    half = apply_block_rotation(h, plan)
    out = apply_block_rotation(half.T, plan).T
    return 0.5 * (out + out.T)
