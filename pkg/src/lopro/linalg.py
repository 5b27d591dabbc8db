"""Dense matrix primitives: the normalized fast Walsh-Hadamard transform,
block rotations driven by a :class:`~lopro.rotation.RotationPlan`, a
matrix-free Gram power operator and a small one-sided Jacobi SVD used as a
test oracle.

All routines work in float64.
"""

from __future__ import annotations

import math

import numpy as np

SVD_ORACLE_MAX_DIM = 256

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class SizeError(ValueError):
    """Raised when an array length or shape violates an operator's contract."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate external input as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise SizeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise SizeError(f"{name} must have positive dimensions, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def is_power_of_two(k: int) -> bool:
    return k >= 1 and (k & (k - 1)) == 0


def fwht(x, axis: int = -1) -> np.ndarray:
    """Normalized Walsh-Hadamard transform along ``axis``.

    Computes ``H_{2^k} x`` with ``H_2 = [[1, 1], [1, -1]] / sqrt(2)`` and
    ``H_{2^k} = H_2 (x) H_{2^{k-1}}`` (Sylvester ordering).  Each butterfly
    stage carries its own 1/sqrt(2) factor so no final rescale is needed.
    The transform is its own inverse.
    """
    a = np.array(x, dtype=np.float64, copy=True)
    if a.ndim == 0:
        raise SizeError("fwht needs at least a 1-D input")
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    if not is_power_of_two(n):
        raise SizeError(f"fwht length must be a power of two, got {n}")
    lead = a.shape[:-1]
    h = 1
    while h < n:
        v = a.reshape(*lead, n // (2 * h), 2, h)
        top = v[..., 0, :].copy()
        bot = v[..., 1, :]
        v[..., 0, :] = (top + bot) * _INV_SQRT2
        v[..., 1, :] = (top - bot) * _INV_SQRT2
        h *= 2
    return np.moveaxis(a, -1, axis)


def fwht_normalized(v) -> np.ndarray:
    """1-D convenience wrapper around :func:`fwht`."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise SizeError(f"expected a vector, got shape {v.shape}")
    return fwht(v)


def hadamard_matrix(n: int) -> np.ndarray:
    """Dense normalized Sylvester-Hadamard matrix (for tests and small sizes)."""
    if not is_power_of_two(n):
        raise SizeError(f"Hadamard size must be a power of two, got {n}")
    h = np.ones((1, 1))
    h2 = np.array([[1.0, 1.0], [1.0, -1.0]]) * _INV_SQRT2
    while h.shape[0] < n:
        h = np.kron(h2, h)
    return h


def _hadamard_blocks(m: np.ndarray, start: int, b_h: int) -> np.ndarray:
    """Transform columns ``start:`` of ``m`` in place, block by block."""
    rows, cols = m.shape
    if cols == start:
        return m
    tail = m[:, start:].reshape(rows, (cols - start) // b_h, b_h)
    m[:, start:] = fwht(tail, axis=-1).reshape(rows, cols - start)
    return m


def apply_block_rotation(M, plan, inverse: bool = False) -> np.ndarray:
    """Right-multiply ``M`` by ``P Q`` (or ``Q^T P^T`` when ``inverse``).

    ``P`` gathers columns so that ``(M P)[:, j] = M[:, plan.indices[j]]``.
    ``Q`` is block diagonal: identity on the first ``plan.b_i`` columns,
    then normalized Hadamard blocks of size ``plan.b_h``.  Neither matrix is
    materialized.
    """
    m = np.asarray(M, dtype=np.float64)
    if m.ndim != 2:
        raise SizeError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[1] != plan.n:
        raise SizeError(f"matrix has {m.shape[1]} columns, plan expects {plan.n}")
    if (plan.n - plan.b_i) % plan.b_h:
        raise SizeError("plan geometry: (n - b_I) is not divisible by b_H")
    idx = np.asarray(plan.indices)
    if not inverse:
        out = m[:, idx]
        return _hadamard_blocks(out, plan.b_i, plan.b_h)
    rotated = _hadamard_blocks(m.copy(), plan.b_i, plan.b_h)
    out = np.empty_like(rotated)
    out[:, idx] = rotated
    return out


def gram_apply(A, v, power: int) -> np.ndarray:
    """Return ``(A A^T)^power A v`` using ``2 * power + 1`` matrix-vector products."""
    a = np.asarray(A, dtype=np.float64)
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != a.shape[1]:
        raise SizeError(f"vector of length {x.shape} does not match {a.shape[1]} columns")
    if power < 0:
        raise ValueError("power must be non-negative")
    y = a @ x
    for _ in range(power):
        y = a @ (a.T @ y)
    return y


def _round_robin(n: int):
    """Yield n-1 (or n) rounds of disjoint column pairs covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            yield np.array(pairs, dtype=np.intp).T
        players = [players[0]] + [players[-1]] + players[1:-1]


def exact_svd_small(A, tol: float = 1e-15, max_sweeps: int = 60):
    """Thin SVD ``A = U diag(S) V^T`` by one-sided (Hestenes) Jacobi rotations.

    Returns ``U`` (m, k), ``S`` (k,) descending and ``V`` (n, k) with
    ``k = min(m, n)``.  Columns are orthogonalized in round-robin order, so
    each round rotates n/2 disjoint pairs at once.  Intended as a trustworthy
    oracle for desk-scale matrices only; ``min(m, n) > 256`` is refused.
    """
    a = as_matrix(A, "A")
    m, n = a.shape
    if min(m, n) > SVD_ORACLE_MAX_DIM:
        raise SizeError(
            f"exact_svd_small is limited to min(rows, cols) <= {SVD_ORACLE_MAX_DIM}, got {a.shape}"
        )
    if m < n:
        v, s, u = exact_svd_small(a.T, tol=tol, max_sweeps=max_sweeps)
        return u, s, v

    g = a.copy()
    vm = np.eye(n)
    rounds = list(_round_robin(n))
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            gp, gq = g[:, p], g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, p], g[:, q]
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = vm[:, p], vm[:, q]
            vm[:, p] = c * vp - s * vq
            vm[:, q] = s * vp + c * vq
        if not rotated:
            break

    sv = np.linalg.norm(g, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    g = g[:, order]
    vm = vm[:, order]

    u = np.zeros((m, n))
    top = sv[0] if sv.size else 0.0
    live = sv > top * 1e-12 * max(m, n)
    u[:, live] = g[:, live] / sv[live]
    if not np.all(live):
        u = _complete_basis(u, live)
    return u, sv, vm


def _complete_basis(u: np.ndarray, live: np.ndarray) -> np.ndarray:
    """Fill columns of ``u`` where ``live`` is False with an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(live)]
    filled = u.copy()
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(~live):
        while True:
            c = next(candidates).copy()
            for b in basis:
                c -= (b @ c) * b
            for b in basis:
                c -= (b @ c) * b
            nrm = np.linalg.norm(c)
            if nrm > 1e-8:
                break
        c /= nrm
        basis.append(c)
        filled[:, j] = c
    return filled
