"""Shared test oracles.

Every oracle here is built independently of the library: dense Kronecker
products instead of butterflies, explicit permutation matrices instead of
gathers, LAPACK eigensolvers instead of Jacobi sweeps, and a bit-field
enumeration of the 8-bit float format.
"""

import math

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("lopro", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("lopro")


def dense_hadamard(n: int) -> np.ndarray:
    h2 = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2.0)
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.kron(h2, h)
    return h


def dense_permutation(indices) -> np.ndarray:
    """``P`` with ``(M @ P)[:, j] == M[:, indices[j]]``."""
    n = len(indices)
    p = np.zeros((n, n))
    p[np.asarray(indices), np.arange(n)] = 1.0
    return p


def dense_rotation(n: int, b_i: int, b_h: int) -> np.ndarray:
    q = np.zeros((n, n))
    q[:b_i, :b_i] = np.eye(b_i)
    h = dense_hadamard(b_h)
    for start in range(b_i, n, b_h):
        q[start:start + b_h, start:start + b_h] = h
    return q


def singular_values_oracle(a: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvalsh(a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T)
    return np.sqrt(np.clip(np.sort(ev)[::-1], 0.0, None))


def e4m3_values() -> np.ndarray:
    """All finite values of the 1-4-3 format (bias 7, no infinities, S.1111.111 is NaN)."""
    out = []
    for sign in (1.0, -1.0):
        for e in range(16):
            for mant in range(8):
                if e == 15 and mant == 7:
                    continue
                if e == 0:
                    out.append(sign * mant / 8.0 * 2.0 ** -6)
                else:
                    out.append(sign * (1.0 + mant / 8.0) * 2.0 ** (e - 7))
    return np.array(out)


def e4m3_nearest_even(x: float, finite: np.ndarray) -> float:
    """Nearest representable value; ties go to the even mantissa."""
    x = min(max(x, -448.0), 448.0)
    d = np.abs(finite - x)
    cands = np.unique(finite[d == d.min()])
    if cands.size == 1:
        return float(cands[0])
    for c in cands:
        if c == 0.0:
            return 0.0
        m, e = math.frexp(abs(c))
        e = max(e - 1, -6)
        mant = int(round(abs(c) / 2.0 ** e * 8)) % 8
        if mant % 2 == 0:
            return float(c)
    raise AssertionError("tie without an even neighbour")


def wishart(n: int, k: int, rng) -> np.ndarray:
    a = rng.standard_normal((n, k))
    return a @ a.T / k


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pipeline_layer(seed: int):
    """A small layer from a seed-chosen configuration covering every payload kind."""
    from lopro import PipelineConfig, quantize_layer_pipeline
    from lopro.synthetic import synthetic_layer

    r = np.random.default_rng(seed)
    m = int(r.choice([4, 8, 12]))
    n = int(r.choice([16, 32]))
    kind = str(r.choice(["rtn", "gptq", "vq"]))
    b_i = int(r.choice([0, 8, 16]))
    bits = int(r.choice([2, 3])) if kind == "vq" else int(r.choice([2, 3, 4, 8]))
    cfg = PipelineConfig(
        bits=bits,
        group_size=int(r.choice([4, 8, 16])),
        rank=int(r.integers(0, min(m, n) + 1)),
        it=int(r.integers(0, 4)),
        b_i=b_i,
        b_h=int(r.choice([b for b in (1, 4, 8, 16) if (n - b_i) % b == 0])),
        quantizer=kind,
        vq_dim=4 if bits == 2 else 2,
        lloyd_iters=int(r.integers(0, 3)),
        precision=str(r.choice(["full", "e4m3"])),
        symmetric=bool(r.integers(0, 2)),
        permute=bool(r.integers(0, 2)),
        seed=seed,
    )
    w, stats = synthetic_layer(m, n, seed, tokens=128)
    return quantize_layer_pipeline(w, stats, cfg, name=f"layer{seed}"), cfg


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
