"""Quick oracle checks runnable without pytest (``lopro selftest``)."""

from __future__ import annotations

import numpy as np

from .calibration import accumulate_stats, synthesize_calibration
from .linalg import apply_block_rotation, exact_svd_small, fwht, gram_apply, hadamard_matrix
from .lowrank import E4M3_TABLE, e4m3_round, r1svd_decompose
from .packager import layers_identical, pack_layer, unpack_layer
from .pipeline import PipelineConfig, quantize_layer_pipeline
from .quantizers import proxy_loss
from .rotation import make_plan, rotate_hessian
from .synthetic import synthetic_layer


def _fwht(rng):
    err = max(
        np.abs(fwht(v) - hadamard_matrix(v.size) @ v).max()
        for v in (rng.standard_normal(2**k) for k in range(1, 11))
    )
    return err <= 1e-10, f"max error vs dense Hadamard {err:.2e}"


def _svd(rng):
    a = rng.standard_normal((12, 7))
    u, s, v = exact_svd_small(a)
    ref = np.sqrt(np.clip(np.sort(np.linalg.eigvalsh(a.T @ a))[::-1], 0, None))
    err = np.abs(s - ref).max()
    rec = np.linalg.norm(u * s @ v.T - a) / np.linalg.norm(a)
    return err <= 1e-8 and rec <= 1e-9, f"singular values {err:.2e}, reconstruction {rec:.2e}"


def _gram(rng):
    a = rng.standard_normal((6, 4))
    x = rng.standard_normal(4)
    ref = np.linalg.matrix_power(a @ a.T, 2) @ a @ x
    err = np.abs(gram_apply(a, x, 2) - ref).max() / np.abs(ref).max()
    return err <= 1e-10, f"relative error {err:.2e}"


def _e4m3(rng):
    finite = np.unique(E4M3_TABLE[np.isfinite(E4M3_TABLE)])
    xs = rng.uniform(-500, 500, 2000) * 10.0 ** rng.uniform(-4, 0, 2000)
    bad = 0
    for x in xs:
        d = np.abs(finite - min(max(x, -448.0), 448.0))
        best = finite[d == d.min()]
        if e4m3_round(x) not in best:
            bad += 1
    return bad == 0, f"{bad} mismatches against enumeration"


def _r1svd(rng):
    a = rng.standard_normal((32, 32))
    _, res = r1svd_decompose(a, 8, 8, "full", 0)
    _, s, _ = exact_svd_small(a)
    ratio = np.linalg.norm(res) / np.sqrt((s[8:] ** 2).sum())
    return ratio <= 1.1, f"residual / optimum = {ratio:.4f}"


def _eq1(rng):
    w, wh = rng.standard_normal((8, 16)), rng.standard_normal((8, 16))
    x = rng.standard_normal((64, 16))
    h = accumulate_stats([x]).hessian
    direct = np.linalg.norm((w - wh) @ x.T) ** 2 / 64
    rel = abs(proxy_loss(w, wh, h) - direct) / direct
    return rel <= 1e-8, f"trace vs direct {rel:.2e}"


def _eq9(rng):
    n = 32
    plan = make_plan(n, rng.permutation(n), 8, 8)
    x = synthesize_calibration(n, 256, 2, 5.0, 3)
    h = x.T @ x / 256
    r, rh = rng.standard_normal((8, n)), rng.standard_normal((8, n))
    lr = proxy_loss(r, rh, rotate_hessian(h, plan))
    lo = proxy_loss(apply_block_rotation(r, plan, True), apply_block_rotation(rh, plan, True), h)
    rel = abs(lr - lo) / lo
    return rel <= 1e-9, f"rotated vs original frame {rel:.2e}"


def _roundtrip(rng):
    w, st = synthetic_layer(32, 64, 5)
    layer = quantize_layer_pipeline(w, st, PipelineConfig(rank=4, b_i=16, b_h=16, group_size=16))
    blob = pack_layer(layer)
    back = unpack_layer(blob)
    ok = layers_identical(layer, back) and pack_layer(back) == blob
    return ok, f"{len(blob)} bytes"


CHECKS = {
    "fwht": _fwht,
    "jacobi-svd": _svd,
    "gram-apply": _gram,
    "e4m3": _e4m3,
    "r1svd": _r1svd,
    "proxy-loss identity": _eq1,
    "rotated-frame identity": _eq9,
    "container round-trip": _roundtrip,
}


def run(verbose: bool = True) -> bool:
    rng = np.random.default_rng(2024)
    ok_all = True
    for name, check in CHECKS.items():
        ok, detail = check(rng)
        ok_all &= bool(ok)
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok_all
