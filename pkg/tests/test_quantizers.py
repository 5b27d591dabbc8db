import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import wishart
from lopro import Codebook, QuantGrid, gptq_quantize, proxy_loss, rtn_quantize, vq_quantize
from lopro.linalg import SizeError
from lopro.quantizers import QuantizationError, damped_inverse_cholesky, init_codebook


def rtn_oracle(m, bits, g):
    """Straight per-group symmetric rounding written out element by element."""
    qmax = 2 ** (bits - 1) - 1
    out = np.zeros_like(m)
    for i in range(m.shape[0]):
        for k in range(0, m.shape[1], g):
            grp = m[i, k:k + g]
            amax = np.abs(grp).max()
            s = 1.0 if amax == 0 else float(np.float16(amax / qmax))
            for j, x in enumerate(grp):
                out[i, k + j] = min(max(round(x / s), -qmax), qmax) * s
    return out


# -- proxy loss -----------------------------------------------------------------

def test_loss_zero_for_exact(rng):
    w = rng.standard_normal((3, 4))
    assert proxy_loss(w, w, wishart(4, 8, rng)) == 0.0


def test_loss_identity_hessian_is_frobenius(rng):
    w, wh = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert proxy_loss(w, wh, np.eye(4)) == pytest.approx(np.linalg.norm(w - wh) ** 2, rel=1e-13)


@given(st.integers(1, 32), st.integers(1, 8), st.integers(0, 2**31))
def test_loss_trace_vs_direct(n, m, seed):
    r = np.random.default_rng(seed)
    w, wh, x = r.standard_normal((m, n)), r.standard_normal((m, n)), r.standard_normal((64, n))
    direct = np.linalg.norm((w - wh) @ x.T) ** 2 / 64
    assert abs(proxy_loss(w, wh, x.T @ x / 64) - direct) <= 1e-8 * direct


def test_loss_rejects_shapes(rng):
    with pytest.raises(SizeError):
        proxy_loss(np.zeros((2, 3)), np.zeros((3, 2)), np.eye(3))
    with pytest.raises(SizeError):
        proxy_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.eye(2))


# -- grid / rtn -------------------------------------------------------------------

def test_rtn_zeros():
    codes, grid, deq = rtn_quantize(np.zeros((2, 8)), QuantGrid(2, 4))
    assert np.all(deq == 0)
    assert np.all(grid.dequantize(codes) == 0)
    assert np.all(grid.scales == 1)


def test_rtn_three_level_example():
    codes, grid, deq = rtn_quantize(np.array([[-3.0, 0.0, 3.0]]), QuantGrid(2, 3))
    assert grid.scales[0, 0] == 3.0
    np.testing.assert_array_equal(codes.astype(int) - grid.qmax, [[-1, 0, 1]])
    np.testing.assert_array_equal(deq, [[-3.0, 0.0, 3.0]])


@given(st.sampled_from([2, 3, 4, 8]), st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**31))
def test_rtn_matches_oracle(bits, g, seed):
    m = np.random.default_rng(seed).standard_normal((3, 8)) * 5
    _, _, deq = rtn_quantize(m, QuantGrid(bits, g))
    np.testing.assert_array_equal(deq, rtn_oracle(m, bits, g))


@given(st.sampled_from([2, 3, 4, 8]), st.sampled_from([1, 4, 16]), st.integers(0, 2**31))
def test_rtn_idempotent(bits, g, seed):
    m = np.random.default_rng(seed).standard_normal((4, 16)) * 3
    grid = QuantGrid(bits, g)
    c1, g1, d1 = rtn_quantize(m, grid)
    c2, g2, d2 = rtn_quantize(d1, grid)
    assert c2.tobytes() == c1.tobytes() and d2.tobytes() == d1.tobytes()
    assert c1.max() <= grid.maxcode


@given(st.sampled_from([2, 3, 4, 8]), st.integers(0, 2**31))
def test_dequantized_codes_are_fixed_points(bits, seed):
    # with the scales held fixed, re-rounding a dequantized matrix is exact in both modes
    m = np.random.default_rng(seed).standard_normal((4, 16)) * 3
    for sym in (True, False):
        codes, grid, deq = rtn_quantize(m, QuantGrid(bits, 4, sym))
        s = grid.scales.astype(float)
        z = None if sym else grid.zeros.astype(float)
        again = np.hstack([
            grid.quantize(deq[:, k:k + 4], s[:, k // 4], None if z is None else z[:, k // 4])
            for k in range(0, 16, 4)
        ])
        assert again.tobytes() == codes.tobytes()


@given(st.sampled_from([2, 3, 4, 8]), st.integers(0, 2**31))
def test_asymmetric_range_contains_data_and_zero(bits, seed):
    m = np.random.default_rng(seed).standard_normal((4, 16)) + 1.5
    codes, grid, deq = rtn_quantize(m, QuantGrid(bits, 8, False))
    assert grid.zeros.max() <= grid.maxcode
    # the error of every element is bounded by one grid step
    step = np.repeat(grid.scales.astype(float), 8, axis=1)
    assert np.all(np.abs(deq - m) <= step * (1 + 1e-3))


def test_grid_rejects_bad_config():
    with pytest.raises(ValueError):
        QuantGrid(5, 4)
    with pytest.raises(SizeError):
        rtn_quantize(np.zeros((2, 6)), QuantGrid(2, 4))


# -- gptq ---------------------------------------------------------------------------

@given(st.sampled_from([2, 3, 4]), st.booleans(), st.integers(0, 2**31))
def test_gptq_diagonal_is_rtn(bits, sym, seed):
    r = np.random.default_rng(seed)
    m = r.standard_normal((5, 16))
    grid = QuantGrid(bits, 4, sym)
    for h in (np.eye(16), np.diag(r.uniform(0.1, 10, 16))):
        c1, g1, d1 = gptq_quantize(m, h, grid)
        c2, g2, d2 = rtn_quantize(m, grid)
        assert c1.tobytes() == c2.tobytes() and d1.tobytes() == d2.tobytes()
        assert g1.scales.tobytes() == g2.scales.tobytes()


def test_gptq_representable_is_lossless(rng):
    levels = rng.integers(-1, 2, (6, 8)).astype(float)
    levels[:, ::4] = 1.0  # every group reaches the top level, so its scale is 1
    codes, grid, deq = gptq_quantize(levels * 1.0, wishart(8, 16, rng), QuantGrid(2, 4))
    np.testing.assert_array_equal(deq, levels)


def _gptq_win_rate(m, n, g, seeds, sym=True):
    wins = 0
    for seed in range(seeds):
        r = np.random.default_rng(seed)
        R = r.standard_normal((m, n))
        H = wishart(n, 2 * n, r)
        grid = QuantGrid(2, g, sym)
        lg = proxy_loss(R, gptq_quantize(R, H, grid)[2], H)
        lr = proxy_loss(R, rtn_quantize(R, grid)[2], H)
        wins += lg <= lr
    return wins


@pytest.mark.xfail(strict=True, reason="on 8x8 instances column-sequential compensation wins only ~90/100")
def test_gptq_beats_rtn_8x8():
    assert _gptq_win_rate(8, 8, 8, 100) >= 95


def test_gptq_beats_rtn_wider_layers():
    assert _gptq_win_rate(16, 32, 8, 100) >= 95


def test_damped_cholesky_retries():
    # an indefinite matrix only becomes factorizable with a large damping term
    h = np.array([[1.0, 0.0], [0.0, -0.5]])
    u = damped_inverse_cholesky(h, 0.01, retries=3)
    assert np.allclose(np.triu(u), u)
    with pytest.raises(QuantizationError):
        damped_inverse_cholesky(np.array([[1.0, 0.0], [0.0, -50.0]]), 0.01, retries=1)


def test_damped_cholesky_is_inverse_factor(rng):
    h = wishart(6, 12, rng)
    u = damped_inverse_cholesky(h, 0.0)
    np.testing.assert_allclose(u.T @ u, np.linalg.inv(h), rtol=1e-8)


def test_gptq_singular_hessian(rng):
    x = rng.standard_normal((3, 8))
    h = x.T @ x / 3
    h[5, :] = h[:, 5] = 0
    _, _, deq = gptq_quantize(rng.standard_normal((4, 8)), h, QuantGrid(3, 4))
    assert np.all(np.isfinite(deq))


# -- vq -----------------------------------------------------------------------------

def test_vq_exact_blocks_zero_loss(rng):
    entries = rng.standard_normal((16, 2)).astype(np.float32).astype(float)
    cb = Codebook(2, 2, entries)
    idx = rng.integers(0, 16, (5, 4))
    R = cb.lookup(idx)
    out_idx, _, deq = vq_quantize(R, wishart(8, 16, rng), 2, 2, codebook=cb)
    np.testing.assert_array_equal(deq, R)
    assert proxy_loss(R, deq, np.eye(8)) == 0.0


def test_vq_dim_one_is_nearest_level(rng):
    R = rng.standard_normal((4, 6))
    idx, cb, deq = vq_quantize(R, np.eye(6), 2, 1, seed=3)
    levels = cb.entries[:, 0]
    ref = levels[np.abs(R[..., None] - levels).argmin(-1)]
    np.testing.assert_array_equal(deq, ref)


def test_vq_codebook_sampled_from_data(rng):
    R = rng.standard_normal((8, 16))
    cb = init_codebook(R, 2, 2, seed=1)
    blocks = {tuple(v) for v in R.reshape(-1, 2).astype(np.float32).astype(float)}
    assert cb.entries.shape == (16, 2)
    assert all(tuple(e) in blocks for e in cb.entries)


def test_vq_deterministic(rng):
    R, H = rng.standard_normal((8, 16)), wishart(16, 32, rng)
    a = vq_quantize(R, H, 2, 4, 3, seed=5)
    b = vq_quantize(R, H, 2, 4, 3, seed=5)
    assert a[0].tobytes() == b[0].tobytes() and a[1].entries.tobytes() == b[1].entries.tobytes()


def test_vq_lloyd_helps():
    wins = 0
    for seed in range(50):
        r = np.random.default_rng(seed)
        R, H = r.standard_normal((16, 16)), wishart(16, 32, r)
        l0 = proxy_loss(R, vq_quantize(R, H, 2, 4, 0, seed)[2], H)
        l10 = proxy_loss(R, vq_quantize(R, H, 2, 4, 10, seed)[2], H)
        wins += l10 <= l0
    assert wins >= 45


def test_vq_guards():
    with pytest.raises(ValueError):
        init_codebook(np.zeros((4, 10)), 4, 5)
    with pytest.raises(SizeError):
        vq_quantize(np.zeros((2, 6)), np.eye(6), 2, 4)
    with pytest.raises(ValueError):
        Codebook(2, 2, np.zeros((15, 2)))
    with pytest.raises(ValueError):
        Codebook(1, 1, np.array([[0.0], [np.inf]]))


@given(st.sampled_from([(2, 4), (3, 2), (2, 2), (4, 1)]), st.integers(0, 2**31))
def test_vq_codebook_invariants(bd, seed):
    bits, dim = bd
    r = np.random.default_rng(seed)
    R = r.standard_normal((4, 8))
    idx, cb, deq = vq_quantize(R, wishart(8, 16, r), bits, dim, 2, seed)
    assert cb.entries.shape == (2 ** (bits * dim), dim)
    assert np.all(np.isfinite(cb.entries))
    assert idx.max() < cb.entries.shape[0]
    np.testing.assert_array_equal(cb.entries, cb.entries.astype(np.float32))


@pytest.mark.xfail(strict=True, reason="the 3-level symmetric 2-bit grid puts heavy-tailed spikes exactly on its top level; rotation loses")
def test_rotation_helps_symmetric_two_bit_rtn():
    from lopro import apply_block_rotation, make_plan
    from lopro.synthetic import synthetic_layer

    wins = 0
    plan = make_plan(64, None, 0, 64)
    for seed in range(100):
        w, stats = synthetic_layer(64, 64, seed)
        grid = QuantGrid(2, 64)
        rot = apply_block_rotation(rtn_quantize(apply_block_rotation(w, plan), grid)[2], plan, inverse=True)
        wins += proxy_loss(w, rot, stats.hessian) <= proxy_loss(w, rtn_quantize(w, grid)[2], stats.hessian)
    assert wins >= 90
