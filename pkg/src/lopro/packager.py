"""Quantized layer container, bit accounting and output reconstruction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import formats
from .linalg import SizeError, apply_block_rotation
from .lowrank import PRNG_NAME, LowRankFactors, e4m3_decode, e4m3_encode
from .quantizers import Codebook, QuantGrid
from .rotation import RotationPlan

KINDS = ("rtn", "gptq", "vq")


@dataclass
class QuantizedLayer:
    """Everything needed to evaluate ``W X ~= W_r X + R_hat Q^T P^T X``.

    ``codes`` is (m, n) uint8 for scalar kinds and (m, n / vq_dim) indices for
    ``"vq"``.  ``scale`` is the activation scale the low-rank part was fitted
    under (float32-exact).  ``report`` holds run diagnostics and is not
    serialized.
    """

    name: str
    shape: tuple[int, int]
    kind: str
    codes: np.ndarray = field(repr=False)
    factors: LowRankFactors = field(repr=False)
    plan: RotationPlan = field(repr=False)
    scale: np.ndarray = field(repr=False)
    grid: Optional[QuantGrid] = field(default=None, repr=False)
    codebook: Optional[Codebook] = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        m, n = self.shape = tuple(int(d) for d in self.shape)
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if self.kind == "vq":
            if self.codebook is None:
                raise ValueError("vq layer needs a codebook")
            if self.codes.shape != (m, n // self.codebook.dim):
                raise SizeError(f"vq indices shape {self.codes.shape} does not match layer {self.shape}")
        else:
            if self.grid is None or self.grid.scales is None:
                raise ValueError("scalar layer needs a grid with scales")
            if self.codes.shape != (m, n):
                raise SizeError(f"codes shape {self.codes.shape} does not match layer {self.shape}")
        if self.factors.shape != (m, n):
            raise SizeError(f"low-rank factors shape {self.factors.shape} does not match {self.shape}")
        if self.plan.n != n or self.scale.shape != (n,):
            raise SizeError("plan / scale size does not match the layer's input dimension")
        if not np.array_equal(self.scale.astype(np.float32).astype(np.float64), self.scale):
            raise ValueError("activation scale must be float32-representable")

    @property
    def bits(self) -> int:
        return self.codebook.bits if self.kind == "vq" else self.grid.bits

    def residual_rotated(self) -> np.ndarray:
        """Dequantized residual in the rotated frame."""
        if self.kind == "vq":
            return self.codebook.lookup(self.codes)
        return self.grid.dequantize(self.codes)

    def dense_weight(self) -> np.ndarray:
        """``W_hat = W_r + R_hat Q^T P^T`` as a dense matrix."""
        r = apply_block_rotation(self.residual_rotated(), self.plan, inverse=True)
        if self.factors.rank:
            r = r + self.factors.dense()
        return r


def reconstruct_output(layer: QuantizedLayer, X) -> np.ndarray:
    """Layer output for inputs ``X`` (n, k) without forming the dense weight.

    The rotation is applied to the input (``Q^T P^T X``) and the low-rank
    path runs as ``U (S (V' X))``.
    """
    x = np.asarray(X, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != layer.shape[1]:
        raise SizeError(f"input must have {layer.shape[1]} rows, got shape {x.shape}")
    x_rot = apply_block_rotation(x.T, layer.plan).T
    out = layer.residual_rotated() @ x_rot
    if layer.factors.rank:
        out += layer.factors.apply(x)
    return out


# -- accounting ---------------------------------------------------------------

def average_bits(m: int, n: int, d_q: float, g: float, r: int, d_r: float = 8, d_o: float = 16) -> float:
    """Average storage bits per weight: codes, group scales, U and V,
    activation scale and permutation, singular values."""
    return d_q + d_o / g + r * d_r / n + r * d_r / m + 2 * d_o / n + r * d_o / (m * n)


def layer_average_bits(layer: QuantizedLayer, d_o: float = 16) -> float:
    m, n = layer.shape
    r = layer.factors.rank
    d_r = 8 if layer.factors.precision == "e4m3" else 64
    if layer.kind == "vq":
        return average_bits(m, n, layer.codebook.bits, math.inf, r, d_r, d_o)
    g = layer.grid.group_size
    extra = 0.0 if layer.grid.symmetric else layer.grid.bits / g
    return average_bits(m, n, layer.grid.bits, g, r, d_r, d_o) + extra


def measured_bits(blob_or_meta) -> float:
    """``8 * payload bytes / (m * n)`` of a packed container."""
    meta = blob_or_meta
    if isinstance(blob_or_meta, (bytes, bytearray)):
        meta, _ = formats.unpack_sections(bytes(blob_or_meta))
    m, n = meta["shape"]
    return 8.0 * formats.payload_bytes(meta) / (m * n)


def latency_estimate(n: int, batch: int, r: int, b_h: int) -> int:
    """Operation count ``n b (2 r + 1 + log2 b_H)`` for the low-rank and
    rotation overhead of one forward pass (a complexity estimate, not a timing)."""
    return int(n * batch * (2 * r + 1 + math.log2(max(b_h, 1))))


# -- (de)serialization --------------------------------------------------------

def _perm_tag(n: int) -> str:
    return "u16" if n <= 1 << 16 else "u32"


def pack_layer(layer: QuantizedLayer) -> bytes:
    m, n = layer.shape
    f = layer.factors
    meta = {
        "format": "LPRQ",
        "name": layer.name,
        "shape": [m, n],
        "kind": layer.kind,
        "bits": layer.bits,
        "lowrank": {"rank": f.rank, "precision": f.precision},
        "plan": {"b_i": layer.plan.b_i, "b_h": layer.plan.b_h},
        "prng": PRNG_NAME,
        "extra": layer.meta,
    }
    sections = {}
    if layer.kind == "vq":
        cb = layer.codebook
        meta["vq"] = {"dim": cb.dim}
        sections["codes"] = ("u8", formats.pack_codes(layer.codes, cb.bits * cb.dim))
        sections["codebook"] = ("f32", cb.entries)
    else:
        gr = layer.grid
        meta["grid"] = {"group_size": gr.group_size, "symmetric": gr.symmetric}
        sections["codes"] = ("u8", formats.pack_codes(layer.codes, gr.bits))
        sections["scales"] = ("f16", gr.scales)
        if not gr.symmetric:
            sections["zeros"] = ("u8", formats.pack_codes(gr.zeros, gr.bits))
    if f.precision == "e4m3":
        sections["U"] = ("u8", e4m3_encode(f.U))
        sections["V"] = ("u8", e4m3_encode(f.V))
        sections["S"] = ("f32", f.S)
    else:
        sections["U"] = ("f64", f.U)
        sections["V"] = ("f64", f.V)
        sections["S"] = ("f64", f.S)
    sections["scale"] = ("f32", layer.scale)
    sections["perm"] = (_perm_tag(n), layer.plan.indices)
    return formats.pack_sections(meta, sections)


def unpack_layer(buf: bytes) -> QuantizedLayer:
    meta, arr = formats.unpack_sections(bytes(buf))
    m, n = meta["shape"]
    kind = meta["kind"]
    bits = meta["bits"]
    r = meta["lowrank"]["rank"]
    precision = meta["lowrank"]["precision"]

    grid = codebook = None
    if kind == "vq":
        dim = meta["vq"]["dim"]
        count = m * (n // dim)
        codes = formats.unpack_codes(arr["codes"], bits * dim, count).reshape(m, n // dim)
        codes = codes.astype(np.uint8 if bits * dim <= 8 else np.uint16)
        codebook = Codebook(bits, dim, arr["codebook"].astype(np.float64))
    else:
        g = meta["grid"]
        codes = formats.unpack_codes(arr["codes"], bits, m * n).reshape(m, n).astype(np.uint8)
        zeros = None
        if not g["symmetric"]:
            count = arr["scales"].size
            zeros = formats.unpack_codes(arr["zeros"], bits, count).astype(np.uint8)
            zeros = zeros.reshape(arr["scales"].shape)
        grid = QuantGrid(bits, g["group_size"], g["symmetric"], arr["scales"], zeros)

    scale = arr["scale"].astype(np.float64)
    if r:
        if precision == "e4m3":
            U, V = e4m3_decode(arr["U"]), e4m3_decode(arr["V"])
        else:
            U, V = arr["U"], arr["V"]
        factors = LowRankFactors(U, arr["S"].astype(np.float64), V, precision, scale)
    else:
        factors = LowRankFactors.empty(m, n, precision, scale)
    plan = RotationPlan(n, arr["perm"].astype(np.int64), meta["plan"]["b_i"], meta["plan"]["b_h"])
    return QuantizedLayer(
        meta["name"], (m, n), kind, codes, factors, plan, scale,
        grid=grid, codebook=codebook, meta=meta.get("extra", {}),
    )


def save_layer(path, layer: QuantizedLayer) -> bytes:
    blob = pack_layer(layer)
    Path(path).write_bytes(blob)
    return blob


def load_layer(path) -> QuantizedLayer:
    return unpack_layer(Path(path).read_bytes())


def layers_identical(a: QuantizedLayer, b: QuantizedLayer) -> bool:
    """Bitwise comparison of every serialized field."""
    def same(x, y):
        if x is None or y is None:
            return x is y
        x, y = np.asarray(x), np.asarray(y)
        return x.shape == y.shape and x.tobytes() == y.astype(x.dtype).tobytes()

    fa, fb = a.factors, b.factors
    checks = [
        a.name == b.name, a.shape == b.shape, a.kind == b.kind, a.meta == b.meta,
        same(a.codes.astype(np.uint32), b.codes.astype(np.uint32)),
        same(a.scale, b.scale), a.plan == b.plan,
        fa.precision == fb.precision, same(fa.U, fb.U), same(fa.S, fb.S), same(fa.V, fb.V),
    ]
    if a.kind == "vq":
        checks += [a.codebook.dim == b.codebook.dim, same(a.codebook.entries, b.codebook.entries)]
    else:
        ga, gb = a.grid, b.grid
        checks += [
            (ga.bits, ga.group_size, ga.symmetric) == (gb.bits, gb.group_size, gb.symmetric),
            same(ga.scales, gb.scales), same(ga.zeros, gb.zeros),
        ]
    return all(checks)
