"""End-to-end layer quantization: scaled low-rank fit, permutation, partial
rotation, residual quantization, packing."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from .calibration import CalibrationStats, derive_scale
from .linalg import apply_block_rotation, as_matrix
from .lowrank import PRECISIONS, scaled_decompose
from .packager import (
    KINDS,
    QuantizedLayer,
    layer_average_bits,
    measured_bits,
    pack_layer,
)
from .quantizers import QuantGrid, gptq_quantize, proxy_loss, rtn_quantize, vq_quantize
from .rotation import build_permutation, make_plan, rotate_hessian


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class ConfigError(ValueError):
    """A configuration value is out of range; ``flag`` names the offending option."""

    def __init__(self, flag: str, message: str):
        super().__init__(f"--{flag.replace('_', '-')}: {message}")
        self.flag = flag


@dataclass(frozen=True)
class PipelineConfig:
    bits: int = 2
    group_size: int = 128
    rank: int = 16
    it: int = 8
    b_i: int = 256
    b_h: int = 256
    quantizer: str = "gptq"
    vq_dim: int = 4
    lloyd_iters: int = 0
    damp: float = 0.01
    exponent: float = 2.5
    precision: str = "e4m3"
    symmetric: bool = True
    permute: bool = True
    seed: int = 0

    def validate(self, shape: Optional[tuple[int, int]] = None) -> "PipelineConfig":
        if self.quantizer not in KINDS:
            raise ConfigError("quantizer", f"must be one of {KINDS}, got {self.quantizer!r}")
        if self.quantizer == "vq":
            if self.bits not in (2, 3, 4) or self.vq_dim not in (1, 2, 4):
                raise ConfigError("vq_dim", "vq supports bits 2-4 with dim 1, 2 or 4")
            if self.bits * self.vq_dim > 16:
                raise ConfigError("vq_dim", "codebook would exceed 2**16 entries")
        elif self.bits not in (2, 3, 4, 8):
            raise ConfigError("bits", f"must be one of 2, 3, 4, 8, got {self.bits}")
        if self.group_size < 1:
            raise ConfigError("group_size", "must be positive")
        if self.rank < 0:
            raise ConfigError("rank", "must be non-negative")
        if self.it < 0:
            raise ConfigError("it", "must be non-negative")
        if self.b_h < 1 or self.b_h & (self.b_h - 1):
            raise ConfigError("b_h", f"must be a power of two, got {self.b_h}")
        if self.b_i < 0:
            raise ConfigError("b_i", "must be non-negative")
        if self.damp < 0:
            raise ConfigError("damp", "must be non-negative")
        if self.precision not in PRECISIONS:
            raise ConfigError("precision", f"must be one of {PRECISIONS}")
        if self.lloyd_iters < 0:
            raise ConfigError("lloyd_iters", "must be non-negative")
        if shape is not None:
            m, n = shape
            if self.rank > min(m, n):
                raise ConfigError("rank", f"{self.rank} exceeds min(m, n) = {min(m, n)}")
            if self.b_i > n:
                raise ConfigError("b_i", f"{self.b_i} exceeds the {n} input channels")
            if (n - self.b_i) % self.b_h:
                raise ConfigError("b_i", f"(n - b_I) = {n - self.b_i} is not divisible by b_H = {self.b_h}")
            if self.quantizer == "vq":
                if n % self.vq_dim:
                    raise ConfigError("vq_dim", f"{self.vq_dim} does not divide {n} columns")
            elif n % self.group_size:
                raise ConfigError("group_size", f"{self.group_size} does not divide {n} columns")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            data = json.load(fh)
        return cls.from_dict({k.replace("-", "_"): v for k, v in data.items()})

    def updated(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


def _stage(name, fn, timings, *args, **kw):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kw)
    except (StageError, ConfigError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
    return out


def quantize_layer_pipeline(W, stats: CalibrationStats, config: PipelineConfig = PipelineConfig(),
                            name: str = "layer") -> QuantizedLayer:
    """Quantize one weight matrix ``W`` (m, n) whose inputs have statistics ``stats``.

    The returned layer's ``report`` carries the proxy losses, bit accounting
    and per-stage wall time (decompose / rotate / quantize / pack).
    """
    w = as_matrix(W, "W")
    m, n = w.shape
    config.validate((m, n))
    if stats.hessian.shape != (n, n):
        raise StageError("calibrate", ValueError(f"Hessian is {stats.hessian.shape}, layer has {n} inputs"))
    h = stats.hessian
    timings: dict[str, float] = {}

    def _scale():
        s = stats.scale if stats.scale is not None else derive_scale(stats, config.exponent)
        # stored as float32; fit against exactly what is stored
        return np.asarray(s, dtype=np.float32).astype(np.float64)

    s = _stage("decompose", _scale, timings)
    factors, residual = _stage(
        "decompose", scaled_decompose, timings, w, s, config.rank, config.it, config.precision, config.seed
    )

    def _rotate():
        perm = build_permutation(np.diag(h), residual) if config.permute else None
        plan = make_plan(n, perm, config.b_i, config.b_h)
        return plan, apply_block_rotation(residual, plan), rotate_hessian(h, plan)

    plan, r_rot, h_rot = _stage("rotate", _rotate, timings)

    def _quantize():
        if config.quantizer == "vq":
            idx, cb, deq = vq_quantize(r_rot, h_rot, config.bits, config.vq_dim,
                                       config.lloyd_iters, config.seed, config.damp)
            return idx, None, cb, deq
        grid = QuantGrid(config.bits, config.group_size, config.symmetric)
        if config.quantizer == "rtn":
            codes, grid, deq = rtn_quantize(r_rot, grid)
        else:
            codes, grid, deq = gptq_quantize(r_rot, h_rot, grid, config.damp)
        return codes, grid, None, deq

    codes, grid, codebook, r_hat = _stage("quantize", _quantize, timings)

    meta = {"config": config.to_dict()}
    layer = QuantizedLayer(name, (m, n), config.quantizer, codes, factors, plan, s,
                           grid=grid, codebook=codebook, meta=meta)
    blob = _stage("pack", pack_layer, timings, layer)

    w_hat = layer.dense_weight()
    layer.report = {
        "proxy_loss": proxy_loss(w, w_hat, h),
        "lowrank_only_loss": proxy_loss(w, w - residual, h),
        "rotated_frame_loss": proxy_loss(r_rot, r_hat, h_rot),
        "relative_error": float(np.linalg.norm(w_hat - w) / max(np.linalg.norm(w), 1e-300)),
        "bits_formula": layer_average_bits(layer),
        "bits_measured": measured_bits(blob),
        "container_bytes": len(blob),
        "timings": timings,
    }
    layer.report["blob"] = blob
    return layer
