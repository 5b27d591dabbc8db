"""Ablation sweeps over pipeline settings with per-stage timings."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence

from .calibration import CalibrationStats
from .pipeline import PipelineConfig, quantize_layer_pipeline
from .synthetic import synthetic_layer

AXES = ("rank", "iterations", "block_size", "quantizer", "size")
STAGES = ("decompose", "rotate", "quantize", "pack")


def _apply(axis: str, value, base: PipelineConfig) -> PipelineConfig:
    if axis == "rank":
        return base.updated(rank=int(value))
    if axis == "iterations":
        return base.updated(it=int(value))
    if axis == "block_size":
        # "b_i:b_h" or a single value used for both
        if isinstance(value, str) and ":" in value:
            b_i, b_h = (int(v) for v in value.split(":"))
        else:
            b_i = b_h = int(value)
        return base.updated(b_i=b_i, b_h=b_h)
    if axis == "quantizer":
        return base.updated(quantizer=str(value))
    if axis == "size":
        return base
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("LOPRO_THREADS", "1")))
    except ValueError:
        return 1


def run_ablation_sweep(
    axis: str,
    values: Sequence,
    base: PipelineConfig,
    W=None,
    stats: Optional[CalibrationStats] = None,
    synth_shape: tuple[int, int] = (256, 256),
    synth_seed: int = 0,
    repeats: int = 1,
    layer_factory: Optional[Callable] = None,
) -> list[dict]:
    """One pipeline run per value of ``axis``; all runs share ``base.seed``.

    Input is ``(W, stats)`` when given, otherwise a synthetic layer of
    ``synth_shape``.  For ``axis="size"`` each value ``v`` builds a synthetic
    ``v x v`` layer.  Stage times are the minimum over ``repeats`` runs.  A
    failing run is recorded in its row and the sweep continues.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    factory = layer_factory or (lambda m, n, seed: synthetic_layer(m, n, seed))
    if axis != "size" and W is None:
        W, stats = factory(*synth_shape, synth_seed)

    def run(i_value):
        i, value = i_value
        row = {"axis": axis, "value": value, "index": i}
        try:
            cfg = _apply(axis, value, base)
            if axis == "size":
                w, st = factory(int(value), int(value), synth_seed)
            else:
                w, st = W, CalibrationStats(stats.hessian, stats.act_mean, stats.sample_count, stats.scale)
            best = None
            for _ in range(max(1, repeats)):
                layer = quantize_layer_pipeline(w, st, cfg, name=f"{axis}={value}")
                t = layer.report["timings"]
                best = dict(t) if best is None else {k: min(best[k], t[k]) for k in best}
            rep = layer.report
            row.update(
                proxy_loss=rep["proxy_loss"],
                relative_error=rep["relative_error"],
                bits_formula=rep["bits_formula"],
                bits_measured=rep["bits_measured"],
                timings={k: best.get(k, 0.0) for k in STAGES},
                error=None,
            )
        except Exception as exc:  # recorded, sweep continues
            row.update(proxy_loss=None, bits_formula=None, bits_measured=None,
                       timings=None, error=f"{type(exc).__name__}: {exc}")
        return row

    items = list(enumerate(values))
    workers = min(thread_count(), len(items))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(run, items))
    else:
        rows = [run(it) for it in items]
    return sorted(rows, key=lambda r: r["index"])


def deterministic_view(rows: list[dict]) -> list[dict]:
    """Rows without wall-clock fields, for reproducibility checks."""
    return [{k: v for k, v in r.items() if k != "timings"} for r in rows]


def format_table(rows: list[dict]) -> str:
    head = f"{'axis':<11}{'value':>8}{'proxy_loss':>14}{'bits(eq)':>10}{'bits(meas)':>11}" + "".join(
        f"{s + '_s':>12}" for s in STAGES
    )
    lines = [head, "-" * len(head)]
    for r in rows:
        if r["error"]:
            lines.append(f"{r['axis']:<11}{str(r['value']):>8}  FAILED: {r['error']}")
            continue
        t = r["timings"]
        lines.append(
            f"{r['axis']:<11}{str(r['value']):>8}{r['proxy_loss']:>14.6g}{r['bits_formula']:>10.4f}"
            f"{r['bits_measured']:>11.4f}" + "".join(f"{t[s]:>12.4f}" for s in STAGES)
        )
    return "\n".join(lines)


def to_jsonl(rows: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
