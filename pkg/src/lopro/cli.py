"""``lopro`` command line: quantize, inspect, eval, sweep, selftest."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import formats
from .calibration import StatsAccumulator, accumulate_stats, synthesize_calibration
from .harness import AXES, format_table, run_ablation_sweep, to_jsonl
from .packager import layer_average_bits, latency_estimate, load_layer, measured_bits, reconstruct_output
from .pipeline import ConfigError, PipelineConfig, StageError, quantize_layer_pipeline
from .quantizers import proxy_loss

_CONFIG_FLAGS = {
    "bits": int, "group_size": int, "rank": int, "it": int, "b_i": int, "b_h": int,
    "quantizer": str, "vq_dim": int, "lloyd_iters": int, "damp": float,
    "exponent": float, "precision": str, "seed": int,
}


class CliError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with pipeline settings (flags override it)")
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--asymmetric", action="store_true", default=None, help="per-group zero points")
    p.add_argument("--no-permute", dest="permute", action="store_false", default=None)


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    overrides = {k: getattr(args, k) for k in _CONFIG_FLAGS if getattr(args, k) is not None}
    if args.asymmetric:
        overrides["symmetric"] = False
    if args.permute is not None:
        overrides["permute"] = args.permute
    return cfg.updated(**overrides).validate()


def _parse_synth(text: str):
    try:
        n, tokens, outliers, gain, seed = text.split(",")
        return int(n), int(tokens), int(outliers), float(gain), int(seed)
    except ValueError:
        raise CliError(f"--calib-synth: expected n,tokens,outliers,gain,seed, got {text!r}") from None


def _load(path: str, flag: str) -> np.ndarray:
    try:
        data, _ = formats.load_tensor(path)
    except (OSError, formats.FormatError) as exc:
        raise CliError(f"{flag}: cannot read {path}: {exc}") from None
    return data


def _stats(args, n: int):
    if args.calib and args.calib_synth:
        raise CliError("--calib and --calib-synth are mutually exclusive")
    if args.calib_synth:
        sn, tokens, outliers, gain, seed = _parse_synth(args.calib_synth)
        if sn != n:
            raise CliError(f"--calib-synth: n={sn} does not match the {n} weight columns")
        return accumulate_stats([synthesize_calibration(sn, tokens, outliers, gain, seed)])
    if not args.calib:
        raise CliError("one of --calib or --calib-synth is required")
    x = _load(args.calib, "--calib")
    if x.ndim != 2 or x.shape[1] != n:
        raise CliError(f"--calib: activations must be (tokens, {n}), got {x.shape}")
    acc = StatsAccumulator(n)
    acc.update(x)
    return acc.finalize()


def cmd_quantize(args) -> int:
    cfg = _config(args)
    w = _load(args.weights, "--weights")
    if w.ndim != 2:
        raise CliError(f"--weights: expected a 2-D tensor, got shape {w.shape}")
    stats = _stats(args, w.shape[1])
    layer = quantize_layer_pipeline(w, stats, cfg, name=Path(args.weights).stem)
    rep = layer.report
    Path(args.out).write_bytes(rep["blob"])
    print(f"wrote {args.out} ({rep['container_bytes']} bytes)")
    print(f"proxy loss        {rep['proxy_loss']:.6g}")
    print(f"low-rank only     {rep['lowrank_only_loss']:.6g}")
    print(f"relative error    {rep['relative_error']:.6g}")
    print(f"bits (formula)    {rep['bits_formula']:.4f}")
    print(f"bits (measured)   {rep['bits_measured']:.4f}")
    for k, v in rep["timings"].items():
        print(f"time {k:<12} {v:.4f}s")
    return 0


def cmd_inspect(args) -> int:
    try:
        blob = Path(args.layer).read_bytes()
        meta, _ = formats.unpack_sections(blob)
        layer = load_layer(args.layer)
    except (OSError, formats.FormatError) as exc:
        raise CliError(f"inspect: cannot read {args.layer}: {exc}") from None
    print(json.dumps(meta, indent=2, sort_keys=True))
    m, n = layer.shape
    print(f"bits (formula)    {layer_average_bits(layer):.4f}")
    print(f"bits (measured)   {measured_bits(meta):.4f}")
    est = latency_estimate(n, args.batch, layer.factors.rank, layer.plan.b_h)
    print(f"overhead ops      n*b*(2r+1+log2 b_H) = {est} at batch {args.batch} (estimate)")
    return 0


def cmd_eval(args) -> int:
    try:
        layer = load_layer(args.layer)
    except (OSError, formats.FormatError) as exc:
        raise CliError(f"--layer: cannot read {args.layer}: {exc}") from None
    x = _load(args.input, "--input")
    m, n = layer.shape
    if x.ndim != 2 or x.shape[1] != n:
        raise CliError(f"--input: activations must be (tokens, {n}), got {x.shape}")
    y = reconstruct_output(layer, x.T)
    print(f"output            {m} x {x.shape[0]}, norm {np.linalg.norm(y):.6g}")
    if args.weights:
        w = _load(args.weights, "--weights")
        if w.shape != (m, n):
            raise CliError(f"--weights: shape {w.shape} does not match layer {(m, n)}")
        h = x.T @ x / x.shape[0]
        ref = w @ x.T
        print(f"proxy loss        {proxy_loss(w, layer.dense_weight(), h):.6g}")
        print(f"output rel. error {np.linalg.norm(y - ref) / max(np.linalg.norm(ref), 1e-300):.6g}")
    else:
        print("pass --weights to report proxy loss and reconstruction error")
    if args.out:
        formats.save_tensor(args.out, y.T, "output")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if args.axis != "quantizer" and not (args.axis == "block_size" and any(":" in v for v in values)):
        try:
            values = [int(v) for v in values]
        except ValueError:
            raise CliError(f"--values: expected integers for axis {args.axis}") from None
    w = stats = None
    if args.weights:
        w = _load(args.weights, "--weights")
        stats = _stats(args, w.shape[1])
    m, n = args.synth_shape
    rows = run_ablation_sweep(args.axis, values, cfg, w, stats, synth_shape=(m, n),
                              synth_seed=args.synth_seed, repeats=args.repeats)
    print(format_table(rows))
    if args.jsonl:
        Path(args.jsonl).write_text(to_jsonl(rows))
    return 0 if all(r["error"] is None for r in rows) else 1


def cmd_selftest(args) -> int:
    from .selftest import run
    return 0 if run() else 1


def _shape(text: str):
    try:
        m, n = (int(v) for v in text.lower().split("x"))
        return m, n
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MxN, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lopro", description="Low-rank + partial-rotation weight quantization")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize one weight matrix into an LPRQ container")
    q.add_argument("--weights", required=True, help="LPRT weight tensor (m x n)")
    q.add_argument("--calib", help="LPRT activation tensor (tokens x n)")
    q.add_argument("--calib-synth", help="synthetic activations: n,tokens,outliers,gain,seed")
    q.add_argument("--out", required=True, help="output LPRQ path")
    _add_config_flags(q)
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("inspect", help="print container metadata and bit accounting")
    i.add_argument("layer")
    i.add_argument("--batch", type=int, default=1, help="batch size for the latency estimate")
    i.set_defaults(func=cmd_inspect)

    e = sub.add_parser("eval", help="run a quantized layer on inputs")
    e.add_argument("--layer", required=True)
    e.add_argument("--input", required=True, help="LPRT activations (tokens x n)")
    e.add_argument("--weights", help="reference LPRT weights for loss and error")
    e.add_argument("--out", help="write outputs (tokens x m) as LPRT")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="ablation sweep over one pipeline setting")
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--weights")
    s.add_argument("--calib")
    s.add_argument("--calib-synth")
    s.add_argument("--synth-shape", type=_shape, default=(256, 256))
    s.add_argument("--synth-seed", type=int, default=0)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--jsonl", help="write rows as JSON lines")
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("selftest", help="run the built-in oracle checks")
    t.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"lopro: config: {exc}", file=sys.stderr)
    except StageError as exc:
        print(f"lopro: {exc}", file=sys.stderr)
    except CliError as exc:
        print(f"lopro: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
