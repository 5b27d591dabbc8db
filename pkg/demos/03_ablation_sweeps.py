"""Sweep rank, power iterations and layer size with the built-in harness.

Run:  python demos/03_ablation_sweeps.py
Set LOPRO_THREADS to run sweep points in parallel.
"""

from lopro import PipelineConfig
from lopro.harness import format_table, run_ablation_sweep

base = PipelineConfig(bits=2, group_size=64, b_i=64, b_h=64)

print("rank: more components absorb more of the weight before quantization\n")
print(format_table(run_ablation_sweep("rank", [0, 8, 16, 32, 64], base, synth_shape=(256, 256))))

print("\niterations: gains flatten out after a handful of power steps\n")
print(format_table(run_ablation_sweep("iterations", [0, 1, 2, 4, 8], base, synth_shape=(256, 256))))

print("\nsize: decompose time grows with the number of weights\n")
sized = base.updated(quantizer="rtn", b_i=0, b_h=256, group_size=128)
print(format_table(run_ablation_sweep("size", [256, 512, 1024], sized, repeats=3)))
