"""Compare no rotation, a full Hadamard rotation, and the partial rotation
that leaves the most important columns alone.

Run:  python demos/02_why_partial_rotation.py
"""

import numpy as np

from lopro import PipelineConfig, quantize_layer_pipeline
from lopro.synthetic import synthetic_layer

base = PipelineConfig(bits=2, group_size=64, rank=16, b_i=16, b_h=16)
variants = {
    "no rotation": base.updated(b_i=64, b_h=1, permute=False),
    "full rotation": base.updated(b_i=0, b_h=64),
    "partial + permutation": base,
}

losses = {name: [] for name in variants}
for seed in range(20):
    W, stats = synthetic_layer(64, 64, seed)
    for name, cfg in variants.items():
        losses[name].append(quantize_layer_pipeline(W, stats, cfg.updated(seed=seed)).report["proxy_loss"])

print(f"{'variant':<24}{'median loss':>14}{'wins vs partial':>18}")
partial = np.array(losses["partial + permutation"])
for name, vals in losses.items():
    vals = np.array(vals)
    print(f"{name:<24}{np.median(vals):>14.4f}{int((vals < partial).sum()):>12d}/20")

# Rotating spreads outliers across a block, but it also smears the columns
# the inputs care most about.  Sorting those to the front and keeping them
# in an identity block gets the benefit without that cost.
