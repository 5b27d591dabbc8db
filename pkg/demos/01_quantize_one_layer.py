"""Quantize a single synthetic layer end to end and look at what came out.

Run:  python demos/01_quantize_one_layer.py
"""

import numpy as np

from lopro import PipelineConfig, proxy_loss, quantize_layer_pipeline, reconstruct_output, unpack_layer
from lopro.synthetic import synthetic_layer

# A 512 x 512 weight with a strong low-rank part, heavy-tailed noise and a
# few spikes, plus activations where 1 in 16 channels is ten times louder.
W, stats = synthetic_layer(512, 512, seed=0)
print(f"weight {W.shape}, calibration tokens {stats.sample_count}")

# Defaults: rank 16, 8 power iterations, e4m3 factors, 256-wide identity and
# Hadamard blocks, 2-bit GPTQ with groups of 128.
cfg = PipelineConfig()
layer = quantize_layer_pipeline(W, stats, cfg, name="demo")
rep = layer.report

print(f"\nproxy loss of the zero matrix  {proxy_loss(W, np.zeros_like(W), stats.hessian):12.4f}")
print(f"after the low-rank part only   {rep['lowrank_only_loss']:12.4f}")
print(f"after the full pipeline        {rep['proxy_loss']:12.4f}")
print(f"relative weight error          {rep['relative_error']:12.4f}")
print(f"\nbits per weight (formula)  {rep['bits_formula']:.4f}")
print(f"bits per weight (on disk)  {rep['bits_measured']:.4f}")
for stage, t in rep["timings"].items():
    print(f"  {stage:<10} {t * 1000:8.1f} ms")

# The container is self-contained: reload it and run inputs through it.
# The quantizer minimizes error under the calibration statistics, so weight
# space error can look poor while outputs are fine.  Held-out inputs should
# share the calibration channel profile; isotropic noise would overweight
# the quiet channels that absorbed most of the error compensation.  With
# only 1024 calibration tokens for 512 channels some of that compensation
# fits sampling noise, so the held-out error sits above sqrt(loss ratio).
back = unpack_layer(rep["blob"])
profile = np.sqrt(np.diag(stats.hessian))
X = np.random.default_rng(1).standard_normal((512, 256)) * profile[:, None]
Y = reconstruct_output(back, X)
ref = W @ X
print(f"\noutput error on held-out inputs  {np.linalg.norm(Y - ref) / np.linalg.norm(ref):.4f}")
