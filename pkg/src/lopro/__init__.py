"""Low-rank plus partially rotated residual quantization of weight matrices."""

from .calibration import (
    CalibrationStats,
    StatsAccumulator,
    accumulate_stats,
    derive_scale,
    synthesize_calibration,
)
from .linalg import (
    SizeError,
    apply_block_rotation,
    exact_svd_small,
    fwht,
    fwht_normalized,
    gram_apply,
    hadamard_matrix,
)
from .lowrank import (
    LowRankFactors,
    e4m3_decode,
    e4m3_encode,
    e4m3_round,
    r1svd_decompose,
    r1svd_step,
    scaled_decompose,
)
from .packager import (
    QuantizedLayer,
    average_bits,
    layer_average_bits,
    load_layer,
    measured_bits,
    pack_layer,
    reconstruct_output,
    save_layer,
    unpack_layer,
)
from .pipeline import ConfigError, PipelineConfig, StageError, quantize_layer_pipeline
from .quantizers import Codebook, QuantGrid, gptq_quantize, proxy_loss, rtn_quantize, vq_quantize
from .rotation import GeometryError, RotationPlan, build_permutation, make_plan, rotate_hessian

__version__ = "0.1.0"
