"""deltacomp: mixed-precision compression of fine-tuned model deltas.

The delta between a fine-tuned checkpoint and its backbone is factored
with a thin SVD and the singular vectors are quantized at bit widths that
decrease with their singular values; the compressed form restores models
at a fraction of the storage and applies without ever materializing the
dense delta.
"""

from .analyzer import (
    ErrorReport,
    ReportRow,
    activation_error,
    allocation_mse_objective,
    compare_methods,
    layer_bins,
    longtail_suite,
    outlier_columns,
    synth_longtail_delta,
)
from .errors import DeltaCompError, IntegrityError, NumericsError, UsageError
from .model_io import (
    DeltaWeights,
    ModelCheckpoint,
    extract_delta,
    load_checkpoint,
    restore,
    save_checkpoint,
    total_size,
)
from .numerics import Rng, SvdResult, fro_norm, gaussian_matrix, matmul, thin_svd
from .pipeline import (
    CompressedGroup,
    CompressedMatrix,
    DeltaPackage,
    RawEntry,
    compress_matrix,
    compress_model,
    decompress_matrix,
    decompress_package,
    fused_apply,
    load_package,
    package_stats,
    save_package,
)
from .planner import (
    Allocation,
    GaParams,
    GaResult,
    PrecisionSchedule,
    ScheduleGroup,
    allocation_schedule,
    avg_bitwidth,
    budget_ranks,
    genetic_search,
    make_schedule,
)
from .quantizers import (
    QuantizedTensor,
    dequantize,
    gptq_quantize,
    pack_bits,
    rtn_quantize,
    sign_quantize,
    unpack_bits,
)

__version__ = "0.1.0"
