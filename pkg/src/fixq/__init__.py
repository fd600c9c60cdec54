"""fixq: 8-bit dynamic fixed-point quantization for convolutional networks.

Converts float32 weights and activations into 8-bit level indices with
group-shared power-of-two scaling factors, runs convolutions in exact
integer arithmetic, and audits the memory and energy cost of the result.
"""

from .errors import (
    BundleFormatError,
    ConfigError,
    ContractError,
    FixqError,
    NumericError,
    TrainingError,
)
from .tensors import (
    ACTIVATION_ROLES,
    WEIGHT_ROLES,
    GroupScheme,
    QuantizedTensor,
    Tensor,
    TensorBundle,
    activation_tensor,
    group,
    read_bundle,
    weight_tensor,
    write_bundle,
)
from .codebooks import (
    Codebook,
    CodebookReport,
    Piece,
    ScaleFactor,
    catalog_text,
    codebook_ids,
    decode_level,
    dequantize,
    encode_level,
    enumerate_levels,
    get_codebook,
    icml_nlq_codebook,
    mux_codebook,
    quantize_linear,
    quantize_piecewise,
    register_codebook,
    scale_factor,
    uniform_codebook,
    validate_codebook,
    weight_nlq_codebook,
)

from .weights import (
    ClipSpec,
    IcmlParams,
    QuantError,
    ToyConvRegressor,
    clip_epsilon,
    clip_preset,
    clip_threshold,
    clip_weights,
    icml_fractional_bits,
    icml_quantize,
    lloyd_quantize,
    quant_error,
    quantize_weights,
    ste_mask,
    wcft_train,
)
from .activations import (
    ActivationKind,
    CalibrationProfile,
    MeanParams,
    alpha_for,
    bitwidth_of,
    calibrate,
    find_mean_channel,
    fit_mean_channel,
    interval_stats,
    mean_removed_quantize,
    mean_restore,
    quantize_activations,
    range_interval,
)
from .inference import (
    LayerSpec,
    calibrate_pipeline,
    forward_quantized,
    output_hw,
    pipeline_demo,
)
from .audit import (
    EnergyTable,
    LayerCfg,
    NetworkConfig,
    activation_cost,
    energy_estimate,
    mean_removal_report,
    weight_cost,
)

__version__ = "0.1.0"
