"""Quantized convolution executed entirely in integer arithmetic.

Decoded levels are integers on dyadic grids (value * 2**grid_bits), so a
convolution is an integer multiply-accumulate per input channel followed
by power-of-two alignment shifts between channels and one final shift
back to the real line.  The float64 outputs are therefore bit-exact
against an arbitrary-precision rational evaluation of
decode(w) (*) decode(x).

Accumulators are specified as 32-bit signed integers: the worst-case
aligned magnitude is checked per output position and exceeding 2**31 is
a hard error naming the position.  The arithmetic itself runs in int64,
guarded so it stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .activations import (
    ActivationKind,
    CalibrationProfile,
    MeanParams,
    MeanRemovedChannel,
    apply_activation,
    calibrate,
    find_mean_channel,
    fit_mean_channel,
    mean_removed_quantize,
    quantize_activations,
)
from .codebooks import (
    Codebook,
    decode_level,
    get_codebook,
    mux_codebook,
    parse_mux_family,
    round_half_away,
)
from .errors import ConfigError, ContractError, NumericError
from .tensors import GroupScheme, QuantizedTensor, Tensor

ACC_BITS = 32  # contract width of the fixed-point accumulator
_ACC_LIMIT = 1 << (ACC_BITS - 1)
_EXACT_FLOAT_LIMIT = 1 << 53
_EXACT_INT64_MARGIN = 1 << 62


@dataclass(frozen=True)
class LayerSpec:
    """One convolution layer of the fixed-point pipeline."""

    kind: str = "conv"  # conv | conv_transpose
    stride: int = 1
    padding: int = 0
    activation: ActivationKind = ActivationKind.NONE
    bias: Optional[np.ndarray] = None  # per output channel, accumulator grid

    def __post_init__(self):
        if self.kind not in ("conv", "conv_transpose"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ContractError("stride must be >= 1")
        if self.padding < 0:
            raise ContractError("padding must be >= 0")


def output_hw(spec: LayerSpec, kernel_hw: tuple[int, int],
              in_hw: tuple[int, int]) -> tuple[int, int]:
    """Spatial output size; stride-2 pad-2 kernel-5 maps H to ceil(H/2)."""
    kh, kw = kernel_hw
    h, w = in_hw
    if spec.kind == "conv":
        oh = (h + 2 * spec.padding - kh) // spec.stride + 1
        ow = (w + 2 * spec.padding - kw) // spec.stride + 1
    else:
        oh = (h - 1) * spec.stride - 2 * spec.padding + kh
        ow = (w - 1) * spec.stride - 2 * spec.padding + kw
    if oh < 1 or ow < 1:
        raise ContractError(f"layer output would be empty: {oh}x{ow}")
    return oh, ow


# ---------------------------------------------------------------------------
# Integer decode of quantized operands
# ---------------------------------------------------------------------------


def _grid_bits(cb: Codebook) -> int:
    return int(max(p.step_exponent for p in cb.pieces))


def _to_grid_ints(values: np.ndarray, grid_bits: int) -> np.ndarray:
    scaled = np.ldexp(values, grid_bits)
    ints = np.rint(scaled)
    if not np.array_equal(ints, scaled):
        raise ContractError("decoded values do not sit on the expected dyadic grid")
    return ints.astype(np.int64)


def _decode_weights(w_q: QuantizedTensor) -> tuple[np.ndarray, np.ndarray, int]:
    """Weight levels -> (grid integers, per-output-channel exponents, grid bits)."""
    if w_q.axis_roles != ("I", "H", "W", "O"):
        raise ContractError("weight operand must have (I, H, W, O) axis roles")
    if w_q.lut is not None:
        raise ContractError(
            "value-table (lloyd) weights are not dyadic; fixed-point execution"
            " requires a piecewise codebook"
        )
    cb = get_codebook(w_q.codebook_id)
    bits = _grid_bits(cb)
    ints = _to_grid_ints(decode_level(w_q.levels, cb), bits)
    n_out = w_q.shape[-1]
    if w_q.scheme is GroupScheme.CHANNEL_WISE:
        exps = w_q.sf_exponents.astype(np.int64)
    else:
        exps = np.full(n_out, int(w_q.sf_exponents[0]), dtype=np.int64)
    return ints, exps, bits


def _decode_acts(x_q: QuantizedTensor) -> tuple[np.ndarray, np.ndarray, int]:
    """Activation levels -> (grid integers, per-channel exponents, grid bits)."""
    if x_q.axis_roles != ("OH", "OW", "O"):
        raise ContractError("activation operand must have (OH, OW, O) axis roles")
    if x_q.scheme is not GroupScheme.CHANNEL_WISE:
        raise ContractError("activations are grouped per channel")
    channels = x_q.n_channels
    if x_q.range_sel is not None:
        signed, bits_budget = parse_mux_family(x_q.codebook_id)
        alpha = 0.5 if signed else 1.0
        books = [
            mux_codebook(int(x_q.range_sel[c]), bits_budget, alpha, signed)
            for c in range(channels)
        ]
    else:
        books = [get_codebook(x_q.codebook_id)] * channels
    bits = max(_grid_bits(cb) for cb in books)
    ints = np.empty(x_q.shape, dtype=np.int64)
    for c, cb in enumerate(books):
        ints[..., c] = _to_grid_ints(decode_level(x_q.levels[..., c], cb), bits)
    return ints, x_q.sf_exponents.astype(np.int64), bits


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def forward_quantized(
    x_q: QuantizedTensor,
    w_q: QuantizedTensor,
    spec: LayerSpec,
    stats: Optional[dict] = None,
) -> Tensor:
    """Run one layer on quantized operands; returns the pre-quantization
    activation values on their exact dyadic grid (float64).

    The leaky-ReLU slope 0.125 is a power of two, so applying it extends
    the dyadic grid by three bits and stays exact.
    """
    w_ints, w_exps, w_bits = _decode_weights(w_q)
    x_ints, x_exps, x_bits = _decode_acts(x_q)
    ci, kh, kw, co = w_ints.shape
    if x_ints.shape[-1] != ci:
        raise ContractError(
            f"input has {x_ints.shape[-1]} channels, kernel expects {ci}"
        )

    if spec.kind == "conv_transpose":
        if spec.padding > kh - 1 or spec.padding > kw - 1:
            raise ConfigError("transposed convolution requires padding <= kernel-1")
        x_ints = _dilate(x_ints, spec.stride)
        w_ints = w_ints[:, ::-1, ::-1, :]
        pad_h, pad_w = kh - 1 - spec.padding, kw - 1 - spec.padding
        stride = 1
    else:
        pad_h = pad_w = spec.padding
        stride = spec.stride

    x_pad = np.pad(x_ints, ((pad_h, pad_h), (pad_w, pad_w), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(x_pad, (kh, kw), axis=(0, 1))
    windows = windows[::stride, ::stride]  # (OH, OW, C, KH, KW)

    # Exactness guard (pure integer): the worst aligned sum must stay far
    # inside int64 for the einsum and shift products below to be exact.
    top_exp = int(np.max(x_exps))
    shifts = (top_exp - x_exps).astype(np.int64)
    worst_term = int(np.max(np.abs(w_ints))) * int(np.max(np.abs(x_ints)))
    worst_scalar = ci * kh * kw * worst_term * (1 << int(np.max(shifts)))
    if 2 * worst_scalar >= _EXACT_INT64_MARGIN:
        raise NumericError("scaling-exponent spread exceeds exact integer range")

    shift_mult = (1 << shifts)[None, None, :, None]
    partial = np.einsum("xyckl,cklo->xyco", windows, w_ints)  # per input channel
    bound_per_pos = np.sum(
        np.einsum("xyckl,cklo->xyco", np.abs(windows), np.abs(w_ints)) * shift_mult,
        axis=2,
    )
    peak = int(np.max(bound_per_pos, initial=0))
    if peak >= _ACC_LIMIT:
        pos = np.unravel_index(int(np.argmax(bound_per_pos)), bound_per_pos.shape)
        raise NumericError(
            f"accumulator overflow at output position {pos}:"
            f" worst-case magnitude {peak} exceeds {ACC_BITS}-bit"
        )

    acc = np.sum(partial * shift_mult, axis=2)
    if spec.bias is not None:
        acc = acc + _bias_ints(spec.bias, w_bits + x_bits + top_exp, w_exps)
    if np.max(np.abs(acc), initial=0) >= _EXACT_FLOAT_LIMIT:
        raise NumericError("accumulated value exceeds exact float64 range")

    total_exp = w_bits + x_bits + top_exp + w_exps  # per output channel
    out = np.ldexp(acc.astype(np.float64), -total_exp[None, None, :])
    out = apply_activation(out, spec.activation)
    if stats is not None:
        stats["acc_peak"] = peak
    return Tensor(out, ("OH", "OW", "O"))


def _dilate(x: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return x
    h, w, c = x.shape
    out = np.zeros(((h - 1) * stride + 1, (w - 1) * stride + 1, c), dtype=x.dtype)
    out[::stride, ::stride] = x
    return out


def _bias_ints(bias: np.ndarray, base_bits: int, w_exps: np.ndarray) -> np.ndarray:
    """Quantize per-channel biases directly onto the accumulator grid."""
    grid = base_bits + w_exps
    return round_half_away(np.ldexp(np.asarray(bias, dtype=np.float64), grid)).astype(
        np.int64
    )


# ---------------------------------------------------------------------------
# Multi-layer demo pipeline
# ---------------------------------------------------------------------------


@dataclass
class LayerReport:
    name: str
    shape: tuple[int, ...]
    sf_exponents: list[int]
    clip_count: int
    acc_peak: int


@dataclass
class PipelineResult:
    outputs: list[Tensor]
    y_hat: np.ndarray
    mean_removed: Optional[MeanRemovedChannel]
    mean_channel: Optional[int]
    reports: list[LayerReport] = field(default_factory=list)

    def report_text(self) -> str:
        lines = []
        for r in self.reports:
            sf = ",".join(str(e) for e in r.sf_exponents)
            lines.append(
                f"{r.name}: shape={'x'.join(str(d) for d in r.shape)}"
                f" sf=[{sf}] clipped={r.clip_count} acc_peak={r.acc_peak}"
            )
        if self.mean_removed is not None:
            m = self.mean_removed
            lines.append(
                f"mean-removed channel {self.mean_channel}: mu_hat={m.mu_hat}"
                f" bits {m.bits_before}->{m.bits_after}"
            )
        return "\n".join(lines) + "\n"


def pipeline_demo(
    image: Tensor,
    layers: list[tuple[str, QuantizedTensor, LayerSpec]],
    input_profile: CalibrationProfile,
    hidden_profiles: list[CalibrationProfile],
    mean_params=None,
) -> PipelineResult:
    """Chain quantized layers over an input image.

    The image is quantized with input_profile; each hidden layer output is
    re-quantized with its profile before feeding the next layer.  The
    final layer output is rounded element-wise to integers, and when a
    mean predictor is supplied its channel is offset-coded against the
    predicted mean (computed from the input-image mean).
    """
    if len(hidden_profiles) != len(layers) - 1:
        raise ContractError("one profile per hidden layer output required")
    reports: list[LayerReport] = []
    outputs: list[Tensor] = []
    x_q = quantize_activations(image, input_profile)
    reports.append(
        LayerReport(
            "input",
            image.shape,
            [int(e) for e in input_profile.sf_exponents],
            int(np.sum(input_profile.clip_count)),
            0,
        )
    )
    current = x_q
    for i, (name, w_q, spec) in enumerate(layers):
        stats: dict = {}
        out = forward_quantized(current, w_q, spec, stats=stats)
        outputs.append(out)
        if i < len(layers) - 1:
            prof = hidden_profiles[i]
            before = int(np.sum(prof.clip_count))
            current = quantize_activations(out, prof)
            reports.append(
                LayerReport(
                    name,
                    out.shape,
                    [int(e) for e in prof.sf_exponents],
                    int(np.sum(prof.clip_count)) - before,
                    stats["acc_peak"],
                )
            )
        else:
            reports.append(
                LayerReport(name, out.shape, [], 0, stats["acc_peak"])
            )
    final = outputs[-1]
    y_hat = round_half_away(final.data).astype(np.int64)

    mean_removed = None
    mean_channel = None
    if mean_params is not None:
        mean_channel = mean_params.channel_index
        x_mean = float(np.mean(image.data.astype(np.float64)))
        mean_removed = mean_removed_quantize(
            y_hat[..., mean_channel], mean_params, x_mean
        )
    return PipelineResult(outputs, y_hat, mean_removed, mean_channel, reports)


def calibrate_pipeline(
    images: list[Tensor],
    layers: list[tuple[str, QuantizedTensor, LayerSpec]],
    input_kind: ActivationKind = ActivationKind.RELU,
    mean_threshold: float = 3.0,
    bits: int = 8,
) -> tuple[CalibrationProfile, list[CalibrationProfile], Optional[MeanParams]]:
    """Walk calibration images through the quantized pipeline layer by
    layer, profiling each layer's output before the next consumes it.

    The profile for a layer is built with the activation kind that layer
    applies (one-sided after ReLU, signed otherwise).  The final, rounded
    output is scanned for a channel with a large non-zero mean; when one
    stands out, its mean is regressed against the image means.
    """
    if not images:
        raise ContractError("calibration requires at least one image")
    input_profile = calibrate(images, input_kind, bits)
    currents = [quantize_activations(im, input_profile) for im in images]
    hidden_profiles: list[CalibrationProfile] = []
    finals: list[np.ndarray] = []
    for i, (name, w_q, spec) in enumerate(layers):
        outs = [forward_quantized(x_q, w_q, spec) for x_q in currents]
        if i == len(layers) - 1:
            finals = [round_half_away(o.data) for o in outs]
            break
        prof = calibrate(outs, spec.activation, bits)
        hidden_profiles.append(prof)
        currents = [quantize_activations(o, prof) for o in outs]

    mean_params = None
    channel = find_mean_channel(Tensor(finals[0], ("OH", "OW", "O")), mean_threshold)
    if channel is not None and len(images) >= 2:
        x_means = [float(np.mean(im.data.astype(np.float64))) for im in images]
        if max(x_means) > min(x_means):
            mean_params = fit_mean_channel(
                images, [f[..., channel] for f in finals], channel
            )
    return input_profile, hidden_profiles, mean_params
