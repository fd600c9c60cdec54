"""Activation quantization: per-channel calibration over sample images,
range-multiplexed codebooks, and mean-removed coding of the integer
transform output.

Each channel's dynamic range is profiled as the maximum scaled magnitude
over the calibration samples.  That maximum always lands in [alpha/2,
alpha); a 2-bit selector records which of four sub-intervals it falls in,
and channels whose maxima stay below the top intervals use codebooks that
spend the unreachable levels on extra precision near zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .codebooks import (
    Codebook,
    encode_level,
    mux_codebook,
    mux_family_id,
    quantize_piecewise,
    round_half_away,
    scale_factor,
)
from .errors import ContractError
from .tensors import (
    GroupScheme,
    QuantizedTensor,
    Tensor,
    float_from_text,
    float_to_text,
)

LEAKY_RELU_COEFF = 0.125  # fixed; a power of two so it reduces to a shift


class ActivationKind(Enum):
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    NONE = "none"


def alpha_for(kind: ActivationKind) -> float:
    """Dynamic range bound: 1.0 after ReLU (one-sided), 0.5 otherwise."""
    return 1.0 if kind is ActivationKind.RELU else 0.5


def signed_for(kind: ActivationKind) -> bool:
    return kind is not ActivationKind.RELU


def apply_activation(x: np.ndarray, kind: ActivationKind) -> np.ndarray:
    if kind is ActivationKind.RELU:
        return np.maximum(x, 0.0)
    if kind is ActivationKind.LEAKY_RELU:
        return np.where(x < 0, x * LEAKY_RELU_COEFF, x)
    return x


def range_interval(max_scaled: float, alpha: float) -> int:
    """2-bit selector: which of [a/2,5a/8), [5a/8,3a/4), [3a/4,7a/8),
    [7a/8,a) contains the channel's maximum scaled magnitude."""
    edges = np.array([5 * alpha / 8, 3 * alpha / 4, 7 * alpha / 8])
    return int(np.searchsorted(edges, max_scaled, side="right"))


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass
class MeanParams:
    """Linear predictor of a channel's mean from the input-image mean."""

    a: float
    b: float
    channel_index: int
    r2: float


@dataclass
class CalibrationProfile:
    """Per-channel scaling exponents and range selections measured on
    calibration samples.  clip_count accumulates at apply time.

    use_mux=False marks hyper-path profiles: every channel keeps the
    uniform codebook and no 2-bit selection signal is stored.
    """

    kind: ActivationKind
    alpha: float
    bits: int
    sf_exponents: np.ndarray
    max_scaled: np.ndarray
    range_sel: np.ndarray
    clip_count: np.ndarray
    mean_params: Optional[MeanParams] = None
    use_mux: bool = True

    @property
    def n_channels(self) -> int:
        return self.sf_exponents.size

    def channel_codebook(self, c: int) -> Codebook:
        sel = int(self.range_sel[c]) if self.use_mux else 3
        return mux_codebook(sel, self.bits, self.alpha, signed_for(self.kind))


def calibrate(
    samples: Sequence[Tensor], kind: ActivationKind, bits: int = 8,
    use_mux: bool = True,
) -> CalibrationProfile:
    """Profile per-channel dynamic ranges from activation samples.

    The per-channel scaling factor comes from the maximum magnitude over
    all samples (max-merge is commutative, so sample order is
    irrelevant); the range selector is the interval containing the scaled
    maximum.  All-zero channels get exponent 0 and the uniform selection.
    Pass use_mux=False for hyper-path outputs, which stay uniform.
    """
    if not samples:
        raise ContractError("calibration requires at least one sample")
    channels = samples[0].n_channels
    for s in samples:
        if s.axis_roles != ("OH", "OW", "O"):
            raise ContractError("calibration samples must be activations")
        if s.n_channels != channels:
            raise ContractError(
                f"inconsistent channel counts: {s.n_channels} != {channels}"
            )
    alpha = alpha_for(kind)
    maxima = np.zeros(channels)
    for s in samples:
        m = np.max(np.abs(s.data.astype(np.float64)), axis=(0, 1))
        maxima = np.maximum(maxima, m)
    exponents = np.zeros(channels, dtype=np.int32)
    max_scaled = np.zeros(channels)
    range_sel = np.full(channels, 3, dtype=np.uint8)
    for c in range(channels):
        if maxima[c] == 0.0:
            continue
        sf = scale_factor(np.array([maxima[c]]), alpha)
        exponents[c] = sf.exponent
        max_scaled[c] = math.ldexp(maxima[c], sf.exponent)
        range_sel[c] = range_interval(max_scaled[c], alpha)
    return CalibrationProfile(
        kind, alpha, bits, exponents, max_scaled, range_sel,
        np.zeros(channels, dtype=np.int64), use_mux=use_mux,
    )


def quantize_activations(t: Tensor, prof: CalibrationProfile) -> QuantizedTensor:
    """Quantize an activation tensor with the calibrated per-channel
    scaling factors and range-multiplexed codebooks.

    Values whose scaled magnitude falls outside the selected codebook's
    range are clipped to the range edge and counted in prof.clip_count.
    """
    if t.axis_roles != ("OH", "OW", "O"):
        raise ContractError("quantize_activations requires an activation tensor")
    if t.n_channels != prof.n_channels:
        raise ContractError(
            f"tensor has {t.n_channels} channels, profile has {prof.n_channels}"
        )
    signed = signed_for(prof.kind)
    levels = np.empty(t.shape, dtype=np.uint8)
    for c in range(t.n_channels):
        cb = prof.channel_codebook(c)
        sw = np.ldexp(t.data[..., c].astype(np.float64), int(prof.sf_exponents[c]))
        out_of_range = np.abs(sw) >= cb.alpha
        if not signed:
            out_of_range |= sw < 0
        prof.clip_count[c] += int(np.count_nonzero(out_of_range))
        levels[..., c] = encode_level(quantize_piecewise(sw, cb), cb)
    if prof.use_mux:
        codebook_id = mux_family_id(signed, prof.bits)
        range_sel = prof.range_sel.copy()
    else:
        kind_tag = "signed" if signed else "relu"
        codebook_id = f"act-uniform-{kind_tag}-n{prof.bits}"
        range_sel = None
    return QuantizedTensor(
        levels,
        t.axis_roles,
        GroupScheme.CHANNEL_WISE,
        codebook_id,
        prof.sf_exponents.copy(),
        range_sel=range_sel,
    )


def interval_stats(
    layer_samples: dict[str, Sequence[Tensor]], kind: ActivationKind, bits: int = 8
) -> dict[str, np.ndarray]:
    """Empirical probability, per layer, of the per-channel scaled maximum
    landing in each of the four range intervals."""
    stats = {}
    for name, samples in layer_samples.items():
        prof = calibrate(samples, kind, bits)
        counts = np.bincount(prof.range_sel, minlength=4)[:4]
        stats[name] = counts / prof.n_channels
    return stats


def render_interval_stats(stats: dict[str, np.ndarray], alpha: float) -> str:
    """Text table of interval probabilities, one row per layer."""
    headers = [
        f"[{alpha / 2:g},{5 * alpha / 8:g})",
        f"[{5 * alpha / 8:g},{3 * alpha / 4:g})",
        f"[{3 * alpha / 4:g},{7 * alpha / 8:g})",
        f"[{7 * alpha / 8:g},{alpha:g})",
    ]
    width = max(len(h) for h in headers) + 2
    name_w = max([len(n) for n in stats] + [5])
    lines = ["".join([" " * name_w] + [h.rjust(width) for h in headers])]
    for name, probs in stats.items():
        cells = [f"{100 * p:.2f}%".rjust(width) for p in probs]
        lines.append(name.ljust(name_w) + "".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Mean-removed coding of the integer transform output
# ---------------------------------------------------------------------------


def fit_mean_channel(
    images: Sequence[Tensor | np.ndarray],
    channel_values: Sequence[np.ndarray],
    channel_index: int = 0,
) -> MeanParams:
    """Least-squares fit of the channel mean against the image mean.

    r2 is 1.0 when the residuals vanish (including the constant-channel
    case where the variance of the target is zero).
    """
    if len(images) != len(channel_values):
        raise ContractError("one channel sample per image required")
    if len(images) < 2:
        raise ContractError("regression requires at least two images")
    x = np.array(
        [float(np.mean(im.data if isinstance(im, Tensor) else im)) for im in images]
    )
    y = np.array([float(np.mean(ch)) for ch in channel_values])
    if np.ptp(x) == 0.0:
        raise ContractError("degenerate design: identical image means")
    xc = x - x.mean()
    a = float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
    b = float(y.mean() - a * x.mean())
    ss_res = float(np.sum((y - (a * x + b)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return MeanParams(a, b, channel_index, r2)


def find_mean_channel(
    t: Tensor, threshold: float = 3.0
) -> Optional[int]:
    """Channel with the largest |mean|/std ratio above the threshold, the
    signature of a channel carrying a large non-zero mean."""
    data = t.data.astype(np.float64)
    means = np.abs(np.mean(data, axis=(0, 1)))
    stds = np.std(data, axis=(0, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(stds > 0, means / stds, np.where(means > 0, np.inf, 0.0))
    best = int(np.argmax(ratio))
    return best if ratio[best] > threshold else None


def bitwidth_of(max_abs: int) -> int:
    """Signed bit-width holding +/-max_abs: ceil(log2(m+1)) plus a sign bit."""
    if max_abs < 0:
        raise ContractError("bit-width of a negative magnitude is undefined")
    return int(max_abs).bit_length() + 1


@dataclass
class MeanRemovedChannel:
    """Offset-coded integer channel: element offsets from the predicted
    mean plus the 8-bit transmitted mean itself."""

    offsets: np.ndarray
    mu_hat: int
    bits_before: int
    bits_after: int
    mean_in_range: bool


def mean_removed_quantize(
    y_hat: np.ndarray, mp: MeanParams, x_mean: float
) -> MeanRemovedChannel:
    """Store a non-zero-mean integer channel as offsets from the predicted
    mean round(a * x_mean + b)."""
    y = np.asarray(y_hat)
    if not np.array_equal(y, np.rint(y)):
        raise ContractError("mean removal applies to integer-rounded channels")
    y = y.astype(np.int64)
    mu_hat = int(round_half_away(mp.a * x_mean + mp.b))
    offsets = y - mu_hat
    return MeanRemovedChannel(
        offsets,
        mu_hat,
        bitwidth_of(int(np.max(np.abs(y), initial=0))),
        bitwidth_of(int(np.max(np.abs(offsets), initial=0))),
        -128 <= mu_hat <= 127,
    )


def mean_restore(channel: MeanRemovedChannel) -> np.ndarray:
    """Invert mean_removed_quantize (exact for integer inputs)."""
    return channel.offsets + channel.mu_hat


# ---------------------------------------------------------------------------
# Profile serialization (bundle manifest section)
# ---------------------------------------------------------------------------


def profile_to_manifest(prof: CalibrationProfile) -> dict:
    rec = {
        "kind": prof.kind.value,
        "bits": prof.bits,
        "sf_exponents": [int(e) for e in prof.sf_exponents],
        "max_scaled": [float_to_text(m) for m in prof.max_scaled],
        "range_sel": [int(s) for s in prof.range_sel],
        "clip_count": [int(c) for c in prof.clip_count],
    }
    if not prof.use_mux:
        rec["use_mux"] = False
    if prof.mean_params is not None:
        mp = prof.mean_params
        rec["mean_params"] = {
            "a": float_to_text(mp.a),
            "b": float_to_text(mp.b),
            "channel_index": mp.channel_index,
            "r2": float_to_text(mp.r2),
        }
    return rec


def profile_from_manifest(rec: dict) -> CalibrationProfile:
    kind = ActivationKind(rec["kind"])
    mean_params = None
    if "mean_params" in rec:
        m = rec["mean_params"]
        mean_params = MeanParams(
            float_from_text(m["a"]),
            float_from_text(m["b"]),
            int(m["channel_index"]),
            float_from_text(m["r2"]),
        )
    return CalibrationProfile(
        kind,
        alpha_for(kind),
        int(rec["bits"]),
        np.array(rec["sf_exponents"], dtype=np.int32),
        np.array([float_from_text(m) for m in rec["max_scaled"]]),
        np.array(rec["range_sel"], dtype=np.uint8),
        np.array(rec["clip_count"], dtype=np.int64),
        mean_params,
        use_mux=rec.get("use_mux", True),
    )
