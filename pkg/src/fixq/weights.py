"""Weight quantization: CW/LW grouping with linear, piecewise or Lloyd
codebooks, the clipping fine-tuning loop (WCFT) with straight-through
gradient masking, and the fractional-bit baseline it is compared against.

Clipping moves a group's maximum just below a power of two (minus a small
epsilon) so the group's scaling factor exactly doubles and the scaled
maximum lands at alpha - 2**-(N-1), the largest magnitude the weight
codebook can represent.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .codebooks import (
    Codebook,
    Piece,
    decode_level,
    encode_level,
    floor_log2,
    get_codebook,
    icml_nlq_codebook,
    quantize_piecewise,
    scale_factor,
    uniform_codebook,
    weight_nlq_codebook,
)
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .tensors import GroupScheme, QuantizedTensor, Tensor, group

WEIGHT_METHODS = ("lq", "nlq", "lloyd")


# ---------------------------------------------------------------------------
# Quantization error (the metric the clipping scheme optimizes)
# ---------------------------------------------------------------------------


@dataclass
class QuantError:
    """Per-group sum of squared scaled-domain errors divided by sf."""

    per_group: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.per_group))


def quant_error(t: Tensor, q: QuantizedTensor) -> QuantError:
    """sum(|sw - Q(sw)|^2) * sf^-1 accumulated per group and summed."""
    if not t.is_weight or t.shape != q.shape:
        raise ContractError("quant_error requires a weight tensor matching q")
    groups = group(t, q.scheme)
    if len(groups) != q.sf_exponents.size:
        raise ContractError("group count does not match the sf exponents")
    if q.lut is None:
        cb = get_codebook(q.codebook_id)
    per_group = np.empty(len(groups))
    for i, g in enumerate(groups):
        e = int(q.sf_exponents[i])
        sw = np.ldexp(g.astype(np.float64), e)
        lv = _group_levels(q, i)
        qsw = q.lut[lv] if q.lut is not None else decode_level(lv, cb)
        per_group[i] = np.sum((sw - qsw) ** 2) * math.ldexp(1.0, -e)
    return QuantError(per_group)


def _group_levels(q: QuantizedTensor, index: int) -> np.ndarray:
    if q.scheme is GroupScheme.LAYER_WISE:
        return q.levels.reshape(-1)
    return np.moveaxis(q.levels, -1, 0)[index].reshape(-1)


# ---------------------------------------------------------------------------
# Direct weight quantization
# ---------------------------------------------------------------------------


def _method_codebook(method: str, bits: int) -> Codebook:
    if method == "lq":
        return uniform_codebook(bits, 0.5, True)
    if method == "nlq":
        return weight_nlq_codebook(bits)
    raise ConfigError(f"unknown weight method {method!r}")


def _method_codebook_id(method: str, bits: int) -> str:
    return {"lq": f"weight-lq-n{bits}", "nlq": f"weight-nlq-n{bits}"}[method]


def quantize_weights(
    t: Tensor,
    scheme: GroupScheme = GroupScheme.CHANNEL_WISE,
    method: str = "nlq",
    bits: int = 8,
    jobs: int = 1,
) -> QuantizedTensor:
    """Quantize a weight tensor group by group.

    Each group gets its own power-of-two scaling factor, is quantized in
    the scaled domain by the chosen method, and its values are stored as
    8-bit level indices.  Lloyd is restricted to layer-wise grouping (a
    per-channel value table would defeat the storage budget).
    """
    if not t.is_weight:
        raise ContractError("quantize_weights requires weight axis roles")
    if method not in WEIGHT_METHODS:
        raise ConfigError(f"unknown weight method {method!r}")
    if method == "lloyd" and scheme is not GroupScheme.LAYER_WISE:
        raise ConfigError("lloyd quantization is only available layer-wise")

    groups = group(t, scheme)
    exponents = np.zeros(len(groups), dtype=np.int32)

    if method == "lloyd":
        g = groups[0]
        sf = scale_factor(g, 0.5)
        exponents[0] = sf.exponent
        sw = np.ldexp(g.astype(np.float64), sf.exponent)
        n_levels = min(2**bits, np.unique(sw).size)
        values, assignment, _ = lloyd_quantize(sw, n_levels)
        lut = np.zeros(2**bits)
        lut[: values.size] = values
        levels = assignment.astype(np.uint8).reshape(t.shape)
        return QuantizedTensor(
            levels, t.axis_roles, scheme, f"lloyd-lw-n{bits}", exponents, lut=lut
        )

    cb = _method_codebook(method, bits)

    def quantize_group(i: int) -> tuple[int, np.ndarray]:
        g = groups[i]
        sf = scale_factor(g, cb.alpha)
        sw = np.ldexp(g.astype(np.float64), sf.exponent)
        return sf.exponent, encode_level(quantize_piecewise(sw, cb), cb)

    if jobs > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(quantize_group, range(len(groups))))
    else:
        results = [quantize_group(i) for i in range(len(groups))]

    if scheme is GroupScheme.LAYER_WISE:
        exponents[0] = results[0][0]
        levels = results[0][1].reshape(t.shape)
    else:
        moved = np.empty((t.n_channels,) + t.shape[:-1], dtype=np.uint8)
        for c, (e, lv) in enumerate(results):
            exponents[c] = e
            moved[c] = lv.reshape(t.shape[:-1])
        levels = np.moveaxis(moved, 0, -1)
    return QuantizedTensor(
        levels, t.axis_roles, scheme, _method_codebook_id(method, bits), exponents
    )


# ---------------------------------------------------------------------------
# Lloyd (1-D k-means) quantizer
# ---------------------------------------------------------------------------


def lloyd_quantize(
    values: np.ndarray, levels: int, iters: int = 100, tol: float = 1e-9
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """1-D k-means to a local optimum.

    Centroids start at quantiles of the data (deterministic); each sweep
    reassigns points to the nearest centroid and recenters, so the
    objective sum((x - c)^2) never increases.  Returns (centroids,
    assignment, per-iteration objectives).
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ContractError("lloyd_quantize requires a non-empty group")
    if not np.all(np.isfinite(x)):
        raise NumericError("lloyd_quantize requires finite values")
    distinct = np.unique(x).size
    if levels > distinct:
        raise ContractError(
            f"{levels} levels requested but only {distinct} distinct values"
        )

    def assign(c: np.ndarray) -> np.ndarray:
        return np.searchsorted((c[1:] + c[:-1]) / 2, x)

    def recenter(c: np.ndarray, lab: np.ndarray) -> np.ndarray:
        sums = np.bincount(lab, weights=x, minlength=levels)
        counts = np.bincount(lab, minlength=levels)
        return np.where(counts > 0, sums / np.maximum(counts, 1), c)

    # Quantile-spaced distinct observations as starting centroids: sorted,
    # no duplicates, and exactly the data when levels == distinct count.
    uniq = np.unique(x)
    centroids = uniq[
        np.floor((np.arange(levels) + 0.5) * uniq.size / levels).astype(np.int64)
    ]
    labels = assign(centroids)
    objectives: list[float] = []
    for _ in range(iters):
        centroids = recenter(centroids, labels)
        objectives.append(float(np.sum((x - centroids[labels]) ** 2)))
        new_labels = assign(centroids)
        if np.array_equal(new_labels, labels):
            break
        if len(objectives) >= 2 and objectives[-2] - objectives[-1] <= tol:
            labels = new_labels
            break
        labels = new_labels
    # Final recenter keeps the postcondition: every centroid is the mean of
    # its assigned cluster (a strict improvement, so monotonicity holds).
    centroids = recenter(centroids, labels)
    objectives.append(float(np.sum((x - centroids[labels]) ** 2)))
    return centroids, labels, objectives


# ---------------------------------------------------------------------------
# Weight clipping
# ---------------------------------------------------------------------------


def clip_epsilon(values: np.ndarray, bits: int = 8, alpha: float = 0.5) -> float:
    """epsilon = 2**(floor(log2(max|w|)) - (N-1)) / alpha."""
    m = float(np.max(np.abs(values)))
    if m == 0.0:
        raise ContractError("clip_epsilon requires a non-zero group")
    k = floor_log2(m)
    alpha_exp = floor_log2(alpha)
    return math.ldexp(1.0, k - (bits - 1) - alpha_exp)


def clip_threshold(
    values: np.ndarray, beta: float = 1.0, bits: int = 8, alpha: float = 0.5
) -> float:
    """Clip level 2**floor(log2(max|w|)) * beta - epsilon."""
    if beta < 1.0:
        raise ContractError(f"clipping factor must be >= 1, got {beta}")
    m = float(np.max(np.abs(values)))
    if m == 0.0:
        raise ContractError("clip_threshold requires a non-zero group")
    return math.ldexp(1.0, floor_log2(m)) * beta - clip_epsilon(values, bits, alpha)


def clip_weights(
    values: np.ndarray,
    beta: float = 1.0,
    bits: int = 8,
    alpha: float = 0.5,
    symmetric: bool = True,
) -> np.ndarray:
    """Clip a group at the threshold that doubles its scaling factor.

    By default magnitudes are clipped with sign preserved (weight
    distributions are symmetric); symmetric=False applies the one-sided
    literal form that leaves negative values untouched.
    """
    t = clip_threshold(values, beta, bits, alpha)
    v = np.asarray(values, dtype=np.float64)
    if symmetric:
        return np.sign(v) * np.minimum(np.abs(v), t)
    return np.minimum(v, t)


def ste_mask(
    values: np.ndarray, threshold: float | np.ndarray, symmetric: bool = True
) -> np.ndarray:
    """Straight-through gradient mask: pass where the weight is inside the
    clip range, cancel where the clip saturates."""
    v = np.asarray(values)
    return (np.abs(v) <= threshold) if symmetric else (v <= threshold)


# ---------------------------------------------------------------------------
# WCFT training on a toy model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClipSpec:
    """Schedule for weight clipping fine tuning: I1 plain iterations, then
    `rounds` rounds of clip(beta) followed by fine-tune iterations."""

    normal_iters: int
    betas: tuple[float, ...]
    finetune_iters: tuple[int, ...]

    def __post_init__(self):
        if self.normal_iters < 0 or any(i < 0 for i in self.finetune_iters):
            raise ContractError("iteration counts must be >= 0")
        if any(b < 1.0 for b in self.betas):
            raise ContractError("clipping factors must be >= 1")
        if len(self.betas) != len(self.finetune_iters):
            raise ContractError("one fine-tune count per clipping round required")

    @property
    def rounds(self) -> int:
        return len(self.betas)


# Round structure used in the experiments: one round at low rates, three
# rounds (1, sqrt(2), 1) at high rates.  Iteration counts scale down for
# desk-sized runs.
_PRESETS = {
    "low": ((1.0,), (140_000,)),
    "high": ((1.0, math.sqrt(2.0), 1.0), (86_000, 86_000, 140_000)),
}
_PRESET_NORMAL_ITERS = 1_000_000


def clip_preset(name: str, scale: float = 1.0) -> ClipSpec:
    """Named clipping schedules; `scale` shrinks iteration counts
    proportionally (each round keeps at least one iteration)."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown clip preset {name!r}")
    betas, iters = _PRESETS[name]
    return ClipSpec(
        max(1, round(_PRESET_NORMAL_ITERS * scale)),
        betas,
        tuple(max(1, round(i * scale)) for i in iters),
    )


class ToyConvRegressor:
    """Two-layer 1-D convolutional regressor with hand-written gradients.

    Weight layout is (in_channels, kernel, out_channels) so channel-wise
    groups slice the last axis, matching the 4-D weight convention.
    """

    def __init__(self, channels=(2, 12, 8), kernel=5, seed=0):
        c0, c1, c2 = channels
        rng = np.random.default_rng(seed)
        self.kernel = kernel
        self.weights = [
            rng.normal(0.0, 0.35, size=(c0, kernel, c1)),
            rng.normal(0.0, 0.35, size=(c1, kernel, c2)),
        ]

    @staticmethod
    def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        win = np.lib.stride_tricks.sliding_window_view(x, w.shape[1], axis=0)
        return np.einsum("jit,ito->jo", win, w)

    def forward(self, x: np.ndarray, weights=None) -> np.ndarray:
        w1, w2 = self.weights if weights is None else weights
        z1 = self._conv(x, w1)
        return self._conv(np.maximum(z1, 0.0), w2)

    def loss_and_grads(
        self, x: np.ndarray, target: np.ndarray, weights=None
    ) -> tuple[float, list[np.ndarray]]:
        w1, w2 = self.weights if weights is None else weights
        k = self.kernel
        z1 = self._conv(x, w1)
        a1 = np.maximum(z1, 0.0)
        z2 = self._conv(a1, w2)
        diff = z2 - target
        loss = float(np.mean(diff**2))
        dz2 = 2.0 * diff / diff.size
        win1 = np.lib.stride_tricks.sliding_window_view(a1, k, axis=0)
        dw2 = np.einsum("jit,jo->ito", win1, dz2)
        pad = np.zeros((k - 1, dz2.shape[1]))
        dz2_pad = np.concatenate([pad, dz2, pad], axis=0)
        winb = np.lib.stride_tricks.sliding_window_view(dz2_pad, k, axis=0)
        da1 = np.einsum("mou,cuo->mc", winb, w2[:, ::-1, :])
        dz1 = da1 * (z1 > 0.0)
        win0 = np.lib.stride_tricks.sliding_window_view(x, k, axis=0)
        dw1 = np.einsum("jit,jo->ito", win0, dz1)
        return loss, [dw1, dw2]

    def weight_tensor(self, layer: int) -> Tensor:
        w = self.weights[layer]
        return Tensor(w.reshape(w.shape[0], 1, w.shape[1], w.shape[2]), ("I", "H", "W", "O"))


@dataclass
class WcftResult:
    weights: list[np.ndarray]
    quantized: list[QuantizedTensor]
    errors: list[QuantError]
    log: list[dict] = field(default_factory=list)


def _channel_groups(w: np.ndarray) -> list[np.ndarray]:
    return [w[..., c] for c in range(w.shape[-1])]


def _clip_at(w: np.ndarray, t: np.ndarray, symmetric: bool) -> np.ndarray:
    """Clip against per-channel thresholds broadcast over the last axis."""
    return np.sign(w) * np.minimum(np.abs(w), t) if symmetric else np.minimum(w, t)


def wcft_train(
    model: ToyConvRegressor,
    spec: ClipSpec,
    lr: float,
    x: np.ndarray,
    target: np.ndarray,
    bits: int = 8,
    alpha: float = 0.5,
    symmetric: bool = True,
) -> WcftResult:
    """Run the clipping fine-tuning schedule on the toy model.

    Plain SGD for I1 iterations, then per round: clip every channel-wise
    group at its beta threshold, and fine-tune with the straight-through
    mask (gradients cancel where the clip saturates).  Thresholds are
    recomputed from the current maxima at each round and frozen within it.
    Returns the final effective (clipped) weights quantized channel-wise
    with the piecewise codebook.
    """
    log: list[dict] = []

    def step(weights, grads, masks=None):
        for w, g, m in zip(weights, grads, masks or [None] * len(weights)):
            w -= lr * (g if m is None else g * m)

    it = 0
    for _ in range(spec.normal_iters):
        loss, grads = model.loss_and_grads(x, target)
        if not math.isfinite(loss):
            raise TrainingError("non-finite loss", it)
        step(model.weights, grads)
        it += 1
    log.append({"event": "normal", "iterations": spec.normal_iters})

    thresholds: list[np.ndarray] = []
    for r, (beta, ft_iters) in enumerate(zip(spec.betas, spec.finetune_iters)):
        thresholds = []
        for w in model.weights:
            t = np.array(
                [clip_threshold(g, beta, bits, alpha) for g in _channel_groups(w)]
            )
            thresholds.append(t)
        for w, t in zip(model.weights, thresholds):
            w[...] = _clip_at(w, t, symmetric)
        log.append(
            {
                "event": "clip",
                "round": r,
                "beta": beta,
                "sf_exponents": [
                    [scale_factor(g, alpha).exponent for g in _channel_groups(w)]
                    for w in model.weights
                ],
            }
        )
        for _ in range(ft_iters):
            eff = [_clip_at(w, t, symmetric) for w, t in zip(model.weights, thresholds)]
            loss, grads = model.loss_and_grads(x, target, weights=eff)
            if not math.isfinite(loss):
                raise TrainingError("non-finite loss", it)
            masks = [
                ste_mask(w, t, symmetric) for w, t in zip(model.weights, thresholds)
            ]
            step(model.weights, grads, masks)
            it += 1
        log.append({"event": "finetune", "round": r, "iterations": ft_iters})

    if thresholds:
        final = [_clip_at(w, t, symmetric) for w, t in zip(model.weights, thresholds)]
    else:
        final = [w.copy() for w in model.weights]

    quantized = []
    errors = []
    for layer, w in enumerate(final):
        t4 = Tensor(
            w.reshape(w.shape[0], 1, w.shape[1], w.shape[2]).astype(np.float32),
            ("I", "H", "W", "O"),
        )
        q = quantize_weights(t4, GroupScheme.CHANNEL_WISE, "nlq", bits)
        quantized.append(q)
        err = quant_error(t4, q)
        errors.append(err)
        log.append({"event": "quantize", "layer": layer, "quant_error": err.total})
    return WcftResult([w.copy() for w in final], quantized, errors, log)


def render_wcft_log(log: list[dict]) -> str:
    """Plain-text metrics log for a WCFT run."""
    lines = []
    for row in log:
        if row["event"] == "normal":
            lines.append(f"normal-training iterations={row['iterations']}")
        elif row["event"] == "clip":
            sf = "; ".join(
                ",".join(str(e) for e in layer) for layer in row["sf_exponents"]
            )
            lines.append(f"clip round={row['round']} beta={row['beta']:.6f} sf=[{sf}]")
        elif row["event"] == "finetune":
            lines.append(
                f"finetune round={row['round']} iterations={row['iterations']}"
            )
        elif row["event"] == "quantize":
            lines.append(
                f"quantize layer={row['layer']} quant_error={row['quant_error']:.9e}"
            )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Fractional-bit baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IcmlParams:
    """Parameters of the fractional-bit rule: n = -ceil(log2(mult * sigma
    * stepsize(bits)))."""

    alpha_mult: float = 3.0
    beta_bits: int = 8
    stepsize_table: tuple[tuple[int, float], ...] = ((8, 0.0308),)

    def stepsize(self) -> float:
        for bits, s in self.stepsize_table:
            if bits == self.beta_bits:
                return s
        raise ConfigError(f"no stepsize entry for {self.beta_bits}-bit")


ICML_LQ_PARAMS = IcmlParams(alpha_mult=3.0)
ICML_NLQ_PARAMS = IcmlParams(alpha_mult=1.5)


def icml_fractional_bits(values: np.ndarray, params: IcmlParams = ICML_LQ_PARAMS) -> int:
    """Number of fractional bits from the group's sample standard deviation."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ContractError("fractional-bit estimate requires >= 2 values")
    sigma = float(np.std(v, ddof=1))
    if sigma == 0.0:
        raise ContractError("zero standard deviation")
    s = params.alpha_mult * sigma * params.stepsize()
    return -math.ceil(math.log2(s))


def icml_quantize(values: np.ndarray, n: int, variant: str = "lq") -> np.ndarray:
    """Quantize unscaled values with the baseline grids.

    lq: uniform step 2**-n saturating at the 8-bit range edges; nlq: the
    three-piece codebook with boundaries 64/2**n and 64/2**n + 16/2**(n-2).
    """
    if not isinstance(n, (int, np.integer)):
        raise ContractError(f"fractional-bit count must be an integer, got {n!r}")
    if variant == "lq":
        bound = math.ldexp(1.0, 7 - n)
        cb = Codebook(bound, (Piece(0.0, bound, n),), True, 8)
    elif variant == "nlq":
        cb = icml_nlq_codebook(n)
    else:
        raise ConfigError(f"unknown baseline variant {variant!r}")
    return quantize_piecewise(np.asarray(values, dtype=np.float64), cb)
