"""Dynamic fixed-point scaling and piecewise quantization codebooks.

A group of values shares one power-of-two scaling factor sf = 2**e chosen
so that the scaled maximum magnitude lands in [alpha/2, alpha).  Scaled
values are quantized on a piecewise dyadic grid described by a Codebook
and stored as 8-bit level indices; decoding divides by sf again.

Every boundary and step in a shipped codebook is a dyadic rational, so
all arithmetic here is exact in float64: multiplication by powers of two
never rounds and round-half-away-from-zero is computed on exactly
representable intermediates.

Level layout for an N-bit signed codebook (two's-complement style): index
0 encodes -alpha, index 2**(N-1) encodes 0, index 2**N - 1 encodes the
largest representable value alpha - top_step.  Positive overflow
saturates to alpha - top_step, negative overflow to -alpha, which keeps
the level count at exactly 2**N.  One-sided codebooks (ReLU sources) use
the full index range for [0, alpha - top_step].
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .tensors import GroupScheme, QuantizedTensor, Tensor

# Audit-time storage range for sf exponents (4-bit signed).
AUDIT_SF_MIN = -8
AUDIT_SF_MAX = 7

ArrayLike = Union[float, np.ndarray]


def floor_log2(x: float) -> int:
    """Exact floor(log2(x)) for positive finite x."""
    if not (x > 0) or not math.isfinite(x):
        raise ContractError(f"floor_log2 requires a positive finite value, got {x}")
    _, exp = math.frexp(x)  # x = mant * 2**exp with mant in [0.5, 1)
    return exp - 1


def _pow2_exponent(alpha: float) -> int:
    mant, exp = math.frexp(alpha)
    if mant != 0.5:
        raise ContractError(f"dynamic range bound must be a power of two, got {alpha}")
    return exp - 1


def round_half_away(x: ArrayLike) -> ArrayLike:
    """Round to nearest with ties away from zero (the fixed-point rule)."""
    a = np.abs(x)
    r = np.floor(a + 0.5)
    out = np.where(np.asarray(x) < 0, -r, r) + 0.0  # normalize -0.0
    return out if isinstance(x, np.ndarray) else float(out)


# ---------------------------------------------------------------------------
# Scaling factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleFactor:
    """sf = 2**exponent; exponents outside the 4-bit audit range [-8, 7]
    are legal but reportable."""

    exponent: int

    @property
    def value(self) -> float:
        return math.ldexp(1.0, self.exponent)

    @property
    def inverse(self) -> float:
        return math.ldexp(1.0, -self.exponent)

    @property
    def in_audit_range(self) -> bool:
        return AUDIT_SF_MIN <= self.exponent <= AUDIT_SF_MAX


def scale_factor(group: np.ndarray, alpha: float = 0.5) -> ScaleFactor:
    """Scaling factor for one group: 2**(-floor(log2(max|g|)) - 1) * alpha.

    Guarantees max|g| * sf in [alpha/2, alpha) for non-zero groups.  An
    all-zero group gets the designated exponent 0 (any sf reproduces
    zeros exactly).
    """
    g = np.asarray(group)
    if g.size == 0:
        raise ContractError("scale_factor requires a non-empty group")
    if not np.all(np.isfinite(g)):
        raise NumericError("scale_factor requires finite values")
    m = float(np.max(np.abs(g)))
    if m == 0.0:
        return ScaleFactor(0)
    return ScaleFactor(-floor_log2(m) - 1 + _pow2_exponent(alpha))


# ---------------------------------------------------------------------------
# Codebooks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Piece:
    """Half-open magnitude interval [lower, upper) quantized with step
    2**-step_exponent."""

    lower: float
    upper: float
    step_exponent: int

    @property
    def step(self) -> float:
        return math.ldexp(1.0, -self.step_exponent)


@dataclass(frozen=True)
class Codebook:
    """Piecewise dyadic quantization grid under an N-bit budget."""

    alpha: float
    pieces: tuple[Piece, ...]
    signed: bool
    bits: int

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple(self.pieces))

    # -- derived geometry (meaningful once the codebook validates) ---------

    @property
    def lowers(self) -> np.ndarray:
        return np.array([p.lower for p in self.pieces])

    @property
    def step_exponents(self) -> np.ndarray:
        return np.array([p.step_exponent for p in self.pieces], dtype=np.int64)

    @property
    def top_step(self) -> float:
        return self.pieces[-1].step

    @property
    def max_value(self) -> float:
        """Largest representable value: alpha minus the top-piece step."""
        return self.alpha - self.top_step

    @property
    def min_value(self) -> float:
        return -self.alpha if self.signed else 0.0

    def piece_counts(self) -> list[int]:
        """Grid points per piece, (upper - lower) * 2**step_exponent."""
        counts = []
        for p in self.pieces:
            c = (p.upper - p.lower) * math.ldexp(1.0, p.step_exponent)
            counts.append(int(round(c)) if abs(c - round(c)) == 0 else -1)
        return counts

    @property
    def side_levels(self) -> int:
        return sum(self.piece_counts())

    @property
    def n_levels(self) -> int:
        side = self.side_levels
        return 2 * side if self.signed else side

    def level_offsets(self) -> np.ndarray:
        """Cumulative one-sided level count below each piece."""
        return np.concatenate([[0], np.cumsum(self.piece_counts())])


@dataclass
class CodebookReport:
    """Outcome of validate_codebook: level count plus any violations."""

    ok: bool
    level_count: int
    expected_levels: int
    violations: list[str]


def validate_codebook(cb: Codebook) -> CodebookReport:
    """Check partition structure, grid alignment and the exact bit budget
    sum((K_{i+1} - K_i) * 2**N_i) * (2 if signed else 1) == 2**bits."""
    violations: list[str] = []
    if not cb.pieces:
        violations.append("codebook has no pieces")
        return CodebookReport(False, 0, 2**cb.bits, violations)
    if cb.pieces[0].lower != 0.0:
        violations.append(f"first piece starts at {cb.pieces[0].lower}, expected 0")
    prev_upper = 0.0
    for i, p in enumerate(cb.pieces):
        if not (p.upper > p.lower >= 0.0):
            violations.append(f"piece {i} is not increasing: [{p.lower}, {p.upper})")
        if i > 0 and p.lower != prev_upper:
            kind = "gap" if p.lower > prev_upper else "overlap"
            violations.append(
                f"{kind} between piece {i - 1} upper {prev_upper}"
                f" and piece {i} lower {p.lower}"
            )
        step = p.step
        for edge_name, edge in (("lower", p.lower), ("upper", p.upper)):
            q = edge / step
            if q != math.floor(q):
                violations.append(
                    f"piece {i} {edge_name} boundary {edge} not aligned"
                    f" to step 2**-{p.step_exponent}"
                )
        prev_upper = p.upper
    if prev_upper != cb.alpha:
        violations.append(
            f"pieces end at {prev_upper}, expected the range bound {cb.alpha}"
        )
    counts = cb.piece_counts()
    if any(c < 0 for c in counts):
        violations.append("piece length is not an integer multiple of its step")
        return CodebookReport(False, 0, 2**cb.bits, violations)
    total = sum(counts) * (2 if cb.signed else 1)
    expected = 2**cb.bits
    if total != expected:
        violations.append(f"bit budget mismatch: {total} levels, expected {expected}")
    return CodebookReport(not violations, total, expected, violations)


def _require_valid(cb: Codebook) -> None:
    report = validate_codebook(cb)
    if not report.ok:
        raise ContractError(f"invalid codebook: {report.violations[0]}")


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError("quantization requires finite inputs")


def quantize_piecewise(sw: ArrayLike, cb: Codebook) -> ArrayLike:
    """Quantize scaled values on the codebook grid.

    The piece containing |sw| supplies the step; rounding is half away
    from zero.  Positive results saturate at alpha - top_step, negative
    results at -alpha (one-sided codebooks floor negatives at 0).
    """
    _require_valid(cb)
    x = np.asarray(sw, dtype=np.float64)
    _check_finite(x)
    a = np.abs(x)
    idx = np.clip(np.searchsorted(cb.lowers, a, side="right") - 1, 0, None)
    exps = cb.step_exponents[idx]
    r = np.floor(np.ldexp(a, exps) + 0.5)  # a >= 0: half-up == half-away
    mag = np.ldexp(r, -exps)
    neg = x < 0
    if cb.signed:
        pos_val = np.where(mag >= cb.alpha, cb.max_value, mag)
        neg_val = np.where(mag >= cb.alpha, cb.alpha, mag)
        out = np.where(neg, -neg_val, pos_val) + 0.0
    else:
        out = np.where(neg, 0.0, np.where(mag >= cb.alpha, cb.max_value, mag)) + 0.0
    return out if isinstance(sw, np.ndarray) else float(out)


def quantize_linear(
    sw: ArrayLike, bits: int, alpha: float = 0.5, signed: bool = True
) -> ArrayLike:
    """Uniform quantization round(sw * 2**bits) / 2**bits with saturation;
    identical to quantize_piecewise on a single-piece codebook."""
    cb = uniform_codebook(bits, alpha=alpha, signed=signed)
    return quantize_piecewise(sw, cb)


# ---------------------------------------------------------------------------
# Level coding
# ---------------------------------------------------------------------------


def _side_index(values: np.ndarray, cb: Codebook) -> np.ndarray:
    """Map non-negative on-grid magnitudes to one-sided level ordinals.

    alpha itself maps to side_levels (the virtual edge used by the
    negative mirror of signed codebooks).
    """
    offsets = cb.level_offsets()
    idx = np.clip(np.searchsorted(cb.lowers, values, side="right") - 1, 0, None)
    exps = cb.step_exponents[idx]
    j = offsets[idx] + np.ldexp(values - cb.lowers[idx], exps)
    j = np.where(values == cb.alpha, float(cb.side_levels), j)
    jj = np.rint(j)
    if np.any(j != jj):
        bad = np.asarray(values).ravel()[np.argmax((j != jj).ravel())]
        raise ContractError(f"value {bad!r} is not on the codebook grid")
    return jj.astype(np.int64)


def _side_value(ordinals: np.ndarray, cb: Codebook) -> np.ndarray:
    offsets = cb.level_offsets()
    j = np.asarray(ordinals, dtype=np.int64)
    idx = np.clip(np.searchsorted(offsets, j, side="right") - 1, 0, len(cb.pieces) - 1)
    vals = cb.lowers[idx] + np.ldexp((j - offsets[idx]).astype(np.float64),
                                     -cb.step_exponents[idx])
    return np.where(j == cb.side_levels, cb.alpha, vals)


def encode_level(v: ArrayLike, cb: Codebook) -> ArrayLike:
    """Ascending-order level index of a representable value (bijective over
    the 2**bits grid values); off-grid values are a contract error."""
    _require_valid(cb)
    if cb.n_levels > 256:
        raise ConfigError("level indices wider than 8 bits are not supported")
    x = np.asarray(v, dtype=np.float64)
    _check_finite(x)
    if cb.signed:
        half = cb.side_levels
        mag = _side_index(np.abs(x), cb)
        idx = np.where(x < 0, half - mag, half + mag)
        if np.any(x < -cb.alpha) or np.any(x > cb.max_value):
            raise ContractError("value outside the representable range")
    else:
        if np.any(x < 0) or np.any(x > cb.max_value):
            raise ContractError("value outside the representable range")
        idx = _side_index(x, cb)
    out = idx.astype(np.uint8)
    return out if isinstance(v, np.ndarray) else int(out)


def decode_level(l: ArrayLike, cb: Codebook) -> ArrayLike:
    """Inverse of encode_level."""
    _require_valid(cb)
    idx = np.asarray(l, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= cb.n_levels):
        raise ContractError(f"level index outside [0, {cb.n_levels})")
    if cb.signed:
        k = idx - cb.side_levels
        vals = np.where(k >= 0, _side_value(np.abs(k), cb),
                        -_side_value(np.abs(k), cb)) + 0.0
    else:
        vals = _side_value(idx, cb)
    return vals if isinstance(l, np.ndarray) else float(vals)


def enumerate_levels(cb: Codebook) -> np.ndarray:
    """All representable values in ascending index order."""
    return decode_level(np.arange(cb.n_levels), cb)


# ---------------------------------------------------------------------------
# Dequantization
# ---------------------------------------------------------------------------


def dequantize(q: QuantizedTensor) -> Tensor:
    """Decode level indices and divide by each group's scaling factor."""
    if q.lut is not None:
        if np.any(q.levels >= q.lut.size):
            raise ContractError("level index outside the attached value table")
        scaled = q.lut[q.levels]
    elif q.range_sel is not None:
        signed, bits = parse_mux_family(q.codebook_id)
        scaled = np.empty(q.levels.shape, dtype=np.float64)
        for c in range(q.n_channels):
            cb = mux_codebook(int(q.range_sel[c]), bits,
                              alpha=0.5 if signed else 1.0, signed=signed)
            scaled[..., c] = decode_level(q.levels[..., c], cb)
    else:
        cb = get_codebook(q.codebook_id)
        scaled = decode_level(q.levels, cb)
    if q.scheme is GroupScheme.CHANNEL_WISE:
        exps = q.sf_exponents.reshape((1,) * (scaled.ndim - 1) + (-1,))
        out = np.ldexp(scaled, -exps)
    else:
        out = np.ldexp(scaled, -int(q.sf_exponents[0]))
    return Tensor(out, q.axis_roles)


# ---------------------------------------------------------------------------
# Shipped codebook builders and catalog
# ---------------------------------------------------------------------------


def uniform_codebook(bits: int = 8, alpha: float = 0.5, signed: bool = True) -> Codebook:
    """Single uniform piece [0, alpha) with step 2**-bits."""
    return Codebook(alpha, (Piece(0.0, alpha, bits),), signed, bits)


def weight_nlq_codebook(bits: int = 8, alpha: float = 0.5) -> Codebook:
    """Weight codebook: steps 2**-(N-1) on [alpha/4, alpha), 2**-N on
    [alpha/8, alpha/4), 2**-(N+2) on [0, alpha/8)."""
    return Codebook(
        alpha,
        (
            Piece(0.0, alpha / 8, bits + 2),
            Piece(alpha / 8, alpha / 4, bits),
            Piece(alpha / 4, alpha, bits - 1),
        ),
        True,
        bits,
    )


def mux_codebook(range_sel: int, bits: int = 8, alpha: float = 0.5,
                 signed: bool = True) -> Codebook:
    """Range-multiplexed activation codebook for one 2-bit selection.

    Selection 3 is uniform over [0, alpha).  Lower selections shrink the
    top of the range (the channel maximum cannot reach it) and spend the
    freed levels on one extra precision bit for the intervals with the
    highest coding-gain return, widest first: [0, alpha/8) and
    [alpha/8, alpha/4) before [alpha/4, 3*alpha/8).
    """
    if range_sel == 3:
        pieces = (Piece(0.0, alpha, bits),)
        bound = alpha
    elif range_sel == 2:
        bound = 7 * alpha / 8
        pieces = (
            Piece(0.0, alpha / 8, bits),
            Piece(alpha / 8, alpha / 4, bits + 1),
            Piece(alpha / 4, bound, bits),
        )
    elif range_sel == 1:
        bound = 3 * alpha / 4
        pieces = (
            Piece(0.0, alpha / 4, bits + 1),
            Piece(alpha / 4, bound, bits),
        )
    elif range_sel == 0:
        bound = 5 * alpha / 8
        pieces = (
            Piece(0.0, 3 * alpha / 8, bits + 1),
            Piece(3 * alpha / 8, bound, bits),
        )
    else:
        raise ContractError(f"range selection must be 0..3, got {range_sel}")
    return Codebook(bound, pieces, signed, bits)


def icml_nlq_codebook(n: int, bits: int = 8) -> Codebook:
    """Three-piece baseline codebook on unscaled values: step 2**-n below
    64/2**n, then 2**-(n-2) and 2**-(n-3) above."""
    b0 = math.ldexp(64.0, -n)
    b1 = b0 + math.ldexp(16.0, -(n - 2))
    top = b1 + math.ldexp(48.0, -(n - 3))
    return Codebook(
        top,
        (Piece(0.0, b0, n), Piece(b0, b1, n - 2), Piece(b1, top, n - 3)),
        True,
        bits,
    )


_CATALOG: dict[str, Codebook] = {}


def register_codebook(codebook_id: str, cb: Codebook) -> None:
    report = validate_codebook(cb)
    if not report.ok:
        raise ContractError(
            f"refusing to register invalid codebook {codebook_id!r}:"
            f" {report.violations[0]}"
        )
    _CATALOG[codebook_id] = cb


def get_codebook(codebook_id: str) -> Codebook:
    try:
        return _CATALOG[codebook_id]
    except KeyError:
        raise ContractError(f"unknown codebook id {codebook_id!r}") from None


def codebook_ids() -> list[str]:
    return sorted(_CATALOG)


def mux_family_id(signed: bool, bits: int = 8) -> str:
    return f"act-mux-{'signed' if signed else 'relu'}-n{bits}"


def parse_mux_family(codebook_id: str) -> tuple[bool, int]:
    m = re.match(r"^act-mux-(signed|relu)-n(\d+)$", codebook_id)
    if not m:
        raise ContractError(f"{codebook_id!r} is not a mux family id")
    return m.group(1) == "signed", int(m.group(2))


def catalog_text() -> str:
    """Dump the registered codebooks as a stable text table."""
    lines = []
    for cid in codebook_ids():
        cb = _CATALOG[cid]
        pieces = ", ".join(
            f"[{p.lower:g},{p.upper:g})@2^-{p.step_exponent}" for p in cb.pieces
        )
        lines.append(
            f"{cid}: alpha={cb.alpha:g} signed={cb.signed}"
            f" bits={cb.bits} levels={cb.n_levels} pieces={pieces}"
        )
    return "\n".join(lines) + "\n"


def _register_shipped(bits: int = 8) -> None:
    register_codebook(f"weight-nlq-n{bits}", weight_nlq_codebook(bits))
    register_codebook(f"weight-lq-n{bits}", uniform_codebook(bits, 0.5, True))
    register_codebook(f"act-uniform-signed-n{bits}", uniform_codebook(bits, 0.5, True))
    register_codebook(f"act-uniform-relu-n{bits}", uniform_codebook(bits, 1.0, False))
    for sel in range(4):
        register_codebook(
            f"act-mux{sel}-signed-n{bits}", mux_codebook(sel, bits, 0.5, True)
        )
        register_codebook(
            f"act-mux{sel}-relu-n{bits}", mux_codebook(sel, bits, 1.0, False)
        )
    register_codebook("icml-nlq", icml_nlq_codebook(3, bits))


_register_shipped()
