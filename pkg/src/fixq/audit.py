"""Memory and energy accounting for quantized networks.

Costs are tracked internally in bits (scaling factors are half a byte,
multiplexer selections a quarter) and in integer milli-picojoules, so the
published ratios (8-bit storage is a quarter of 32-bit; an int8 MAC costs
exactly one twentieth of an fp32 MAC) hold exactly.  Reported megabytes
are decimal (1e6 bytes).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import ConfigError, ContractError

_MODES = ("original", "proposed")

WEIGHT_BITS_ORIGINAL = 32
WEIGHT_BITS_PROPOSED = 8
SF_BITS = 4  # 4-bit exponents are enough for every observed scaling factor
MUX_BITS = 2


@dataclass(frozen=True)
class LayerCfg:
    """Dimensions and accounting flags of one convolution layer.

    has_sf is false for final transform layers whose outputs are rounded
    to integers directly; has_mux is true only for main-path activations;
    excluded layers are tagged but not counted (mirrors excluding the
    normalization parameters from external comparisons).
    """

    name: str
    i: int
    h: int
    w: int
    o: int
    stride: int = 1
    kind: str = "conv"  # conv | conv_transpose
    has_sf: bool = True
    has_mux: bool = False
    excluded: bool = False

    def weight_elems(self) -> int:
        return self.i * self.h * self.w * self.o


@dataclass(frozen=True)
class NetworkConfig:
    """Ordered layer list; the paper's encoder has 13 layers (analysis,
    hyper-analysis, hyper-synthesis) and its decoder 10, but any layer
    list can be audited."""

    layers: tuple[LayerCfg, ...]
    role: str = "encoder"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.role not in ("encoder", "decoder"):
            raise ConfigError(f"role must be encoder or decoder, got {self.role!r}")

    def counted(self) -> list[LayerCfg]:
        return [l for l in self.layers if not l.excluded]


def activation_dims(
    cfg: NetworkConfig, input_hw: tuple[int, int]
) -> list[tuple[int, int, int]]:
    """Per-layer output feature-map dimensions (OH, OW, O) walked from the
    input size: strided convolutions shrink by ceil(H / stride),
    transposed ones grow by the stride."""
    h, w = input_hw
    dims = []
    for layer in cfg.layers:
        if layer.kind == "conv_transpose":
            h, w = h * layer.stride, w * layer.stride
        else:
            h, w = -(-h // layer.stride), -(-w // layer.stride)
        dims.append((h, w, layer.o))
    return dims


def _check_mode(mode: str) -> None:
    if mode not in _MODES:
        raise ConfigError(f"mode must be one of {_MODES}, got {mode!r}")


def weight_cost_bits(cfg: NetworkConfig, mode: str) -> int:
    """Total weight storage in bits; proposed adds one 4-bit scaling
    factor per output channel on top of 8-bit elements."""
    _check_mode(mode)
    layers = cfg.counted()
    if mode == "original":
        return sum(l.weight_elems() * WEIGHT_BITS_ORIGINAL for l in layers)
    return sum(
        l.weight_elems() * WEIGHT_BITS_PROPOSED + l.o * SF_BITS for l in layers
    )


def weight_cost(cfg: NetworkConfig, mode: str) -> float:
    """Weight storage in bytes (fractional at half-byte granularity)."""
    return weight_cost_bits(cfg, mode) / 8


def weight_sf_bits(cfg: NetworkConfig) -> int:
    return sum(l.o * SF_BITS for l in cfg.counted())


def activation_cost_bits(
    cfg: NetworkConfig, input_hw: tuple[int, int], mode: str
) -> int:
    """Total activation storage in bits for layer-by-layer execution."""
    _check_mode(mode)
    dims = activation_dims(cfg, input_hw)
    total = 0
    for layer, (oh, ow, o) in zip(cfg.layers, dims):
        if layer.excluded:
            continue
        if mode == "original":
            total += oh * ow * o * WEIGHT_BITS_ORIGINAL
        else:
            total += oh * ow * o * WEIGHT_BITS_PROPOSED
            if layer.has_sf:
                total += o * SF_BITS
            if layer.has_mux:
                total += o * MUX_BITS
    return total


def activation_cost(cfg: NetworkConfig, input_hw: tuple[int, int], mode: str) -> float:
    return activation_cost_bits(cfg, input_hw, mode) / 8


def activation_sf_bits(cfg: NetworkConfig) -> int:
    return sum(l.o * SF_BITS for l in cfg.counted() if l.has_sf)


def activation_mux_bits(cfg: NetworkConfig) -> int:
    return sum(l.o * MUX_BITS for l in cfg.counted() if l.has_mux)


# ---------------------------------------------------------------------------
# Mean-removal accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeanRemovalReport:
    elems: int
    bits_before: int
    bits_after: int

    @property
    def saving(self) -> float:
        return 1.0 - self.bits_after / self.bits_before


def mean_removal_report(
    channel_dims: tuple[int, int], before_bits: int, mean_bits: int = 8
) -> MeanRemovalReport:
    """Bit cost of one channel before and after offset-coding against a
    transmitted mean: elements save one bit each, the mean costs 8.

    The saving can be negative for tiny channels; it is reported as-is.
    """
    if before_bits < 1:
        raise ContractError("per-element bit-width must be >= 1")
    elems = channel_dims[0] * channel_dims[1]
    return MeanRemovalReport(
        elems, elems * before_bits, elems * (before_bits - 1) + mean_bits
    )


# ---------------------------------------------------------------------------
# Energy model
# ---------------------------------------------------------------------------


def _millipj(pj: float) -> int:
    m = round(pj * 1000)
    if not math.isclose(m, pj * 1000, rel_tol=0, abs_tol=1e-6):
        raise ConfigError(f"energy cost {pj} pJ is not a whole milli-pJ")
    return int(m)


@dataclass(frozen=True)
class EnergyTable:
    """Per-operation energy in picojoules (45 nm estimates)."""

    int8_add: float = 0.03
    int8_mult: float = 0.2
    int32_add: float = 0.1
    int32_mult: float = 3.1
    fp16_add: float = 0.4
    fp16_mult: float = 1.1
    fp32_add: float = 0.9
    fp32_mult: float = 3.7

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) <= 0:
                raise ConfigError(f"energy cost {name} must be positive")

    def mac_millipj(self, precision: str) -> int:
        """Exact multiply+add cost in integer milli-picojoules."""
        try:
            add = getattr(self, f"{precision}_add")
            mult = getattr(self, f"{precision}_mult")
        except AttributeError:
            raise ConfigError(f"unknown precision {precision!r}") from None
        return _millipj(add) + _millipj(mult)

    def mac_pj(self, precision: str) -> float:
        return self.mac_millipj(precision) / 1000


@dataclass(frozen=True)
class EnergyEstimate:
    macs: int
    millipj: int

    @property
    def picojoules(self) -> float:
        return self.millipj / 1000


def mac_count(cfg: NetworkConfig, input_hw: tuple[int, int]) -> int:
    dims = activation_dims(cfg, input_hw)
    return sum(
        oh * ow * o * layer.i * layer.h * layer.w
        for layer, (oh, ow, o) in zip(cfg.layers, dims)
        if not layer.excluded
    )


def energy_estimate(
    cfg: NetworkConfig,
    input_hw: tuple[int, int],
    precision: str = "int8",
    table: EnergyTable = EnergyTable(),
) -> EnergyEstimate:
    """MAC-count energy model: every output element costs I*H*W
    multiply-accumulates at the chosen precision."""
    macs = mac_count(cfg, input_hw)
    return EnergyEstimate(macs, macs * table.mac_millipj(precision))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _mb(bits: int) -> float:
    return bits / 8 / 1e6


def audit_summary(cfg: NetworkConfig, input_hw: tuple[int, int]) -> dict:
    """Machine-readable audit: weight/activation storage (original and
    proposed, with sf and mux overheads) plus the energy comparison."""
    w_orig = weight_cost_bits(cfg, "original")
    w_prop = weight_cost_bits(cfg, "proposed")
    a_orig = activation_cost_bits(cfg, input_hw, "original")
    a_prop = activation_cost_bits(cfg, input_hw, "proposed")
    table = EnergyTable()
    macs = mac_count(cfg, input_hw)
    return {
        "role": cfg.role,
        "layers": len(cfg.layers),
        "excluded": [l.name for l in cfg.layers if l.excluded],
        "weight": {
            "original_mb": _mb(w_orig),
            "w_mb": _mb(w_prop - weight_sf_bits(cfg)),
            "sf_mb": _mb(weight_sf_bits(cfg)),
            "proposed_mb": _mb(w_prop),
            "saving": 1.0 - w_prop / w_orig if w_orig else 0.0,
        },
        "activation": {
            "original_mb": _mb(a_orig),
            "o_mb": _mb(a_prop - activation_sf_bits(cfg) - activation_mux_bits(cfg)),
            "sf_mb": _mb(activation_sf_bits(cfg)),
            "mux_mb": _mb(activation_mux_bits(cfg)),
            "proposed_mb": _mb(a_prop),
            "saving": 1.0 - a_prop / a_orig if a_orig else 0.0,
        },
        "energy": {
            "macs": macs,
            "int8_pj": energy_estimate(cfg, input_hw, "int8", table).picojoules,
            "fp32_pj": energy_estimate(cfg, input_hw, "fp32", table).picojoules,
            "mac_int8_pj": table.mac_pj("int8"),
            "mac_fp32_pj": table.mac_pj("fp32"),
        },
    }


def render_audit(cfg: NetworkConfig, input_hw: tuple[int, int]) -> str:
    """Text report mirroring the memory-cost table columns (w, sf_w,
    total | o, sf_o, total) plus an energy block."""
    s = audit_summary(cfg, input_hw)
    w, a, e = s["weight"], s["activation"], s["energy"]
    lines = [
        f"{cfg.role} memory cost (MB, decimal)",
        f"  component      w        sf_w     total    o        sf_o+mux total",
        "  original     {:>8.3f} {:>8} {:>8.3f} {:>8.3f} {:>8} {:>8.3f}".format(
            w["original_mb"], "-", w["original_mb"], a["original_mb"], "-",
            a["original_mb"],
        ),
        "  proposed     {:>8.3f} {:>8.4f} {:>8.3f} {:>8.3f} {:>8.4f} {:>8.3f}".format(
            w["w_mb"], w["sf_mb"], w["proposed_mb"], a["o_mb"],
            a["sf_mb"] + a["mux_mb"], a["proposed_mb"],
        ),
        f"  weight saving {100 * w['saving']:.2f}%"
        f"  activation saving {100 * a['saving']:.2f}%",
    ]
    if s["excluded"]:
        lines.append(f"  excluded from comparison: {', '.join(s['excluded'])}")
    lines += [
        "energy (MAC model)",
        f"  MACs {e['macs']}",
        f"  int8 {e['int8_pj']:.2f} pJ ({e['mac_int8_pj']:.2f} pJ/MAC)",
        f"  fp32 {e['fp32_pj']:.2f} pJ ({e['mac_fp32_pj']:.2f} pJ/MAC)",
        f"  ratio {e['fp32_pj'] / e['int8_pj']:.1f}x" if e["macs"] else "  ratio -",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Config (de)serialization for the CLI
# ---------------------------------------------------------------------------


def config_from_dict(doc: dict) -> NetworkConfig:
    layers = []
    for rec in doc.get("layers", []):
        try:
            layers.append(
                LayerCfg(
                    name=rec["name"],
                    i=int(rec["i"]),
                    h=int(rec["h"]),
                    w=int(rec["w"]),
                    o=int(rec["o"]),
                    stride=int(rec.get("stride", 1)),
                    kind=rec.get("kind", "conv"),
                    has_sf=bool(rec.get("has_sf", True)),
                    has_mux=bool(rec.get("has_mux", False)),
                    excluded=bool(rec.get("excluded", False)),
                )
            )
        except KeyError as e:
            raise ConfigError(f"layer record missing field {e}") from None
    if not layers:
        raise ConfigError("network config has no layers")
    return NetworkConfig(tuple(layers), doc.get("role", "encoder"))


def load_config(path: str) -> NetworkConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"network config does not parse: {e}") from e
    return config_from_dict(doc)
