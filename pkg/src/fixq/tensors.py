"""Tensor containers, grouping views, and the on-disk bundle format.

Weights are 4-D with axis roles (I, H, W, O); activations are 3-D with
(OH, OW, O).  Bundles are directories holding one JSON manifest plus one
raw little-endian binary per payload; serialization is deterministic so
that write(read(path)) reproduces the original bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import BundleFormatError, ContractError

WEIGHT_ROLES = ("I", "H", "W", "O")
ACTIVATION_ROLES = ("OH", "OW", "O")

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")
MANIFEST_NAME = "manifest.json"


class GroupScheme(Enum):
    """How elements share one scaling factor."""

    CHANNEL_WISE = "cw"
    LAYER_WISE = "lw"


class Tensor:
    """Dense real-valued array with named axis roles.

    data is stored row-major; float32 is the interchange dtype, float64 is
    accepted for exact intermediate results (e.g. fixed-point inference
    outputs) but can only be written to a bundle when losslessly castable.
    """

    def __init__(self, data: np.ndarray, axis_roles: tuple[str, ...]):
        data = np.ascontiguousarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        axis_roles = tuple(axis_roles)
        if axis_roles not in (WEIGHT_ROLES, ACTIVATION_ROLES):
            raise ContractError(f"unsupported axis roles {axis_roles!r}")
        if data.ndim != len(axis_roles):
            raise ContractError(
                f"rank {data.ndim} does not match axis roles {axis_roles!r}"
            )
        if any(d < 1 for d in data.shape):
            raise ContractError(f"all dims must be >= 1, got {data.shape}")
        self.data = data
        self.axis_roles = axis_roles

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_weight(self) -> bool:
        return self.axis_roles == WEIGHT_ROLES

    @property
    def n_channels(self) -> int:
        """Size of the O axis (always the last axis)."""
        return self.data.shape[-1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor)
            and self.axis_roles == other.axis_roles
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, roles={'x'.join(self.axis_roles)})"


def weight_tensor(data: np.ndarray) -> Tensor:
    return Tensor(data, WEIGHT_ROLES)


def activation_tensor(data: np.ndarray) -> Tensor:
    return Tensor(data, ACTIVATION_ROLES)


def group(t: Tensor, scheme: GroupScheme) -> list[np.ndarray]:
    """Split a tensor into the views that share one scaling factor.

    Channel-wise grouping slices along the O axis (one view per output
    channel for weights, one per feature-map channel for activations);
    layer-wise returns a single view over everything.  Views are disjoint
    and cover the tensor.
    """
    if not isinstance(t, Tensor):
        raise ContractError("group() expects a Tensor")
    if scheme is GroupScheme.LAYER_WISE:
        return [t.data.reshape(-1)]
    # O is the last axis for both weight and activation role sets.
    moved = np.moveaxis(t.data, -1, 0)
    return [moved[c].reshape(-1) for c in range(t.n_channels)]


@dataclass
class QuantizedTensor:
    """8-bit level indices plus per-group power-of-two scaling exponents.

    sf_exponents holds e with sf = 2**e, one per group (one entry for
    layer-wise).  range_sel carries the per-channel 2-bit codebook
    selection for range-multiplexed activations.  lut is the decoded-value
    table for data-dependent (Lloyd) codebooks.
    """

    levels: np.ndarray
    axis_roles: tuple[str, ...]
    scheme: GroupScheme
    codebook_id: str
    sf_exponents: np.ndarray
    range_sel: Optional[np.ndarray] = None
    lut: Optional[np.ndarray] = None

    def __post_init__(self):
        self.levels = np.ascontiguousarray(self.levels, dtype=np.uint8)
        self.axis_roles = tuple(self.axis_roles)
        self.sf_exponents = np.ascontiguousarray(self.sf_exponents, dtype=np.int32)
        if self.axis_roles not in (WEIGHT_ROLES, ACTIVATION_ROLES):
            raise ContractError(f"unsupported axis roles {self.axis_roles!r}")
        if self.levels.ndim != len(self.axis_roles):
            raise ContractError("level array rank does not match axis roles")
        n_groups = (
            self.levels.shape[-1] if self.scheme is GroupScheme.CHANNEL_WISE else 1
        )
        if self.sf_exponents.shape != (n_groups,):
            raise ContractError(
                f"expected {n_groups} sf exponents, got {self.sf_exponents.shape}"
            )
        if self.range_sel is not None:
            self.range_sel = np.ascontiguousarray(self.range_sel, dtype=np.uint8)
            if self.axis_roles != ACTIVATION_ROLES:
                raise ContractError("range selection is only valid for activations")
            if self.range_sel.shape != (self.levels.shape[-1],):
                raise ContractError("one range selection per channel required")
            if self.range_sel.max(initial=0) > 3:
                raise ContractError("range selection must fit in 2 bits")
        if self.lut is not None:
            self.lut = np.ascontiguousarray(self.lut, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.levels.shape

    @property
    def n_channels(self) -> int:
        return self.levels.shape[-1]

    def __eq__(self, other) -> bool:
        def opt_eq(a, b):
            if (a is None) != (b is None):
                return False
            return a is None or np.array_equal(a, b)

        return (
            isinstance(other, QuantizedTensor)
            and self.axis_roles == other.axis_roles
            and self.scheme == other.scheme
            and self.codebook_id == other.codebook_id
            and np.array_equal(self.levels, other.levels)
            and np.array_equal(self.sf_exponents, other.sf_exponents)
            and opt_eq(self.range_sel, other.range_sel)
            and opt_eq(self.lut, other.lut)
        )


Entry = Union[Tensor, QuantizedTensor]


@dataclass
class TensorBundle:
    """Named tensors plus optional calibration profiles and a network
    description, as stored in one bundle directory."""

    entries: dict[str, Entry] = field(default_factory=dict)
    profiles: dict[str, dict] = field(default_factory=dict)
    network: list[dict] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TensorBundle)
            and self.entries == other.entries
            and self.profiles == other.profiles
            and self.network == other.network
        )


def _check_name(name: str) -> str:
    if not _NAME_RE.match(name):
        raise BundleFormatError(f"entry {name!r}: invalid name")
    return name


def float_to_text(x: float) -> str:
    """Exact, deterministic text form for a float manifest field."""
    return float(x).hex()


def float_from_text(s: str) -> float:
    return float.fromhex(s)


def _write_payload(path: Path, data: bytes) -> None:
    path.write_bytes(data)


def _f32_bytes(name: str, arr: np.ndarray) -> bytes:
    if arr.dtype == np.float64:
        cast = arr.astype(np.float32)
        if not np.array_equal(cast.astype(np.float64), arr):
            raise BundleFormatError(
                f"entry {name!r}: float64 data is not exactly float32-representable"
            )
        arr = cast
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _sf_bytes(name: str, exponents: np.ndarray) -> bytes:
    if exponents.min(initial=0) < -128 or exponents.max(initial=0) > 127:
        raise BundleFormatError(f"entry {name!r}: sf exponent outside int8 range")
    return exponents.astype("<i1").tobytes()


def write_bundle(bundle: TensorBundle, path: str | Path) -> None:
    """Write a bundle directory: manifest.json plus one raw binary per
    payload.  Output bytes are a deterministic function of the bundle."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"entries": []}
    for name, entry in bundle.entries.items():
        _check_name(name)
        rec: dict = {"name": name, "shape": list(entry.shape)}
        if isinstance(entry, Tensor):
            rec["dtype"] = "f32"
            rec["axis_roles"] = list(entry.axis_roles)
            rec["data_file"] = f"{name}.f32"
            _write_payload(root / rec["data_file"], _f32_bytes(name, entry.data))
        elif isinstance(entry, QuantizedTensor):
            rec["dtype"] = "q8"
            rec["axis_roles"] = list(entry.axis_roles)
            rec["scheme"] = entry.scheme.value
            rec["codebook_id"] = entry.codebook_id
            rec["data_file"] = f"{name}.q8"
            rec["sf_file"] = f"{name}.sf"
            _write_payload(root / rec["data_file"], entry.levels.tobytes())
            _write_payload(root / rec["sf_file"], _sf_bytes(name, entry.sf_exponents))
            if entry.range_sel is not None:
                rec["mux_file"] = f"{name}.mux"
                _write_payload(root / rec["mux_file"], entry.range_sel.tobytes())
            if entry.lut is not None:
                rec["lut_file"] = f"{name}.lut"
                _write_payload(
                    root / rec["lut_file"],
                    entry.lut.astype("<f8").tobytes(),
                )
        else:
            raise BundleFormatError(f"entry {name!r}: unknown entry type")
        manifest["entries"].append(rec)
    if bundle.profiles:
        manifest["profiles"] = bundle.profiles
    if bundle.network:
        manifest["network"] = bundle.network
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (root / MANIFEST_NAME).write_text(text)


def _read_payload(root: Path, name: str, file_name: str) -> bytes:
    p = root / file_name
    if not p.is_file():
        raise BundleFormatError(f"entry {name!r}: missing payload file {file_name}")
    return p.read_bytes()


def read_bundle(path: str | Path) -> TensorBundle:
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise BundleFormatError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise BundleFormatError(f"manifest does not parse: {e}") from e

    bundle = TensorBundle()
    for rec in manifest.get("entries", []):
        name = _check_name(rec["name"])
        shape = tuple(int(d) for d in rec["shape"])
        roles = tuple(rec["axis_roles"])
        n = int(np.prod(shape)) if shape else 0
        dtype = rec.get("dtype")
        if dtype == "f32":
            raw = _read_payload(root, name, rec["data_file"])
            if len(raw) != 4 * n:
                raise BundleFormatError(
                    f"entry {name!r}: expected {4 * n} bytes, found {len(raw)}"
                )
            data = np.frombuffer(raw, dtype="<f4").reshape(shape)
            bundle.entries[name] = Tensor(data.copy(), roles)
        elif dtype == "q8":
            if "sf_file" not in rec:
                raise BundleFormatError(f"entry {name!r}: q8 entry without sf file")
            if "codebook_id" not in rec:
                raise BundleFormatError(f"entry {name!r}: q8 entry without codebook id")
            raw = _read_payload(root, name, rec["data_file"])
            if len(raw) != n:
                raise BundleFormatError(
                    f"entry {name!r}: expected {n} bytes, found {len(raw)}"
                )
            levels = np.frombuffer(raw, dtype=np.uint8).reshape(shape)
            scheme = GroupScheme(rec.get("scheme", "cw"))
            n_groups = shape[-1] if scheme is GroupScheme.CHANNEL_WISE else 1
            sf_raw = _read_payload(root, name, rec["sf_file"])
            if len(sf_raw) != n_groups:
                raise BundleFormatError(
                    f"entry {name!r}: expected {n_groups} sf exponents,"
                    f" found {len(sf_raw)}"
                )
            sf = np.frombuffer(sf_raw, dtype="<i1").astype(np.int32)
            range_sel = None
            if "mux_file" in rec:
                mux_raw = _read_payload(root, name, rec["mux_file"])
                if len(mux_raw) != shape[-1]:
                    raise BundleFormatError(
                        f"entry {name!r}: expected {shape[-1]} mux bytes,"
                        f" found {len(mux_raw)}"
                    )
                range_sel = np.frombuffer(mux_raw, dtype=np.uint8).copy()
            lut = None
            if "lut_file" in rec:
                lut_raw = _read_payload(root, name, rec["lut_file"])
                if len(lut_raw) % 8:
                    raise BundleFormatError(f"entry {name!r}: bad lut payload length")
                lut = np.frombuffer(lut_raw, dtype="<f8").copy()
            bundle.entries[name] = QuantizedTensor(
                levels.copy(), roles, scheme, rec["codebook_id"], sf, range_sel, lut
            )
        else:
            raise BundleFormatError(f"entry {name!r}: unknown dtype {dtype!r}")
    bundle.profiles = manifest.get("profiles", {})
    bundle.network = manifest.get("network", [])
    return bundle
