"""Dense 3D grid containers and the ``.vh``/``.vraw`` file format.

Arrays are stored with shape ``(D, H, W)`` in C order, so element
``(z, y, x)`` lives at flat offset ``z*H*W + y*W + x``.  All containers
are immutable: the backing arrays are marked read-only on construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Volume3D",
    "ComplexVolume3D",
    "LabelMap",
    "VolumeFormatError",
    "normalize_unit",
    "load_volume",
    "save_volume",
    "load_labels",
    "save_labels",
    "header_paths",
    "read_header",
    "write_payload",
    "read_payload",
]

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u16": np.dtype("<u2")}


class VolumeFormatError(ValueError):
    """Raised for malformed headers, payloads or container contents."""


def _check_dims(dims: Sequence[int]) -> tuple[int, int, int]:
    if len(dims) != 3:
        raise VolumeFormatError(f"expected 3 dims, got {len(dims)}")
    out = tuple(int(d) for d in dims)
    if any(d < 1 for d in out):
        raise VolumeFormatError(f"dims must be >= 1, got {out}")
    return out  # type: ignore[return-value]


def _check_spacing(spacing: Sequence[float]) -> tuple[float, float, float]:
    if len(spacing) != 3:
        raise VolumeFormatError(f"expected 3 spacing values, got {len(spacing)}")
    out = tuple(float(s) for s in spacing)
    if not all(np.isfinite(s) and s > 0 for s in out):
        raise VolumeFormatError(f"spacing must be finite and > 0, got {out}")
    return out  # type: ignore[return-value]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume3D:
    """Real scalar field on a voxel grid.

    ``data`` has shape ``(D, H, W)`` and ``spacing`` is ``(sz, sy, sx)`` in mm.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float64, copy=True)
        if a.ndim != 3:
            raise VolumeFormatError(f"volume data must be 3D, got shape {a.shape}")
        _check_dims(a.shape)
        if not np.all(np.isfinite(a)):
            raise VolumeFormatError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(a))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data, self.spacing)


@dataclass(frozen=True)
class ComplexVolume3D:
    """Complex field with the same layout as :class:`Volume3D`."""

    data: np.ndarray

    def __post_init__(self):
        a = np.array(self.data, dtype=np.complex128, copy=True)
        if a.ndim != 3:
            raise VolumeFormatError(f"volume data must be 3D, got shape {a.shape}")
        _check_dims(a.shape)
        if not np.all(np.isfinite(a)):
            raise VolumeFormatError("complex volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class LabelMap:
    """Integer segmentation on a voxel grid; 0 is background."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    label_set: frozenset = field(init=False)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3:
            raise VolumeFormatError(f"label data must be 3D, got shape {raw.shape}")
        _check_dims(raw.shape)
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise VolumeFormatError("labels must be integral")
        elif raw.dtype.kind not in "iub":
            raise VolumeFormatError(f"unsupported label dtype {raw.dtype}")
        if raw.size and raw.min() < 0:
            raise VolumeFormatError("labels must be non-negative")
        a = raw.astype(np.int64)
        object.__setattr__(self, "labels", _frozen(a))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "label_set", frozenset(int(v) for v in np.unique(a)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


def normalize_unit(v: Volume3D) -> Volume3D:
    """Global min-max rescale to ``[0, 1]``."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if not hi > lo:
        raise VolumeFormatError("degenerate intensity range")
    out = (v.data - lo) / (hi - lo)
    # pin the extremes; the affine map can land one ulp off 1.0
    out[v.data == hi] = 1.0
    out[v.data == lo] = 0.0
    return v.with_data(out)


# --- file format -----------------------------------------------------------

def header_paths(path) -> tuple[Path, Path]:
    """Return ``(<name>.vh, <name>.vraw)`` for a path given with or without suffix."""
    p = Path(path)
    if p.suffix in (".vh", ".vraw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".vh"), p.with_name(p.name + ".vraw")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def read_header(path) -> dict:
    hpath, _ = header_paths(path)
    try:
        header = json.loads(hpath.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"{hpath}: unreadable header ({exc})") from exc
    if not isinstance(header, dict):
        raise VolumeFormatError(f"{hpath}: header must be a JSON object")
    for key in ("dims", "spacing", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"{hpath}: missing header key '{key}'")
    if header["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"{hpath}: unknown dtype tag '{header['dtype']}'")
    if header.get("byte_order", "little") != "little":
        raise VolumeFormatError(f"{hpath}: only little-endian payloads are supported")
    header["dims"] = list(_check_dims(header["dims"]))
    header["spacing"] = list(_check_spacing(header["spacing"]))
    header.setdefault("components", 1)
    return header


def read_payload(path) -> tuple[dict, np.ndarray]:
    """Read header and payload; the array has shape ``(components, D, H, W)``."""
    header = read_header(path)
    _, rpath = header_paths(path)
    dt = _DTYPES[header["dtype"]]
    comps = int(header["components"])
    if comps < 1:
        raise VolumeFormatError(f"{rpath}: components must be >= 1")
    count = comps * int(np.prod(header["dims"]))
    raw = rpath.read_bytes()
    if len(raw) != count * dt.itemsize:
        raise VolumeFormatError(
            f"{rpath}: payload has {len(raw)} bytes, header implies "
            f"{count * dt.itemsize} ({count} x {header['dtype']})"
        )
    arr = np.frombuffer(raw, dtype=dt).reshape([comps, *header["dims"]])
    if dt.kind == "f" and not np.all(np.isfinite(arr)):
        raise VolumeFormatError(f"{rpath}: non-finite payload")
    return header, arr


def write_payload(path, arr: np.ndarray, spacing, dtype: str, **extra) -> None:
    """Write ``arr`` of shape ``(components, D, H, W)`` plus its header."""
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype tag '{dtype}'")
    hpath, rpath = header_paths(path)
    arr = np.asarray(arr)
    comps = arr.shape[0]
    dt = _DTYPES[dtype]
    out = arr.astype(dt)
    if dt.kind == "u" and not np.array_equal(out, arr):
        raise VolumeFormatError(f"values do not fit dtype {dtype}")
    if dt.kind == "f" and not np.all(np.isfinite(out)):
        raise VolumeFormatError(f"values overflow dtype {dtype}")
    header = {
        "dims": [int(d) for d in arr.shape[1:]],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "byte_order": "little",
        "components": int(comps),
    }
    header.update(extra)
    hpath.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(rpath, np.ascontiguousarray(out).tobytes())
    _atomic_write(hpath, (json.dumps(header, indent=1) + "\n").encode())


def load_volume(path) -> Volume3D:
    header, arr = read_payload(path)
    if header["components"] != 1:
        raise VolumeFormatError(f"{path}: expected 1 component, got {header['components']}")
    return Volume3D(arr[0].astype(np.float64), tuple(header["spacing"]))


def save_volume(v: Volume3D, path, dtype: str = "f64") -> None:
    if dtype == "u16":
        raise VolumeFormatError("u16 is reserved for label maps")
    write_payload(path, v.data[None], v.spacing, dtype)


def load_labels(path) -> LabelMap:
    header, arr = read_payload(path)
    if header["components"] != 1:
        raise VolumeFormatError(f"{path}: expected 1 component, got {header['components']}")
    return LabelMap(arr[0], tuple(header["spacing"]))


def save_labels(labels: LabelMap, path, dtype: str = "u16") -> None:
    write_payload(path, labels.labels[None], labels.spacing, dtype)
