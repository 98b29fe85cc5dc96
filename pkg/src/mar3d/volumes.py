"""Volumetric data model, HU normalization, slice windows and the VXMR file format."""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

HU_MIN, HU_MAX = -1024.0, 4000.0
WINDOW_HU = 1000.0
SUPPORTED_N = (1, 3, 5, 7, 9, 11, 13)

MAGIC = b"VXMR"
FORMAT_VERSION = 1
# magic, version, shape (3 x u32), spacing (3 x f64), value_space code
_HEADER = struct.Struct("<4sI3I3dB")


class ValueSpace(enum.IntEnum):
    HU = 0
    NORMALIZED = 1


class DomainTag(str, enum.Enum):
    X_ARTIFACT = "X_ARTIFACT"
    Y_CLEAN = "Y_CLEAN"
    UNLABELED = "UNLABELED"


class VolumeFileError(ValueError):
    """Raised for malformed, truncated or unsupported volume files."""


@dataclass(frozen=True)
class Volume:
    """A CT volume of shape (S, H, W), stored as float32.

    The array is made read-only on construction; derive new volumes with
    :meth:`with_data` instead of mutating.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    value_space: ValueSpace = ValueSpace.HU
    volume_id: str = ""
    domain_tag: DomainTag = DomainTag.UNLABELED

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        _check_finite(data)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing_mm must be three positive values, got {self.spacing_mm}")
        vs = ValueSpace(self.value_space)
        lo, hi = (-1.0, 1.0) if vs is ValueSpace.NORMALIZED else (HU_MIN, HU_MAX)
        if data.min() < lo or data.max() > hi:
            raise ValueError(
                f"{vs.name} volume {self.volume_id!r} has values in "
                f"[{data.min():g}, {data.max():g}], outside [{lo:g}, {hi:g}]"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "value_space", vs)
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, **changes)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
            and self.spacing_mm == other.spacing_mm
            and self.value_space == other.value_space
            and self.volume_id == other.volume_id
            and self.domain_tag == other.domain_tag
        )

    __hash__ = None


@dataclass(frozen=True)
class SubvolumeWindow:
    """N contiguous normalized slices cut from a volume, starting at ``start_index``."""

    slices: np.ndarray
    start_index: int
    n_slices: int = field(init=False)

    def __post_init__(self):
        slices = np.array(self.slices, dtype=np.float32, copy=True)
        if slices.ndim != 3:
            raise ValueError(f"window must be N x H x W, got shape {slices.shape}")
        if slices.shape[0] not in SUPPORTED_N:
            raise ValueError(f"window depth {slices.shape[0]} not in {SUPPORTED_N}")
        if self.start_index < 0:
            raise ValueError("start_index must be non-negative")
        slices.setflags(write=False)
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "n_slices", slices.shape[0])


def _check_finite(data: np.ndarray) -> None:
    bad = ~np.isfinite(data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite voxel at index {idx}: {data[idx]}")


def normalize_hu(vol: Volume) -> Volume:
    """Clamp to [-1000, 1000] HU and scale to [-1, 1]."""
    if vol.value_space is not ValueSpace.HU:
        raise ValueError(f"normalize_hu expects an HU volume, got {vol.value_space.name}")
    _check_finite(vol.data)
    out = np.clip(vol.data, -WINDOW_HU, WINDOW_HU) / np.float32(WINDOW_HU)
    return vol.with_data(out.astype(np.float32), value_space=ValueSpace.NORMALIZED)


def denormalize(vol: Volume, tol: float = 1e-6) -> Volume:
    if vol.value_space is not ValueSpace.NORMALIZED:
        raise ValueError(f"denormalize expects a NORMALIZED volume, got {vol.value_space.name}")
    if np.abs(vol.data).max() > 1.0 + tol:
        raise ValueError("normalized volume has values outside [-1, 1]")
    out = np.clip(vol.data, -1.0, 1.0).astype(np.float64) * WINDOW_HU
    return vol.with_data(out.astype(np.float32), value_space=ValueSpace.HU)


def window_starts(n_total: int, n: int, stride: int = 1) -> range:
    if n_total < n:
        raise ValueError(f"volume has {n_total} slices but windows need at least N={n}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return range(0, n_total - n + 1, stride)


def extract_windows(vol: Volume, n: int, stride: int = 1) -> list[SubvolumeWindow]:
    """Cut the volume into windows of ``n`` contiguous slices (copies, not views)."""
    data = vol.data
    if vol.value_space is ValueSpace.HU:
        data = normalize_hu(vol).data
    return [SubvolumeWindow(data[s:s + n], s) for s in window_starts(vol.n_slices, n, stride)]


def save_volume(vol: Volume, path: str | os.PathLike) -> None:
    path = Path(path)
    ident = vol.volume_id.encode("utf-8")
    domain = vol.domain_tag.value.encode("utf-8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, *vol.shape, *vol.spacing_mm, int(vol.value_space))
    strings = struct.pack("<H", len(ident)) + ident + struct.pack("<H", len(domain)) + domain
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + strings + payload)
    os.replace(tmp, path)


def load_volume(path: str | os.PathLike) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFileError(f"{path}: file too short for a volume header")
    magic, version, s, h, w, *rest = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFileError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    spacing, code = tuple(rest[:3]), rest[3]
    pos = _HEADER.size
    strings = []
    for _ in range(2):
        if pos + 2 > len(raw):
            raise VolumeFileError(f"{path}: truncated header")
        (n,) = struct.unpack_from("<H", raw, pos)
        strings.append(raw[pos + 2:pos + 2 + n].decode("utf-8"))
        pos += 2 + n
    expected = s * h * w * 4
    if len(raw) - pos != expected:
        raise VolumeFileError(
            f"{path}: corrupt payload, header promises {expected} bytes but file holds {len(raw) - pos}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=pos).reshape(s, h, w)
    try:
        value_space = ValueSpace(code)
    except ValueError:
        raise VolumeFileError(f"{path}: unknown value space code {code}") from None
    return Volume(data, spacing, value_space, strings[0], DomainTag(strings[1]))
