"""Volume container, slice geometry and the on-disk volume format.

A volume file is a pair: ``<name>.json`` (header) and ``<name>.raw``
(little-endian float32 payload in ``c,z,y,x`` row-major layout).
Paths may be given with or without either suffix.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
ORIENTATIONS = ("ZX", "ZY", "XY")


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """C-channel scalar field of shape ``(C, D_z, H_y, W_x)`` with values in [0, 1].

    ``spacing`` holds relative voxel sizes ``(s_z, s_y, s_x)``. ``scale`` and
    ``offset`` record the ingestion transform ``stored = raw * scale + offset``
    (one entry per channel).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    scale: tuple[float, ...] | None = None
    offset: tuple[float, ...] | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape[1:]) < 1 or data.shape[0] < 1:
            raise ValueError(f"volume data must be (C, Z, Y, X), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("volume intensities must lie in [0, 1]; use VolumeGrid.ingest")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        c = data.shape[0]
        scale = (1.0,) * c if self.scale is None else tuple(float(v) for v in self.scale)
        offset = (0.0,) * c if self.offset is None else tuple(float(v) for v in self.offset)
        if len(scale) != c or len(offset) != c:
            raise ValueError("scale/offset need one entry per channel")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "offset", offset)

    @classmethod
    def ingest(cls, raw, spacing=(1.0, 1.0, 1.0)) -> "VolumeGrid":
        """Build a grid from arbitrary-range data.

        Channels whose values fall outside [0, 1] are min-max normalized
        independently; the applied affine map is kept in ``scale``/``offset``.
        """
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 3:
            raw = raw[None]
        out = np.empty(raw.shape, dtype=np.float32)
        scale, offset = [], []
        for c, ch in enumerate(raw):
            lo, hi = float(ch.min()), float(ch.max())
            if lo >= 0.0 and hi <= 1.0:
                a, b = 1.0, 0.0
            elif hi > lo:
                a, b = 1.0 / (hi - lo), -lo / (hi - lo)
            else:
                a, b = 0.0, 0.0
            out[c] = np.clip(ch * a + b, 0.0, 1.0)
            scale.append(a)
            offset.append(b)
        return cls(out, spacing=spacing, scale=tuple(scale), offset=tuple(offset))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, VolumeGrid):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.scale == other.scale
            and self.offset == other.offset
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    def header(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "dims": list(self.dims),
            "channels": self.channels,
            "dtype": "f32le",
            "spacing": list(self.spacing),
            "scale": list(self.scale),
            "offset": list(self.offset),
            "layout": "c,z,y,x",
        }


def normalize_index(i: int, n: int) -> float:
    """Voxel-center coordinate of index ``i`` on an axis of ``n`` voxels, in [-1, 1]."""
    if n < 1:
        raise IndexError(f"axis extent must be >= 1, got {n}")
    if not 0 <= i < n:
        raise IndexError(f"index {i} out of range for axis of extent {n}")
    return 2.0 * (i + 0.5) / n - 1.0


def axis_coords(n: int) -> np.ndarray:
    """All ``n`` voxel-center coordinates of an axis (float64)."""
    return 2.0 * (np.arange(n, dtype=np.float64) + 0.5) / n - 1.0


@dataclass(frozen=True)
class SlicePlan:
    """A plane of the isotropic target grid ``coord_dims = (N_z, N_y, N_x)``.

    ``ZX`` planes fix y and have shape ``(N_z, N_x)``; ``ZY`` planes fix x and
    have shape ``(N_z, N_y)``; ``XY`` planes fix z and have shape ``(N_y, N_x)``.
    ``shape`` defaults to the full plane.
    """

    orientation: str
    index: int
    coord_dims: tuple[int, int, int]
    shape: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        nz, ny, nx = self.coord_dims
        fixed, full = {
            "ZX": (ny, (nz, nx)),
            "ZY": (nx, (nz, ny)),
            "XY": (nz, (ny, nx)),
        }[self.orientation]
        if not 0 <= self.index < fixed:
            raise IndexError(f"{self.orientation} index {self.index} out of range [0, {fixed})")
        shape = full if self.shape is None else tuple(self.shape)
        if shape[0] < 1 or shape[1] < 1 or shape[0] > full[0] or shape[1] > full[1]:
            raise ValueError(f"plan shape {shape} incompatible with plane extent {full}")
        object.__setattr__(self, "shape", shape)


def expand_slice(plan: SlicePlan) -> np.ndarray:
    """Row-major ``(rows*cols, 3)`` array of ``(z, y, x)`` coordinates for ``plan``.

    A reduced ``shape`` takes the leading rows/cols of the plane.
    """
    if plan.orientation not in ORIENTATIONS:
        raise ValueError(f"unknown orientation {plan.orientation!r}")
    nz, ny, nx = plan.coord_dims
    rows, cols = plan.shape
    if plan.orientation == "ZX":
        r, c = axis_coords(nz)[:rows], axis_coords(nx)[:cols]
        fixed = normalize_index(plan.index, ny)
        rr, cc = np.meshgrid(r, c, indexing="ij")
        out = np.stack([rr, np.full_like(rr, fixed), cc], axis=-1)
    elif plan.orientation == "ZY":
        r, c = axis_coords(nz)[:rows], axis_coords(ny)[:cols]
        fixed = normalize_index(plan.index, nx)
        rr, cc = np.meshgrid(r, c, indexing="ij")
        out = np.stack([rr, cc, np.full_like(rr, fixed)], axis=-1)
    else:
        r, c = axis_coords(ny)[:rows], axis_coords(nx)[:cols]
        fixed = normalize_index(plan.index, nz)
        rr, cc = np.meshgrid(r, c, indexing="ij")
        out = np.stack([np.full_like(rr, fixed), rr, cc], axis=-1)
    return out.reshape(-1, 3)


def take_slice(volume: VolumeGrid | np.ndarray, orientation: str, index: int) -> np.ndarray:
    """Voxel-array plane matching :func:`expand_slice` layout, shape ``(C, rows, cols)``."""
    data = volume.data if isinstance(volume, VolumeGrid) else np.asarray(volume)
    if orientation == "ZX":
        return data[:, :, index, :]
    if orientation == "ZY":
        return data[:, :, :, index]
    if orientation == "XY":
        return data[:, index, :, :]
    raise ValueError(f"unknown orientation {orientation!r}")


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_volume(grid: VolumeGrid, path) -> None:
    header_path, raw_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(raw_path, grid.data.astype("<f4").tobytes(order="C"))
    atomic_write_bytes(header_path, (json.dumps(grid.header(), indent=2) + "\n").encode())


def load_volume(path) -> VolumeGrid:
    header_path, raw_path = _paths(path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"cannot read volume header {header_path}: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported volume version {header.get('version')!r}")
    if header.get("dtype") != "f32le" or header.get("layout") != "c,z,y,x":
        raise VolumeFormatError("volume must be f32le in c,z,y,x layout")
    dims = [int(d) for d in header["dims"]]
    channels = int(header["channels"])
    payload = raw_path.read_bytes()
    expected = channels * int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload has {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, *dims)
    raw_range = data.size and (data.min() < 0.0 or data.max() > 1.0)
    if raw_range:
        return VolumeGrid.ingest(data, spacing=tuple(header["spacing"]))
    return VolumeGrid(
        data.astype(np.float32),
        spacing=tuple(header["spacing"]),
        scale=tuple(header.get("scale", [1.0] * channels)),
        offset=tuple(header.get("offset", [0.0] * channels)),
    )
