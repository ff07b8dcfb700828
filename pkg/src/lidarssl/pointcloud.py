"""Point cloud container plus bit-exact binary readers and writers.

Two on-disk formats:

* ``.bin`` scans: little-endian float32 (x, y, z, intensity) quadruplets,
  the usual automotive export convention.  Values are widened to float64
  on read and intensity is clamped into [0, 1] (real exports contain
  1.0+eps artifacts).
* ``.pctn`` tensor containers: magic ``PCTN``, u32 format version, u32
  entry count, then per entry a u32 name length + UTF-8 name, u32 rank,
  u32 dims, and row-major little-endian float64 data.  Round-trips are
  bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PCTN"
FORMAT_VERSION = 1
_POINT_BYTES = 16  # four little-endian float32 channels


class FormatError(ValueError):
    """Raised when a binary file does not match its declared format."""


@dataclass
class PointCloud:
    """Ordered points (n x 4: x, y, z meters, intensity in [0, 1]) with stable ids."""

    points: np.ndarray
    source_indices: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if self.source_indices is None:
            self.source_indices = np.arange(len(self.points), dtype=np.int64)
        else:
            self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
        if len(self.source_indices) != len(self.points):
            raise ValueError("source_indices length does not match point count")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


def read_cloud_bin(path) -> PointCloud:
    """Read an (x, y, z, intensity) float32 scan; indices follow file order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % _POINT_BYTES != 0:
        raise FormatError(
            f"{path}: truncated point record at byte offset {len(raw) - len(raw) % _POINT_BYTES}"
        )
    pts = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(-1, 4)
    bad = ~np.isfinite(pts)
    if bad.any():
        idx = int(np.nonzero(bad.any(axis=1))[0][0])
        raise FormatError(f"{path}: non-finite value at point index {idx}")
    pts = pts.copy()
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return PointCloud(points=pts)


def write_cloud_bin(cloud: PointCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(cloud.points.astype("<f4").tobytes())


def write_tensor(path, tensors) -> None:
    """Write a name -> array mapping as a ``.pctn`` container (float64)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = np.asarray(getattr(t, "values", t), dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(path) -> dict[str, np.ndarray]:
    """Read a ``.pctn`` container back into an ordered name -> float64 array dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
            off += 8 * n
            out[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated container ({e})") from e
    return out
