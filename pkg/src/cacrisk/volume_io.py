"""Raw volume file format.

One file per subject, little-endian:

    magic "CACV" | u32 version | u32 nx, ny, nz | f64 spacing x, y, z
    | nx*ny*nz i16 HU values, slice-major (z slowest, then row, then col)
"""

from pathlib import Path

import numpy as np

from .errors import DataError
from .imaging import CtVolume

MAGIC = b"CACV"
VERSION = 1


def write_volume(path, volume: CtVolume) -> None:
    path = Path(path)
    ny, nx, nz = volume.voxels.shape[0], volume.voxels.shape[1], volume.voxels.shape[2]
    header = MAGIC
    header += np.array([VERSION, nx, ny, nz], dtype="<u4").tobytes()
    header += np.array(volume.spacing, dtype="<f8").tobytes()
    # (row, col, slice) -> slice-major disk order (slice, row, col)
    data = np.transpose(volume.voxels, (2, 0, 1)).astype("<i2").tobytes()
    try:
        path.write_bytes(header + data)
    except OSError as exc:
        raise DataError(f"cannot write volume file {path}: {exc}") from exc


def read_volume(path, subject_id: str | None = None) -> CtVolume:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read volume file {path}: {exc}") from exc
    if len(raw) < 4 + 4 * 4 + 3 * 8:
        raise DataError(f"volume file {path} truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise DataError(f"volume file {path} has bad magic {raw[:4]!r}")
    version, nx, ny, nz = np.frombuffer(raw, dtype="<u4", count=4, offset=4)
    if version != VERSION:
        raise DataError(f"volume file {path} has unsupported version {version}")
    spacing = np.frombuffer(raw, dtype="<f8", count=3, offset=20)
    offset = 20 + 24
    expected = int(nx) * int(ny) * int(nz)
    data = np.frombuffer(raw, dtype="<i2", offset=offset)
    if data.size != expected:
        raise DataError(
            f"volume file {path}: expected {expected} voxels, found {data.size}"
        )
    voxels = data.reshape(int(nz), int(ny), int(nx)).transpose(1, 2, 0)
    try:
        return CtVolume(
            voxels=voxels.astype(np.int16),
            spacing=tuple(spacing),
            id=subject_id if subject_id is not None else path.stem,
        )
    except ValueError as exc:
        raise DataError(f"volume file {path} violates volume invariants: {exc}") from exc
