"""On-disk formats: V3F1 volumes, PGM slices and atomic writes."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"V3F1"
HEADER = struct.Struct("<4sIII")


class VolumeFormatError(ValueError):
    """Raised for a volume file with a bad magic number or size."""


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_volume(volume: np.ndarray) -> bytes:
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"volume must be 3-D, got shape {vol.shape}")
    dx, dy, dz = vol.shape
    # x-fastest storage is Fortran order for an [x, y, z] array
    body = np.asarray(vol, dtype="<f4").ravel(order="F").tobytes()
    return HEADER.pack(MAGIC, dx, dy, dz) + body


def decode_volume(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(payload) < HEADER.size:
        raise VolumeFormatError(f"{source}: truncated header ({len(payload)} bytes)")
    magic, dx, dy, dz = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise VolumeFormatError(f"{source}: bad magic {magic!r}")
    expected = HEADER.size + 4 * dx * dy * dz
    if len(payload) != expected:
        raise VolumeFormatError(f"{source}: size {len(payload)} != expected {expected}")
    data = np.frombuffer(payload, dtype="<f4", offset=HEADER.size)
    return data.reshape((dx, dy, dz), order="F").astype(np.float32)


def write_volume(path: str | Path, volume: np.ndarray) -> None:
    atomic_write_bytes(path, encode_volume(volume))


def read_volume(path: str | Path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- slices

PLANES = ("axial", "coronal", "sagittal")


def center_slice(volume: np.ndarray, plane: str) -> np.ndarray:
    """Central 2-D plane: axial fixes z, coronal fixes y, sagittal fixes x."""
    dx, dy, dz = volume.shape
    if plane == "axial":
        return volume[:, :, dz // 2]
    if plane == "coronal":
        return volume[:, dy // 2, :]
    if plane == "sagittal":
        return volume[dx // 2, :, :]
    raise ValueError(f"unknown plane {plane!r}")


def encode_pgm(image: np.ndarray, comment: str | None = None) -> bytes:
    """Binary P5 PGM, maxval 255, mapping [0, 1] linearly with round-half-up.

    ``image[i, j]`` becomes the pixel at column ``i``, row ``j``, so the width
    is ``image.shape[0]`` and the height ``image.shape[1]``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {img.shape}")
    pix = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    w, h = img.shape
    head = b"P5\n"
    if comment:
        head += b"# " + comment.encode() + b"\n"
    head += f"{w} {h}\n255\n".encode()
    return head + pix.T.tobytes()


def decode_pgm(payload: bytes) -> np.ndarray:
    """Inverse of :func:`encode_pgm` (returns uint8 indexed [column, row])."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while payload[pos:pos + 1].isspace():
            pos += 1
        if payload[pos:pos + 1] == b"#":
            pos = payload.index(b"\n", pos) + 1
            continue
        end = pos
        while not payload[end:end + 1].isspace():
            end += 1
        tokens.append(payload[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(payload[pos:pos + w * h], dtype=np.uint8).reshape(h, w).T


def write_slices(volume: np.ndarray, stem: str | Path, comment: str | None = None) -> list[Path]:
    """Write the three center-slice PGMs ``<stem>_<plane>.pgm``."""
    stem = Path(stem)
    paths = []
    for plane in PLANES:
        p = stem.parent / f"{stem.name}_{plane}.pgm"
        atomic_write_bytes(p, encode_pgm(center_slice(volume, plane), comment))
        paths.append(p)
    return paths
