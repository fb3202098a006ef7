"""Binary containers (.wts, .melz, .utiz) and atomic file replacement.

All multi-byte fields are little-endian. Writers stage into ``<path>.tmp``
and ``os.replace`` it over the target so a reader never sees a partial file.
"""

import json
import os
import struct
from collections.abc import Mapping

import numpy as np

from .errors import ValidationError

WTS_MAGIC = b"WTS1"
MEL_MAGIC = b"MEL1"
UTI_MAGIC = b"UTI1"
CONTAINER_VERSION = 1

_UTI_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<f4")}


# ============================================================
# Atomic writes
# ============================================================

def write_bytes_atomic(path: str, data: bytes) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(data)
    os.replace(tmp_path, path)


def write_text_atomic(path: str, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def write_json_atomic(path: str, obj) -> None:
    """Stable formatting: sorted keys, two-space indent, trailing newline."""
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_exact(f, n: int, path: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValidationError(f"{path}: truncated container")
    return buf


def _check_magic(f, magic: bytes, path: str) -> None:
    got = f.read(4)
    if got != magic:
        raise ValidationError(f"{path}: bad magic {got!r}, expected {magic!r}")


# ============================================================
# .wts — named float32 tensors
# ============================================================

def encode_wts(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [WTS_MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(value)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def write_wts(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    write_bytes_atomic(path, encode_wts(tensors))


def read_wts(path: str) -> dict[str, np.ndarray]:
    """Read a .wts file. Values come back as float64 in file order."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        _check_magic(f, WTS_MAGIC, path)
        (count,) = struct.unpack("<I", _read_exact(f, 4, path))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, path))
            name = _read_exact(f, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, path))
            dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, path))
            n = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(_read_exact(f, 4 * n, path), dtype="<f4")
            out[name] = values.astype(np.float64).reshape(dims)
    return out


# ============================================================
# .melz — log-mel frames
# ============================================================

def write_melz(path: str, frames: np.ndarray, fps: float) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValidationError("mel frames must be a 2-D matrix")
    header = MEL_MAGIC + struct.pack("<III", CONTAINER_VERSION, frames.shape[0], frames.shape[1])
    header += struct.pack("<d", float(fps))
    write_bytes_atomic(path, header + np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_melz(path: str) -> tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        _check_magic(f, MEL_MAGIC, path)
        version, n_frames, n_mels = struct.unpack("<III", _read_exact(f, 12, path))
        if version != CONTAINER_VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        (fps,) = struct.unpack("<d", _read_exact(f, 8, path))
        raw = _read_exact(f, 4 * n_frames * n_mels, path)
    frames = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n_frames, n_mels)
    return frames, fps


# ============================================================
# .utiz — ultrasound frame stacks
# ============================================================

def write_utiz(path: str, frames: np.ndarray, fps: float) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValidationError("ultrasound frames must be [n, height, width]")
    if frames.dtype == np.uint8:
        code = 0
    else:
        code = 1
    n, h, w = frames.shape
    header = UTI_MAGIC + struct.pack("<IIIII", CONTAINER_VERSION, n, h, w, code)
    header += struct.pack("<d", float(fps))
    payload = np.ascontiguousarray(frames, dtype=_UTI_DTYPES[code]).tobytes()
    write_bytes_atomic(path, header + payload)


def read_utiz(path: str) -> tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        _check_magic(f, UTI_MAGIC, path)
        version, n, h, w, code = struct.unpack("<IIIII", _read_exact(f, 20, path))
        if version != CONTAINER_VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        if code not in _UTI_DTYPES:
            raise ValidationError(f"{path}: unknown dtype code {code}")
        (fps,) = struct.unpack("<d", _read_exact(f, 8, path))
        dtype = _UTI_DTYPES[code]
        raw = _read_exact(f, dtype.itemsize * n * h * w, path)
    frames = np.frombuffer(raw, dtype=dtype).reshape(n, h, w)
    if code == 1:
        frames = frames.astype(np.float32)
    else:
        frames = frames.copy()
    return frames, fps
