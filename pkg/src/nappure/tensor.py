"""Seeded randomness, NAPT tensor files and PPM/PGM export.

Images are plain ``float64`` numpy arrays of shape ``(C, H, W)``; batches add
a leading axis.  Everything here is a pure function except the generators
returned by :func:`make_rng`, which are single-owner.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NAPT"
_U64 = (1 << 64) - 1


class TensorFormatError(ValueError):
    """Base class for NAPT decoding failures."""


class MalformedHeaderError(TensorFormatError):
    """Wrong magic bytes or an undecodable JSON header."""


class PayloadSizeError(TensorFormatError):
    """Payload length disagrees with the shape in the header."""


class TensorIOError(OSError):
    """The file could not be read or written."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & _U64))


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Child stream for sample ``index``: seeded with ``seed XOR index``."""
    return make_rng((int(seed) ^ int(index)) & _U64)


def sample_gaussian(rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    return rng.standard_normal(n)


def check_image(x: np.ndarray, name: str = "image") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"{name} must have shape (C, H, W) with positive sizes, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def encode_tensor(t: np.ndarray) -> bytes:
    t = check_image(t, "tensor")
    header = json.dumps({"dtype": "f32le", "shape": list(t.shape)}, separators=(",", ":")).encode()
    payload = np.ascontiguousarray(t, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise MalformedHeaderError("missing NAPT magic bytes")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if 8 + hlen > len(buf):
        raise MalformedHeaderError(f"header length {hlen} runs past end of file")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        dtype = header["dtype"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad NAPT header: {exc}") from exc
    if dtype != "f32le":
        raise MalformedHeaderError(f"unsupported dtype {dtype!r}")
    if len(shape) != 3 or min(shape) < 1:
        raise MalformedHeaderError(f"shape must be [C, H, W] with positive sizes, got {list(shape)}")
    payload = buf[8 + hlen :]
    expected = 4 * int(np.prod(shape))
    if len(payload) != expected:
        raise PayloadSizeError(f"payload has {len(payload)} bytes, shape {list(shape)} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)


def write_tensor(path: str | os.PathLike, t: np.ndarray) -> None:
    data = encode_tensor(t)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise TensorIOError(f"cannot write {path}: {exc}") from exc


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise TensorIOError(f"cannot read {path}: {exc}") from exc
    return decode_tensor(buf)


def to_bytes255(t: np.ndarray) -> np.ndarray:
    # round half up
    return np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_ppm(path: str | os.PathLike, t: np.ndarray) -> None:
    """Write a binary PGM (1 channel) or PPM (3 channels)."""
    t = check_image(t, "tensor")
    c, h, w = t.shape
    if c not in (1, 3):
        raise ValueError(f"PPM/PGM export needs 1 or 3 channels, got {c}")
    pix = to_bytes255(t)
    magic = "P5" if c == 1 else "P6"
    body = pix[0] if c == 1 else np.transpose(pix, (1, 2, 0))
    try:
        with open(path, "wb") as fh:
            fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(body).tobytes())
    except OSError as exc:
        raise TensorIOError(f"cannot write {path}: {exc}") from exc


def image_strip(images: list[np.ndarray], gap: float = 1.0) -> np.ndarray:
    """Concatenate same-shape images left to right with a 1-pixel separator."""
    c, h, _ = images[0].shape
    sep = np.full((c, h, 1), gap)
    parts = []
    for i, im in enumerate(images):
        if i:
            parts.append(sep)
        parts.append(im)
    return np.concatenate(parts, axis=2)
