"""Image values, raster traversal and netpbm / CIFAR-10 binary I/O.

Images are plain ``numpy`` float64 arrays of shape ``(H, W, C)`` with
``C in {1, 3}`` (channel-interleaved, row-major) holding intensities in
``[0, 1]``.  Batches carry a leading axis: ``(N, H, W, C)``.  Values are only
quantized to bytes at file boundaries.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Iterator

import numpy as np

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE


class ImageFormatError(ValueError):
    """Base class for problems with image files."""


class HeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedMaxvalError(ImageFormatError):
    pass


class CifarFormatError(ImageFormatError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int

    def __post_init__(self):
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")


def as_image(data, copy: bool = True) -> np.ndarray:
    """Validate ``data`` as an ``(H, W, C)`` unit-interval image.

    2-D input is promoted to a single-channel image.
    """
    arr = np.array(data, dtype=np.float64, copy=copy)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, C) image, got shape {arr.shape}")
    if arr.shape[2] not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def clamp_unit(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def raster_order(height: int, width: int) -> Iterator[tuple[int, int]]:
    """Yield ``(row, col)`` left to right within a row, rows top to bottom."""
    for row in range(height):
        for col in range(width):
            yield row, col


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize to uint8 with round-half-up, clamping to [0, 255]."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise HeaderError("incomplete netpbm header")
        tokens.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise HeaderError("missing whitespace after maxval")
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise HeaderError(f"unsupported magic {magic!r}; expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise HeaderError(f"non-integer header field: {exc}") from None
    if width < 1 or height < 1:
        raise HeaderError(f"invalid dimensions {width}x{height}")
    return magic, width, height, maxval, pos + 1


def parse_ppm(buf: bytes) -> np.ndarray:
    magic, width, height, maxval, offset = _read_header(buf)
    if maxval != 255:
        raise UnsupportedMaxvalError(f"maxval {maxval} not supported (only 255)")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"expected {need} raster bytes, found {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return from_bytes(raw)


def load_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255."""
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    height, width, channels = img.shape
    magic = {1: b"P5", 3: b"P6"}.get(channels)
    if magic is None:
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    header = magic + b"\n%d %d\n255\n" % (width, height)
    return header + to_bytes(img).tobytes()


def save_ppm(img: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def load_cifar10_batch(path: str | os.PathLike, max_records: int | None = None) -> list[LabeledExample]:
    """Read a CIFAR-10 binary batch (1 label byte + 3072 planar RGB bytes per record)."""
    images, labels = load_cifar10_arrays(path, max_records)
    return [LabeledExample(img, int(lab)) for img, lab in zip(images, labels)]


def load_cifar10_arrays(path: str | os.PathLike, max_records: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise CifarFormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    if max_records is not None:
        records = records[: max(0, max_records)]
    labels = records[:, 0].astype(np.int64)
    planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = from_bytes(planes.transpose(0, 2, 3, 1))
    return images, labels
