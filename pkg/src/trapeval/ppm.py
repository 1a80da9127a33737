"""Binary PPM (P6) and PGM (P5) readers/writers, maxval 255.

Tensor channels 0, 1, 2 map to R, G, B; pixel bytes become float64 values in
[0, 255] so the write/read cycle is lossless for integer-valued tensors.
Header comments ('#' to end of line) are handled on read.
"""

from __future__ import annotations

from pathlib import Path
from typing import IO

import numpy as np

from .errors import FormatError
from .tensor import Tensor3


def _read_token(stream: IO[bytes]) -> bytes:
    token = b""
    while True:
        ch = stream.read(1)
        if ch == b"":
            if token:
                return token
            raise FormatError("unexpected end of file in header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def _read_header(stream: IO[bytes], magic: bytes) -> tuple[int, int]:
    found = _read_token(stream)
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r}")
    try:
        width = int(_read_token(stream))
        height = int(_read_token(stream))
        maxval = int(_read_token(stream))
    except ValueError as exc:
        raise FormatError(f"non-numeric header field: {exc}") from exc
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, only 255")
    return width, height


def read_ppm(path: "str | Path") -> Tensor3:
    with open(path, "rb") as stream:
        width, height = _read_header(stream, b"P6")
        payload = stream.read(3 * width * height)
        if len(payload) != 3 * width * height:
            raise FormatError(
                f"truncated pixel data: got {len(payload)} of {3 * width * height} bytes"
            )
        pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
        return Tensor3(pixels.transpose(2, 0, 1).astype(np.float64))


def write_ppm(tensor: Tensor3, path: "str | Path") -> None:
    if tensor.channels != 3:
        raise FormatError(f"PPM needs 3 channels, got {tensor.channels}")
    if tensor.data.min() < 0.0 or tensor.data.max() > 255.0:
        raise FormatError("PPM pixel values must lie in [0, 255]")
    pixels = np.rint(tensor.data).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as stream:
        stream.write(f"P6\n{tensor.width} {tensor.height}\n255\n".encode("ascii"))
        stream.write(pixels.tobytes(order="C"))


def read_pgm(path: "str | Path") -> np.ndarray:
    """Grayscale image as a (H, W) float64 array in [0, 255]."""
    with open(path, "rb") as stream:
        width, height = _read_header(stream, b"P5")
        payload = stream.read(width * height)
        if len(payload) != width * height:
            raise FormatError(
                f"truncated pixel data: got {len(payload)} of {width * height} bytes"
            )
        return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64)


def write_pgm(values: np.ndarray, path: "str | Path") -> None:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs a 2-dim grid, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 255.0:
        raise FormatError("PGM pixel values must lie in [0, 255]")
    with open(path, "wb") as stream:
        stream.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        stream.write(np.rint(arr).astype(np.uint8).tobytes(order="C"))
