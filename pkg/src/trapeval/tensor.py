"""Channels-by-height-by-width tensor values and the primitive array ops.

Layout contract: values are stored channel-major, row-major within each
channel (a C-contiguous float64 ndarray of shape (C, H, W)); file dumps use
exactly this order. Each primitive has a forward and a matching
input-gradient backward, which is all reverse mode needs here since weights
are never trained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ShapeError


@dataclass(frozen=True)
class ShapeSpec:
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad conv shape parameters {self}")


def conv_output_dim(input_size: int, spec: ShapeSpec) -> int:
    """floor((input - kernel + 2*padding) / stride) + 1."""
    if input_size < 1:
        raise ShapeError(f"input size {input_size} must be >= 1")
    out = (input_size - spec.kernel + 2 * spec.padding) // spec.stride + 1
    if out < 1:
        raise ShapeError(
            f"conv output dimension {out} for input {input_size} with {spec}"
        )
    return out


@dataclass(frozen=True)
class Tensor3:
    """Immutable named wrapper over a (C, H, W) float64 grid."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"Tensor3 expects 3 dims, got shape {arr.shape}")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @staticmethod
    def zeros(channels: int, height: int, width: int) -> "Tensor3":
        return Tensor3(np.zeros((channels, height, width)))

    @staticmethod
    def full(channels: int, height: int, width: int, value: float) -> "Tensor3":
        return Tensor3(np.full((channels, height, width), float(value)))


TENSOR_DUMP_MAGIC = b"TNSR"


def write_tensor_dump(tensor: Tensor3, stream: IO[bytes]) -> None:
    """Binary dump: magic, three little-endian uint32 dims (C, H, W), then
    float64 little-endian values in layout order."""
    c, h, w = tensor.shape
    stream.write(TENSOR_DUMP_MAGIC)
    stream.write(struct.pack("<III", c, h, w))
    stream.write(tensor.data.astype("<f8").tobytes(order="C"))


def read_tensor_dump(stream: IO[bytes]) -> Tensor3:
    magic = stream.read(4)
    if magic != TENSOR_DUMP_MAGIC:
        raise FormatError(f"bad tensor dump magic {magic!r}")
    header = stream.read(12)
    if len(header) != 12:
        raise FormatError("truncated tensor dump header")
    c, h, w = struct.unpack("<III", header)
    payload = stream.read(8 * c * h * w)
    if len(payload) != 8 * c * h * w:
        raise FormatError("truncated tensor dump payload")
    data = np.frombuffer(payload, dtype="<f8").reshape(c, h, w)
    return Tensor3(data.copy())


# --- activations ------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * out * (1.0 - out)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return dout * (s * (1.0 + x * (1.0 - s)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0.0)


# --- convolution ------------------------------------------------------------

def conv2d_forward(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, spec: ShapeSpec
) -> np.ndarray:
    """Standard 2D convolution. weights: (C_out, C_in, k, k)."""
    c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weights.shape
    if kh != kw or kh != spec.kernel:
        raise ShapeError(f"kernel mismatch: weights {weights.shape} vs {spec}")
    if c_in_w != c_in:
        raise ShapeError(f"conv expects {c_in_w} input channels, got {c_in}")
    ho = conv_output_dim(h, spec)
    wo = conv_output_dim(w, spec)
    p, s, k = spec.padding, spec.stride, spec.kernel
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = windows[:, :: s, :: s][:, :ho, :wo]  # (C_in, ho, wo, k, k)
    y = np.tensordot(weights, cols, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        y = y + bias[:, None, None]
    return y


def conv2d_backward_input(
    dout: np.ndarray, weights: np.ndarray, input_shape: tuple[int, int, int], spec: ShapeSpec
) -> np.ndarray:
    c_in, h, w = input_shape
    p, s, k = spec.padding, spec.stride, spec.kernel
    ho, wo = dout.shape[1:]
    dcols = np.tensordot(weights, dout, axes=([0], [0]))  # (C_in, k, k, ho, wo)
    dxp = np.zeros((c_in, h + 2 * p, w + 2 * p))
    for u in range(k):
        for v in range(k):
            dxp[:, u : u + s * ho : s, v : v + s * wo : s] += dcols[:, u, v]
    return dxp[:, p : p + h, p : p + w]


# --- max pooling (stride 1, padding k//2: shape preserving) -----------------

def maxpool2d_forward(
    x: np.ndarray, kernel: int, padding: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel window max; returns (out, argmax) with argmax holding the
    flat within-window winner index (first occurrence in row-major scan)."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    windows = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))
    ho = h + 2 * padding - kernel + 1
    wo = w + 2 * padding - kernel + 1
    flat = windows.reshape(c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(
    dout: np.ndarray,
    argmax: np.ndarray,
    input_shape: tuple[int, int, int],
    kernel: int,
    padding: int,
) -> np.ndarray:
    c, h, w = input_shape
    ho, wo = dout.shape[1:]
    ci, ri, cj = np.indices((c, ho, wo))
    u = argmax // kernel
    v = argmax % kernel
    dxp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    np.add.at(dxp, (ci, ri + u, cj + v), dout)
    return dxp[:, padding : padding + h, padding : padding + w]


# --- nearest-neighbour upsampling -------------------------------------------

def upsample_forward(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def upsample_backward(dout: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return dout.copy()
    c, hf, wf = dout.shape
    return dout.reshape(c, hf // factor, factor, wf // factor, factor).sum(axis=(2, 4))


# --- channel concatenation ---------------------------------------------------

def concat_forward(xs: Sequence[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ValueError("concat of no inputs")
    base = xs[0].shape[1:]
    for i, x in enumerate(xs[1:], start=1):
        if x.shape[1:] != base:
            raise ShapeError(
                f"concat input {i} spatial dims {x.shape[1:]} != {base}"
            )
    return np.concatenate(xs, axis=0)


def concat_backward(dout: np.ndarray, channel_counts: Sequence[int]) -> list[np.ndarray]:
    offsets = np.cumsum(channel_counts)[:-1]
    return [part.copy() for part in np.split(dout, offsets, axis=0)]


# --- Tensor3 front-ends -------------------------------------------------------

def conv2d(
    x: Tensor3,
    weights: np.ndarray,
    spec: ShapeSpec,
    bias: np.ndarray | None = None,
    activation: bool = False,
) -> Tensor3:
    """Convolution over a tensor value, optionally followed by SiLU."""
    y = conv2d_forward(x.data, weights, bias, spec)
    return Tensor3(silu(y) if activation else y)


def maxpool2d(x: Tensor3, kernel: int = 5, padding: int | None = None) -> Tensor3:
    if padding is None:
        padding = kernel // 2
    out, _ = maxpool2d_forward(x.data, kernel, padding)
    return Tensor3(out)


def upsample_nearest(x: Tensor3, factor: int) -> Tensor3:
    return Tensor3(upsample_forward(x.data, factor))


def concat_channels(xs: Sequence[Tensor3]) -> Tensor3:
    return Tensor3(concat_forward([x.data for x in xs]))
