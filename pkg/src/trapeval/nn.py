"""Network building blocks with hand-written input-gradient backwards.

Weights are immutable after construction and drawn from a PCG64 generator in
declaration order: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases
zero. Forward passes return (output, cache); backward consumes the cache so
one block instance can serve many concurrent runs.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np

from .errors import ShapeError
from .tensor import (
    ShapeSpec,
    Tensor3,
    concat_backward,
    concat_forward,
    conv2d_backward_input,
    conv2d_forward,
    conv_output_dim,
    maxpool2d_backward,
    maxpool2d_forward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    silu,
    silu_backward,
    upsample_backward,
    upsample_forward,
)


def _as_rng(seed: "int | np.random.Generator | None") -> "np.random.Generator | None":
    """Negative integer seeds mean zero-initialized weights (ablation aid)."""
    if seed is None or isinstance(seed, np.random.Generator):
        return seed
    if seed < 0:
        return None
    return np.random.Generator(np.random.PCG64(seed))


def _uniform_weights(
    rng: "np.random.Generator | None", fan_in: int, shape: tuple[int, ...]
) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    """Convolution block: conv2d plus optional SiLU."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int = 3,
        stride: int = 1,
        padding: int | None = None,
        act: bool = True,
        seed: "int | np.random.Generator" = 0,
    ):
        rng = _as_rng(seed)
        if padding is None:
            padding = kernel // 2
        self.c_in = c_in
        self.c_out = c_out
        self.spec = ShapeSpec(kernel, stride, padding)
        self.act = act
        self.weights = _uniform_weights(rng, c_in * kernel * kernel, (c_out, c_in, kernel, kernel))
        self.bias = np.zeros(c_out)

    def out_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"conv expects {self.c_in} channels, got {c}")
        return (self.c_out, conv_output_dim(h, self.spec), conv_output_dim(w, self.spec))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        pre = conv2d_forward(x, self.weights, self.bias, self.spec)
        if self.act:
            return silu(pre), (x.shape, pre)
        return pre, (x.shape, None)

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        in_shape, pre = cache
        if self.act:
            dout = silu_backward(dout, pre)
        return conv2d_backward_input(dout, self.weights, in_shape, self.spec)

    def __call__(self, x: Tensor3) -> Tensor3:
        return Tensor3(self.forward(x.data)[0])


class Bottleneck:
    """Two 3x3 conv blocks with a residual shortcut (element-wise addition)."""

    def __init__(self, channels: int, seed: "int | np.random.Generator" = 0):
        rng = _as_rng(seed)
        self.conv1 = Conv(channels, channels, 3, 1, 1, act=True, seed=rng)
        self.conv2 = Conv(channels, channels, 3, 1, 1, act=True, seed=rng)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        y1, c1 = self.conv1.forward(x)
        y2, c2 = self.conv2.forward(y1)
        return x + y2, (c1, c2)

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        c1, c2 = cache
        dy1 = self.conv2.backward(dout, c2)
        return dout + self.conv1.backward(dy1, c1)

    def __call__(self, x: Tensor3) -> Tensor3:
        return Tensor3(self.forward(x.data)[0])


class C2f:
    """Cross-stage partial block: entry conv, channel split, a bottleneck
    stack on one path, concat of every stage, fuse conv."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        n: int = 1,
        seed: "int | np.random.Generator" = 0,
    ):
        if c_out % 2 != 0:
            raise ShapeError(f"c2f needs an even output channel count, got {c_out}")
        rng = _as_rng(seed)
        self.c_in = c_in
        self.c_out = c_out
        self.hidden = c_out // 2
        self.n = n
        self.cv1 = Conv(c_in, 2 * self.hidden, 1, 1, 0, act=True, seed=rng)
        self.bottlenecks = [Bottleneck(self.hidden, seed=rng) for _ in range(n)]
        self.cv2 = Conv((2 + n) * self.hidden, c_out, 1, 1, 0, act=True, seed=rng)

    def out_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"c2f expects {self.c_in} channels, got {c}")
        return (self.c_out, h, w)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        y, c_cv1 = self.cv1.forward(x)
        chunks = [y[: self.hidden], y[self.hidden :]]
        bn_caches = []
        current = chunks[1]
        for bn in self.bottlenecks:
            current, c_bn = bn.forward(current)
            chunks.append(current)
            bn_caches.append(c_bn)
        z = concat_forward(chunks)
        out, c_cv2 = self.cv2.forward(z)
        return out, (c_cv1, bn_caches, c_cv2)

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        c_cv1, bn_caches, c_cv2 = cache
        dz = self.cv2.backward(dout, c_cv2)
        dchunks = concat_backward(dz, [self.hidden] * (2 + self.n))
        g = dchunks[-1]
        for i in range(self.n - 1, -1, -1):
            g = self.bottlenecks[i].backward(g, bn_caches[i]) + dchunks[i + 1]
        dy = np.concatenate([dchunks[0], g], axis=0)
        return self.cv1.backward(dy, c_cv1)

    def __call__(self, x: Tensor3) -> Tensor3:
        return Tensor3(self.forward(x.data)[0])


class Sppf:
    """Three chained 5x5 max-pools, concat with the input, 1x1 fuse conv."""

    def __init__(
        self, channels: int, kernel: int = 5, seed: "int | np.random.Generator" = 0
    ):
        rng = _as_rng(seed)
        self.channels = channels
        self.kernel = kernel
        self.padding = kernel // 2
        self.fuse = Conv(4 * channels, channels, 1, 1, 0, act=True, seed=rng)

    def out_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = shape
        if c != self.channels:
            raise ShapeError(f"sppf expects {self.channels} channels, got {c}")
        return (c, h, w)

    def concat_channels(self) -> int:
        return 4 * self.channels

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        p1, i1 = maxpool2d_forward(x, self.kernel, self.padding)
        p2, i2 = maxpool2d_forward(p1, self.kernel, self.padding)
        p3, i3 = maxpool2d_forward(p2, self.kernel, self.padding)
        z = concat_forward([x, p1, p2, p3])
        out, c_fuse = self.fuse.forward(z)
        return out, (x.shape, (i1, i2, i3), c_fuse)

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        in_shape, (i1, i2, i3), c_fuse = cache
        dz = self.fuse.backward(dout, c_fuse)
        dx, dp1, dp2, dp3 = concat_backward(dz, [self.channels] * 4)
        dp2 += maxpool2d_backward(dp3, i3, in_shape, self.kernel, self.padding)
        dp1 += maxpool2d_backward(dp2, i2, in_shape, self.kernel, self.padding)
        dx += maxpool2d_backward(dp1, i1, in_shape, self.kernel, self.padding)
        return dx

    def __call__(self, x: Tensor3) -> Tensor3:
        return Tensor3(self.forward(x.data)[0])


class GamChannelAttention:
    """Channel gate: 3D permutation to (H*W, C), two-layer MLP squeezing to
    C/4, reverse permutation, sigmoid, elementwise rescale of the input."""

    def __init__(self, channels: int, seed: "int | np.random.Generator" = 0):
        if channels % 4 != 0:
            raise ShapeError(f"channel attention needs C divisible by 4, got {channels}")
        rng = _as_rng(seed)
        self.channels = channels
        self.hidden = channels // 4
        self.w1 = _uniform_weights(rng, channels, (self.hidden, channels))
        self.b1 = np.zeros(self.hidden)
        self.w2 = _uniform_weights(rng, self.hidden, (channels, self.hidden))
        self.b2 = np.zeros(channels)

    def out_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = shape
        if c != self.channels:
            raise ShapeError(f"channel attention expects {self.channels} channels, got {c}")
        return shape

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        c, h, w = x.shape
        permuted = x.reshape(c, h * w).T  # (H*W, C)
        l1 = permuted @ self.w1.T + self.b1
        hidden = relu(l1)
        l2 = hidden @ self.w2.T + self.b2
        restored = l2.T.reshape(c, h, w)
        gate = sigmoid(restored)
        cache = {
            "x": x,
            "permuted": permuted,
            "l1": l1,
            "hidden": hidden,
            "l2": l2,
            "gate": gate,
        }
        return x * gate, cache

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        x, gate = cache["x"], cache["gate"]
        c, h, w = x.shape
        dx = dout * gate
        dgate = dout * x
        drestored = sigmoid_backward(dgate, gate)
        dl2 = drestored.reshape(c, h * w).T
        dhidden = dl2 @ self.w2
        dl1 = relu_backward(dhidden, cache["l1"])
        dpermuted = dl1 @ self.w1
        dx += dpermuted.T.reshape(c, h, w)
        return dx

    def __call__(self, x: Tensor3) -> Tensor3:
        return Tensor3(self.forward(x.data)[0])


class GamSpatialAttention:
    """Spatial gate: 7x7 conv squeezing channels by ``rate``, ReLU, 7x7 conv
    restoring them, sigmoid, elementwise rescale."""

    def __init__(
        self, channels: int, rate: int = 4, seed: "int | np.random.Generator" = 0
    ):
        if channels % rate != 0:
            raise ShapeError(
                f"spatial attention needs C divisible by rate {rate}, got {channels}"
            )
        rng = _as_rng(seed)
        self.channels = channels
        self.rate = rate
        mid = channels // rate
        self.spec = ShapeSpec(7, 1, 3)
        self.w1 = _uniform_weights(rng, channels * 49, (mid, channels, 7, 7))
        self.b1 = np.zeros(mid)
        self.w2 = _uniform_weights(rng, mid * 49, (channels, mid, 7, 7))
        self.b2 = np.zeros(channels)

    def out_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = shape
        if c != self.channels:
            raise ShapeError(f"spatial attention expects {self.channels} channels, got {c}")
        return shape

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        a = conv2d_forward(x, self.w1, self.b1, self.spec)
        r = relu(a)
        pre = conv2d_forward(r, self.w2, self.b2, self.spec)
        gate = sigmoid(pre)
        return x * gate, {"x": x, "a": a, "r_shape": r.shape, "gate": gate}

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        x, gate = cache["x"], cache["gate"]
        dx = dout * gate
        dgate = dout * x
        dpre = sigmoid_backward(dgate, gate)
        dr = conv2d_backward_input(dpre, self.w2, cache["r_shape"], self.spec)
        da = relu_backward(dr, cache["a"])
        dx += conv2d_backward_input(da, self.w1, x.shape, self.spec)
        return dx

    def __call__(self, x: Tensor3) -> Tensor3:
        return Tensor3(self.forward(x.data)[0])


class Gam:
    """Global attention: channel gate then spatial gate, shape preserving."""

    def __init__(
        self, channels: int, rate: int = 4, seed: "int | np.random.Generator" = 0
    ):
        rng = _as_rng(seed)
        self.channels = channels
        self.channel_attention = GamChannelAttention(channels, seed=rng)
        self.spatial_attention = GamSpatialAttention(channels, rate, seed=rng)

    def out_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        return self.spatial_attention.out_shape(self.channel_attention.out_shape(shape))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        y, c_ch = self.channel_attention.forward(x)
        out, c_sp = self.spatial_attention.forward(y)
        return out, (c_ch, c_sp)

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        c_ch, c_sp = cache
        dy = self.spatial_attention.backward(dout, c_sp)
        return self.channel_attention.backward(dy, c_ch)

    def __call__(self, x: Tensor3) -> Tensor3:
        return Tensor3(self.forward(x.data)[0])


class Upsample:
    """Nearest-neighbour upsampling by an integer factor."""

    def __init__(self, factor: int = 2):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = factor

    def out_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = shape
        return (c, h * self.factor, w * self.factor)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        return upsample_forward(x, self.factor), None

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        return upsample_backward(dout, self.factor)

    def __call__(self, x: Tensor3) -> Tensor3:
        return Tensor3(self.forward(x.data)[0])


class Concat:
    """Channel-wise concatenation of same-resolution inputs."""

    def out_shape(self, shapes: list[tuple[int, int, int]]) -> tuple[int, int, int]:
        base = shapes[0][1:]
        for s in shapes[1:]:
            if s[1:] != base:
                raise ShapeError(f"concat spatial mismatch: {shapes}")
        return (sum(s[0] for s in shapes), *base)

    def forward(self, xs: list[np.ndarray]) -> tuple[np.ndarray, Any]:
        return concat_forward(xs), [x.shape[0] for x in xs]

    def backward(self, dout: np.ndarray, cache: Any) -> list[np.ndarray]:
        return concat_backward(dout, cache)


class HeadBranch:
    """Decoupled per-scale head stub: separate conv stacks emitting raw
    box deltas (4 channels) and category logits."""

    def __init__(
        self, channels: int, num_categories: int, seed: "int | np.random.Generator" = 0
    ):
        rng = _as_rng(seed)
        self.channels = channels
        self.num_categories = num_categories
        self.reg_conv = Conv(channels, channels, 3, 1, 1, act=True, seed=rng)
        self.reg_out = Conv(channels, 4, 1, 1, 0, act=False, seed=rng)
        self.cls_conv = Conv(channels, channels, 3, 1, 1, act=True, seed=rng)
        self.cls_out = Conv(channels, num_categories, 1, 1, 0, act=False, seed=rng)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, Any]:
        r1, c_r1 = self.reg_conv.forward(x)
        box, c_r2 = self.reg_out.forward(r1)
        s1, c_c1 = self.cls_conv.forward(x)
        cls, c_c2 = self.cls_out.forward(s1)
        return box, cls, (c_r1, c_r2, c_c1, c_c2)

    def backward(self, dbox: np.ndarray, dcls: np.ndarray, cache: Any) -> np.ndarray:
        c_r1, c_r2, c_c1, c_c2 = cache
        dr1 = self.reg_out.backward(dbox, c_r2)
        dx = self.reg_conv.backward(dr1, c_r1)
        ds1 = self.cls_out.backward(dcls, c_c2)
        dx += self.cls_conv.backward(ds1, c_c1)
        return dx
