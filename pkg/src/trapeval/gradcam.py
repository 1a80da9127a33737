"""Gradient-weighted activation heatmaps over a completed graph run.

The procedure: (1) gradients of the selected head score w.r.t. the chosen
layer via reverse mode, (2) global average of each channel's gradients as
that channel's weight, (3) weighted sum of the feature maps, (4) ReLU to keep
positive contributions, (5) nearest-neighbour upsample to image resolution
and max-normalization into [0, 1]. An all-zero rectified map stays all-zero
rather than dividing by zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._viridis import VIRIDIS_256
from .errors import GraphError, ShapeError
from .graph import GraphRun, ScoreSelector
from .tensor import Tensor3, upsample_forward


@dataclass(frozen=True)
class Heatmap:
    """Single-channel attention map, values in [0, 1], image-sized."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"heatmap expects 2 dims, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def pin_selector(run: GraphRun, layer: str, selector: ScoreSelector) -> tuple[ScoreSelector, float]:
    """Pin an open selector to the best head cell the layer can influence.

    A selector without an explicit scale considers each head scale; only
    scales whose input path contains the layer are eligible, so the heatmap
    always has gradient flow. An explicit scale is honored as-is.
    """
    if selector.scale is not None:
        si, cy, cx, value = selector.resolve(run)
        return replace(selector, scale=si, cell=(cy, cx)), value
    detect = run.graph.detect_spec
    eligible = [
        i
        for i, src in enumerate(detect.inputs)
        if layer == f"{detect.name}/cls{i}" or layer in run.graph.spec.ancestors(src)
    ]
    if not eligible:
        raise GraphError(f"layer {layer!r} is not an ancestor of any head scale")
    best: tuple[float, ScoreSelector] | None = None
    for i in eligible:
        si, cy, cx, value = replace(selector, scale=i).resolve(run)
        if best is None or value > best[0]:
            best = (value, replace(selector, scale=si, cell=(cy, cx)))
    return best[1], best[0]  # type: ignore[index]


def activation_cam(grads: np.ndarray, activation: np.ndarray) -> np.ndarray:
    """Rectified gradient-weighted channel sum: global-average each channel's
    gradients into a scalar weight, weight-sum the feature maps, ReLU."""
    weights = grads.mean(axis=(1, 2))
    cam = np.tensordot(weights, activation, axes=([0], [0]))
    return np.maximum(cam, 0.0)


def normalize_unit(cam: np.ndarray) -> np.ndarray:
    """Scale a non-negative map so its peak is 1; all-zero maps stay zero."""
    peak = cam.max()
    if peak > 0.0:
        return cam / peak
    return cam.copy()


def gradcam_heatmap(run: GraphRun, layer: str, selector: ScoreSelector) -> Heatmap:
    """Weighted-channel activation map for one layer, upscaled and normalized."""
    pinned, _ = pin_selector(run, layer, selector)
    grads = run.graph.backward_to_layer(run, pinned, layer).data
    cam = activation_cam(grads, run.activations[layer])

    _, img_h, img_w = run.graph.input_shape
    h, w = cam.shape
    if img_h % h != 0 or img_w % w != 0:
        raise ShapeError(
            f"layer grid {h}x{w} does not divide image size {img_h}x{img_w}"
        )
    factor = img_h // h
    if img_w // w != factor:
        raise ShapeError(f"non-uniform upsample factors for grid {h}x{w}")
    upsampled = upsample_forward(cam[None, :, :], factor)[0]
    return Heatmap(normalize_unit(upsampled))


def viridis_map(value: float) -> tuple[int, int, int]:
    """Map a [0, 1] value to RGB bytes by linear interpolation over the
    embedded 256-entry viridis table; out-of-range values are clamped."""
    v = min(max(float(value), 0.0), 1.0)
    position = v * 255.0
    lo = int(position)
    hi = min(lo + 1, 255)
    t = position - lo
    a, b = VIRIDIS_256[lo], VIRIDIS_256[hi]
    return (
        int(round(a[0] + (b[0] - a[0]) * t)),
        int(round(a[1] + (b[1] - a[1]) * t)),
        int(round(a[2] + (b[2] - a[2]) * t)),
    )


def colorize(heat: Heatmap) -> Tensor3:
    """Render a heatmap through the viridis table as a 3-channel byte image."""
    table = np.asarray(VIRIDIS_256, dtype=np.float64)
    position = np.clip(heat.data, 0.0, 1.0) * 255.0
    lo = position.astype(int)
    hi = np.minimum(lo + 1, 255)
    t = position - lo
    rgb = table[lo] + (table[hi] - table[lo]) * t[..., None]
    return Tensor3(np.rint(rgb).transpose(2, 0, 1))


def overlay(image: Tensor3, heat: Heatmap, alpha: float = 0.5) -> Tensor3:
    """Blend the colormapped heatmap onto a 3-channel image: alpha 0 keeps
    the image, alpha 1 shows the pure heatmap colors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    if image.channels != 3:
        raise ShapeError(f"overlay expects a 3-channel image, got {image.channels}")
    if (image.height, image.width) != (heat.height, heat.width):
        raise ShapeError(
            f"image {image.height}x{image.width} vs heatmap {heat.height}x{heat.width}"
        )
    colors = colorize(heat)
    return Tensor3((1.0 - alpha) * image.data + alpha * colors.data)
