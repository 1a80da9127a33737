"""Axis-aligned box geometry shared by the loss family and the evaluator.

Boxes are kept in corner form (x1, y1, x2, y2); center/size views are derived
on demand. Degenerate (zero-area) boxes are legal everywhere: IoU with a
degenerate union is 0 by convention and the enclosing hull is still defined.
All arithmetic is double precision.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def normalized(self) -> "BoundingBox":
        """Return the same region with corners ordered (x1 <= x2, y1 <= y2)."""
        x1, x2 = sorted((float(self.x1), float(self.x2)))
        y1, y2 = sorted((float(self.y1), float(self.y2)))
        return BoundingBox(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)


@dataclass(frozen=True)
class GroundTruth:
    box: BoundingBox
    category_id: int
    image_id: str = ""


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    category_id: int
    confidence: float
    image_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def union_area(a: BoundingBox, b: BoundingBox) -> float:
    return a.area + b.area - intersection_area(a, b)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when the union has no area."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def enclosing_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    """Smallest axis-aligned box containing both inputs."""
    return BoundingBox(
        min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2)
    )


def center_distance_sq(a: BoundingBox, b: BoundingBox) -> float:
    ax, ay = a.center
    bx, by = b.center
    return (ax - bx) ** 2 + (ay - by) ** 2
