"""Shared generators: well-conditioned random box pairs for gradient checks,
synthetic detection corpora, and small annotation files."""

from __future__ import annotations

import datetime as dt
import json
import random

import pytest

from trapeval.boxes import BoundingBox, Detection, GroundTruth

# Central differences use h = 1e-6; pairs are rejected while any min/max tie
# or overlap boundary sits close enough to a kink (or an ill-conditioned
# near-zero overlap) to poison the comparison.
FD_STEP = 1e-6
TIE_MARGIN = 10 * FD_STEP
OVERLAP_MARGIN = 1e-3


def random_box(rng: random.Random, lo: float = 0.0, hi: float = 8.0) -> BoundingBox:
    x1 = rng.uniform(lo, hi)
    y1 = rng.uniform(lo, hi)
    return BoundingBox(x1, y1, x1 + rng.uniform(0.3, 5.0), y1 + rng.uniform(0.3, 5.0))


def well_conditioned(pred: BoundingBox, gt: BoundingBox) -> bool:
    ties = (
        abs(pred.x1 - gt.x1),
        abs(pred.y1 - gt.y1),
        abs(pred.x2 - gt.x2),
        abs(pred.y2 - gt.y2),
    )
    if min(ties) <= TIE_MARGIN:
        return False
    iw = min(pred.x2, gt.x2) - max(pred.x1, gt.x1)
    ih = min(pred.y2, gt.y2) - max(pred.y1, gt.y1)
    for margin in (iw, ih):
        if -OVERLAP_MARGIN < margin < OVERLAP_MARGIN:
            return False
    if iw > 0 and ih > 0 and iw * ih < OVERLAP_MARGIN:
        return False
    return True


def gradient_pairs(seed: int, count: int) -> list[tuple[BoundingBox, BoundingBox]]:
    """Deterministic mix of overlapping, disjoint and contained pairs, all
    safely away from gradient kinks."""
    rng = random.Random(seed)
    pairs: list[tuple[BoundingBox, BoundingBox]] = []
    while len(pairs) < count:
        style = len(pairs) % 3
        gt = random_box(rng)
        if style == 0:  # natural mix of overlap/disjoint
            pred = random_box(rng)
        elif style == 1:  # contained
            dx = rng.uniform(0.05, 0.3) * gt.width
            dy = rng.uniform(0.05, 0.3) * gt.height
            pred = BoundingBox(gt.x1 + dx, gt.y1 + dy, gt.x2 - dx, gt.y2 - dy)
        else:  # forced disjoint
            shift = gt.width + gt.height + rng.uniform(0.5, 3.0)
            pred = random_box(rng).translated(shift + 8.0, shift + 8.0)
        if pred.area <= 0:
            continue
        if well_conditioned(pred, gt):
            pairs.append((pred, gt))
    return pairs


def synthetic_instance(
    rng: random.Random,
    max_detections: int = 6,
    max_ground_truths: int = 4,
    max_categories: int = 3,
    images: int = 2,
) -> tuple[list[Detection], list[GroundTruth]]:
    """Small random evaluation instance spread over a few images."""
    detections: list[Detection] = []
    ground_truths: list[GroundTruth] = []
    for g in range(rng.randint(1, max_ground_truths)):
        image_id = f"im{rng.randrange(images)}"
        box = random_box(rng, 0, 6)
        ground_truths.append(
            GroundTruth(box, rng.randrange(max_categories), image_id)
        )
    for d in range(rng.randint(0, max_detections)):
        image_id = f"im{rng.randrange(images)}"
        if ground_truths and rng.random() < 0.7:
            base = rng.choice(ground_truths).box
            jitter = rng.uniform(0.0, 1.5)
            box = BoundingBox(
                base.x1 + rng.uniform(-jitter, jitter),
                base.y1 + rng.uniform(-jitter, jitter),
                base.x2 + rng.uniform(-jitter, jitter),
                base.y2 + rng.uniform(-jitter, jitter),
            ).normalized()
            if box.area == 0:
                box = random_box(rng, 0, 6)
        else:
            box = random_box(rng, 0, 6)
        detections.append(
            Detection(
                box,
                rng.randrange(max_categories),
                round(rng.random(), 3),
                image_id,
            )
        )
    return detections, ground_truths


def make_annotation_payload(
    num_images: int = 20,
    num_locations: int = 20,
    seed: int = 0,
    categories: dict[int, str] | None = None,
    empty_every: int = 0,
) -> dict:
    """COCO-style payload with location/date extensions for split tests."""
    categories = categories or {1: "bobcat", 2: "coyote", 3: "empty"}
    rng = random.Random(seed)
    images = []
    annotations = []
    ann_id = 0
    for i in range(num_images):
        day = rng.randint(1, 28)
        images.append(
            {
                "id": f"img{i:04d}",
                "width": 100,
                "height": 80,
                "location": i % num_locations,
                "date": dt.date(2023, rng.randint(1, 12), day).isoformat(),
                "file_name": f"img{i:04d}.jpg",
            }
        )
        if empty_every and i % empty_every == 0:
            category = next(c for c, n in categories.items() if n == "empty")
        else:
            non_empty = [c for c, n in categories.items() if n != "empty"]
            category = rng.choice(non_empty)
        annotations.append(
            {
                "id": ann_id,
                "image_id": f"img{i:04d}",
                "category_id": category,
                "bbox": [rng.uniform(0, 50), rng.uniform(0, 40), 20, 15],
            }
        )
        ann_id += 1
    return {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": c, "name": n} for c, n in categories.items()],
    }


@pytest.fixture
def annotation_file(tmp_path):
    def write(payload: dict, name: str = "annotations.json") -> str:
        path = tmp_path / name
        path.write_text(json.dumps(payload), encoding="utf-8")
        return str(path)

    return write
