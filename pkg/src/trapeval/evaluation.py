"""Detection evaluation: matching, precision/recall, PR curves, AP and mAP.

Matching is greedy by descending confidence with best-IoU assignment and
one-to-one ground-truth consumption. IoU gating happens before the category
check, so a detection may consume a ground truth of another category; that
pair lands in the corresponding confusion-matrix cross cell and counts as a
false positive for precision/recall purposes.

Two false-negative notions coexist and are kept separate on purpose:

- reporting FN (per-category tp/fp/fn, recall): ground truths not *correctly*
  detected, i.e. total minus TP, so per-category TP + FN sums to the number
  of ground truths;
- confusion-matrix background column: ground truths no detection consumed at
  all (cross-matched ones sit in their cross cell instead).

PR curves sweep the full confidence range, so the configured confidence
threshold applies only to operating-point reporting, never to curves or AP.
"""

from __future__ import annotations

import bisect
import csv
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import IO, Callable, Iterable, Mapping, Sequence

from .boxes import BoundingBox, Detection, GroundTruth, iou
from .errors import CategoryError, EvalError, FormatError

DEFAULT_IOU_THRESHOLD = 0.45
DEFAULT_CONFIDENCE_THRESHOLD = 0.25
MAP_RANGE_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = tuple(k / 100.0 for k in range(101))

THREADS_ENV_VAR = "TRAPEVAL_THREADS"


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must be in (0, 1)")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in [0, 1]")


@dataclass(frozen=True)
class DetectionFlag:
    detection_index: int
    is_tp: bool
    matched_gt_index: int | None


@dataclass(frozen=True)
class MatchOutcome:
    """Result of matching one image's detections against its ground truths.

    ``flags`` covers retained detections in processing order (descending
    confidence); ``unmatched_gt_indices`` lists ground truths no detection
    consumed.
    """

    detections: tuple[Detection, ...]
    ground_truths: tuple[GroundTruth, ...]
    flags: tuple[DetectionFlag, ...]
    unmatched_gt_indices: tuple[int, ...]

    @property
    def tp_count(self) -> int:
        return sum(1 for f in self.flags if f.is_tp)

    @property
    def fp_count(self) -> int:
        return sum(1 for f in self.flags if not f.is_tp)


def match_detections(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    config: MatchConfig | None = None,
    categories: Iterable[int] | None = None,
) -> MatchOutcome:
    """Greedy one-image matching per the confusion-matrix flow.

    Detections below the confidence threshold are discarded; the rest are
    processed in decreasing confidence (ties by input order), each consuming
    the still-unmatched ground truth with the highest IoU at or above the IoU
    threshold. Same category => TP, otherwise FP.
    """
    config = config or MatchConfig()
    if categories is not None:
        known = set(categories)
        for d in detections:
            if d.category_id not in known:
                raise CategoryError(f"detection references unknown category {d.category_id}")
        for g in ground_truths:
            if g.category_id not in known:
                raise CategoryError(f"ground truth references unknown category {g.category_id}")

    retained = [
        (i, d) for i, d in enumerate(detections) if d.confidence >= config.confidence_threshold
    ]
    retained.sort(key=lambda item: -item[1].confidence)

    available = set(range(len(ground_truths)))
    flags: list[DetectionFlag] = []
    for det_index, det in retained:
        best_gt = None
        best_iou = 0.0
        for gi in sorted(available):
            overlap = iou(det.box, ground_truths[gi].box)
            if overlap >= config.iou_threshold and overlap > best_iou:
                best_iou = overlap
                best_gt = gi
        if best_gt is None:
            flags.append(DetectionFlag(det_index, False, None))
        else:
            available.discard(best_gt)
            correct = ground_truths[best_gt].category_id == det.category_id
            flags.append(DetectionFlag(det_index, correct, best_gt))
    return MatchOutcome(
        detections=tuple(detections),
        ground_truths=tuple(ground_truths),
        flags=tuple(flags),
        unmatched_gt_indices=tuple(sorted(available)),
    )


def precision(tp: int, fp: int) -> float:
    """tp / (tp + fp); vacuously 1.0 when there are no predictions."""
    if tp < 0 or fp < 0:
        raise ValueError("counts must be >= 0")
    if tp + fp == 0:
        return 1.0
    return tp / (tp + fp)


def recall(tp: int, fn: int) -> float:
    """tp / (tp + fn); 0.0 when there are no ground truths."""
    if tp < 0 or fn < 0:
        raise ValueError("counts must be >= 0")
    if tp + fn == 0:
        return 0.0
    return tp / (tp + fn)


@dataclass(frozen=True)
class PrPoint:
    confidence: float
    cum_tp: int
    cum_fp: int
    precision: float
    recall: float


def _group_by_image(
    detections: Sequence[Detection], ground_truths: Sequence[GroundTruth]
) -> dict[str, tuple[list[Detection], list[GroundTruth]]]:
    grouped: dict[str, tuple[list[Detection], list[GroundTruth]]] = defaultdict(
        lambda: ([], [])
    )
    for d in detections:
        grouped[d.image_id][0].append(d)
    for g in ground_truths:
        grouped[g.image_id][1].append(g)
    return dict(grouped)


def pr_curve(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    config: MatchConfig | None = None,
) -> list[PrPoint]:
    """Cumulative precision/recall table for one category across the corpus.

    Inputs must already be restricted to a single category. The confidence
    threshold is deliberately ignored: the curve itself sweeps confidence.
    """
    config = config or MatchConfig()
    categories = {g.category_id for g in ground_truths} | {
        d.category_id for d in detections
    }
    if len(categories) > 1:
        raise EvalError(f"pr_curve expects one category, got {sorted(categories)}")
    if not ground_truths:
        raise EvalError("no ground truths for the category; AP undefined")

    sweep = replace(config, confidence_threshold=0.0)
    grouped = _group_by_image(detections, ground_truths)
    scored: list[tuple[float, int, bool]] = []
    position = 0
    for image_id in sorted(grouped):
        dets, gts = grouped[image_id]
        outcome = match_detections(dets, gts, sweep)
        for flag in outcome.flags:
            scored.append(
                (outcome.detections[flag.detection_index].confidence, position, flag.is_tp)
            )
            position += 1
    scored.sort(key=lambda item: (-item[0], item[1]))

    n_gt = len(ground_truths)
    points: list[PrPoint] = []
    cum_tp = cum_fp = 0
    for confidence, _, is_tp in scored:
        cum_tp += 1 if is_tp else 0
        cum_fp += 0 if is_tp else 1
        points.append(
            PrPoint(
                confidence=confidence,
                cum_tp=cum_tp,
                cum_fp=cum_fp,
                precision=precision(cum_tp, cum_fp),
                recall=cum_tp / n_gt,
            )
        )
    return points


def interpolate_precision(curve: Sequence[PrPoint]) -> Callable[[float], float]:
    """p(r) = max precision over curve points whose recall is >= r.

    Monotonically non-increasing in r; 0 beyond the highest achieved recall.
    """
    if not curve:
        raise ValueError("curve must be non-empty")
    by_recall = sorted(curve, key=lambda p: p.recall)
    recalls = [p.recall for p in by_recall]
    suffix_max: list[float] = [0.0] * len(by_recall)
    running = 0.0
    for i in range(len(by_recall) - 1, -1, -1):
        running = max(running, by_recall[i].precision)
        suffix_max[i] = running

    def interpolated(r: float) -> float:
        i = bisect.bisect_left(recalls, r)
        if i >= len(recalls):
            return 0.0
        return suffix_max[i]

    return interpolated


def average_precision(curve: Sequence[PrPoint], mode: str = "grid101") -> float:
    """Area-style summary of the interpolated PR envelope.

    ``grid101``: mean interpolated precision over recalls 0.00..1.00 step
    0.01 (primary). ``trapezoid``: trapezoidal area under the envelope over
    the achieved recall breakpoints (secondary).
    """
    if not curve:
        return 0.0
    interp = interpolate_precision(curve)
    if mode == "grid101":
        return sum(interp(r) for r in RECALL_GRID) / len(RECALL_GRID)
    if mode == "trapezoid":
        knots = sorted({0.0, 1.0, *(p.recall for p in curve)})
        area = 0.0
        for lo, hi in zip(knots, knots[1:]):
            area += (hi - lo) * (interp(lo) + interp(hi)) / 2.0
        return area
    raise ValueError(f"unknown AP mode {mode!r}")


def mean_average_precision(per_category_ap: Mapping[int, float]) -> float:
    """Unweighted mean over categories that have a defined AP."""
    if not per_category_ap:
        raise EvalError("mean average precision over an empty category map")
    return sum(per_category_ap.values()) / len(per_category_ap)


@dataclass(frozen=True)
class CategoryMetrics:
    category_id: int
    ap: float
    ap_trapezoid: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count grid over (true category, predicted category).

    The trailing row/column is background: unmatched detections land in the
    background row, completely-unmatched ground truths in the background
    column.
    """

    categories: tuple[int, ...]
    grid: tuple[tuple[int, ...], ...]

    @property
    def background_index(self) -> int:
        return len(self.categories)

    def cell(self, true_category: int | None, predicted_category: int | None) -> int:
        row = self.background_index if true_category is None else self.categories.index(true_category)
        col = self.background_index if predicted_category is None else self.categories.index(predicted_category)
        return self.grid[row][col]

    def write_csv(self, stream: IO[str]) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        labels = [str(c) for c in self.categories] + ["background"]
        writer.writerow(["true\\pred"] + labels)
        for label, row in zip(labels, self.grid):
            writer.writerow([label] + list(row))


def confusion_matrix(
    outcomes: Iterable[MatchOutcome], categories: Sequence[int]
) -> ConfusionMatrix:
    cats = tuple(sorted(categories))
    index = {c: i for i, c in enumerate(cats)}
    n = len(cats)
    grid = [[0] * (n + 1) for _ in range(n + 1)]
    for outcome in outcomes:
        for flag in outcome.flags:
            det = outcome.detections[flag.detection_index]
            if det.category_id not in index:
                raise CategoryError(f"detection category {det.category_id} not configured")
            col = index[det.category_id]
            if flag.matched_gt_index is None:
                grid[n][col] += 1
            else:
                gt = outcome.ground_truths[flag.matched_gt_index]
                grid[index[gt.category_id]][col] += 1
        for gi in outcome.unmatched_gt_indices:
            gt = outcome.ground_truths[gi]
            if gt.category_id not in index:
                raise CategoryError(f"ground-truth category {gt.category_id} not configured")
            grid[index[gt.category_id]][n] += 1
    return ConfusionMatrix(cats, tuple(tuple(row) for row in grid))


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}")
    if value == 0:
        return os.cpu_count() or 1
    return max(1, value)


def match_corpus(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    config: MatchConfig | None = None,
    categories: Iterable[int] | None = None,
) -> list[MatchOutcome]:
    """Per-image matching over a corpus; image order (hence output) is sorted
    by image id, independent of worker scheduling."""
    config = config or MatchConfig()
    grouped = _group_by_image(detections, ground_truths)
    image_ids = sorted(grouped)
    cats = tuple(categories) if categories is not None else None

    def run(image_id: str) -> MatchOutcome:
        dets, gts = grouped[image_id]
        return match_detections(dets, gts, config, cats)

    workers = _thread_count()
    if workers <= 1 or len(image_ids) <= 1:
        return [run(i) for i in image_ids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, image_ids))


@dataclass(frozen=True)
class CorpusMetrics:
    per_category: tuple[CategoryMetrics, ...]
    map50: float
    map50_95: float
    confusion: ConfusionMatrix


def _category_set(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    categories: Iterable[int] | None,
) -> tuple[int, ...]:
    if categories is not None:
        return tuple(sorted(set(categories)))
    return tuple(sorted({g.category_id for g in ground_truths} | {d.category_id for d in detections}))


def per_category_ap(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    config: MatchConfig | None = None,
    categories: Iterable[int] | None = None,
    mode: str = "grid101",
) -> dict[int, float]:
    """AP per category with at least one ground truth; others are excluded."""
    config = config or MatchConfig()
    result: dict[int, float] = {}
    for cat in _category_set(detections, ground_truths, categories):
        cat_gts = [g for g in ground_truths if g.category_id == cat]
        if not cat_gts:
            continue
        cat_dets = [d for d in detections if d.category_id == cat]
        curve = pr_curve(cat_dets, cat_gts, config)
        result[cat] = average_precision(curve, mode=mode)
    return result


def map_over_iou_range(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    thresholds: Sequence[float] = MAP_RANGE_THRESHOLDS,
    config: MatchConfig | None = None,
    categories: Iterable[int] | None = None,
) -> float:
    """Mean of mAP evaluated at each IoU threshold (default 0.50..0.95)."""
    if not thresholds:
        raise ValueError("thresholds must be non-empty")
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"IoU threshold {t} outside (0, 1)")
    config = config or MatchConfig()
    values = []
    for t in thresholds:
        aps = per_category_ap(
            detections, ground_truths, replace(config, iou_threshold=t), categories
        )
        values.append(mean_average_precision(aps))
    return sum(values) / len(values)


def evaluate_corpus(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    config: MatchConfig | None = None,
    categories: Iterable[int] | None = None,
) -> CorpusMetrics:
    """Full evaluation: per-category AP and operating-point counts, mAP50,
    mAP50-95 and the confusion matrix."""
    config = config or MatchConfig()
    cats = _category_set(detections, ground_truths, categories)
    outcomes = match_corpus(detections, ground_truths, config, cats)

    tp: dict[int, int] = defaultdict(int)
    fp: dict[int, int] = defaultdict(int)
    gt_total: dict[int, int] = defaultdict(int)
    for g in ground_truths:
        gt_total[g.category_id] += 1
    for outcome in outcomes:
        for flag in outcome.flags:
            det_cat = outcome.detections[flag.detection_index].category_id
            if flag.is_tp:
                tp[det_cat] += 1
            else:
                fp[det_cat] += 1

    config50 = replace(config, iou_threshold=0.5)
    aps = per_category_ap(detections, ground_truths, config50, cats)
    aps_trap = per_category_ap(detections, ground_truths, config50, cats, mode="trapezoid")

    rows = []
    for cat in cats:
        if gt_total[cat] == 0 and tp[cat] == 0 and fp[cat] == 0:
            continue
        fn = gt_total[cat] - tp[cat]
        rows.append(
            CategoryMetrics(
                category_id=cat,
                ap=aps.get(cat, 0.0),
                ap_trapezoid=aps_trap.get(cat, 0.0),
                tp=tp[cat],
                fp=fp[cat],
                fn=fn,
                precision=precision(tp[cat], fp[cat]),
                recall=recall(tp[cat], fn),
            )
        )
    map50 = mean_average_precision(aps) if aps else 0.0
    map50_95 = (
        map_over_iou_range(detections, ground_truths, MAP_RANGE_THRESHOLDS, config, cats)
        if aps
        else 0.0
    )
    return CorpusMetrics(
        per_category=tuple(rows),
        map50=map50,
        map50_95=map50_95,
        confusion=confusion_matrix(outcomes, cats),
    )


DETECTIONS_CSV_HEADER = ["image_id", "category_id", "confidence", "x1", "y1", "x2", "y2"]


def read_detections_csv(stream: IO[str]) -> list[Detection]:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("detections CSV is empty (missing header)")
    if [h.strip() for h in header] != DETECTIONS_CSV_HEADER:
        raise FormatError(
            f"detections CSV header {header!r} != {DETECTIONS_CSV_HEADER!r}"
        )
    detections = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 7:
            raise FormatError(f"line {lineno}: expected 7 fields, got {len(row)}")
        try:
            image_id = row[0]
            category_id = int(row[1])
            confidence = float(row[2])
            x1, y1, x2, y2 = (float(v) for v in row[3:7])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        if not 0.0 <= confidence <= 1.0:
            raise FormatError(f"line {lineno}: confidence {confidence} outside [0, 1]")
        if not all(map(math.isfinite, (x1, y1, x2, y2))):
            raise FormatError(f"line {lineno}: non-finite coordinate")
        detections.append(
            Detection(
                box=BoundingBox(x1, y1, x2, y2).normalized(),
                category_id=category_id,
                confidence=confidence,
                image_id=image_id,
            )
        )
    return detections


def write_detections_csv(detections: Sequence[Detection], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(DETECTIONS_CSV_HEADER)
    for d in detections:
        writer.writerow(
            [
                d.image_id,
                d.category_id,
                f"{d.confidence:.12g}",
                f"{d.box.x1:.12g}",
                f"{d.box.y1:.12g}",
                f"{d.box.x2:.12g}",
                f"{d.box.y2:.12g}",
            ]
        )


def write_metrics_csv(metrics: CorpusMetrics, stream: IO[str]) -> None:
    """Per-category rows then the mAP summary lines."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["category_id", "ap", "precision", "recall", "tp", "fp", "fn"])
    for row in metrics.per_category:
        writer.writerow(
            [
                row.category_id,
                f"{row.ap:.12g}",
                f"{row.precision:.12g}",
                f"{row.recall:.12g}",
                row.tp,
                row.fp,
                row.fn,
            ]
        )
    writer.writerow(["mAP50", f"{metrics.map50:.12g}"])
    writer.writerow(["mAP50-95", f"{metrics.map50_95:.12g}"])


def write_ap_modes_csv(metrics: CorpusMetrics, stream: IO[str]) -> None:
    """Primary (101-point) vs secondary (trapezoidal) AP, side by side."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["category_id", "ap_grid101", "ap_trapezoid"])
    for row in metrics.per_category:
        writer.writerow([row.category_id, f"{row.ap:.12g}", f"{row.ap_trapezoid:.12g}"])
