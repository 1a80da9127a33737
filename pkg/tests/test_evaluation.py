import csv
import io
import random
from collections import defaultdict

import pytest

from trapeval.boxes import BoundingBox, Detection, GroundTruth
from trapeval.errors import CategoryError, EvalError, FormatError
from trapeval.evaluation import (
    MatchConfig,
    average_precision,
    confusion_matrix,
    evaluate_corpus,
    interpolate_precision,
    map_over_iou_range,
    match_corpus,
    match_detections,
    mean_average_precision,
    per_category_ap,
    pr_curve,
    precision,
    read_detections_csv,
    recall,
    write_detections_csv,
    write_metrics_csv,
    PrPoint,
)

from conftest import synthetic_instance

B = BoundingBox


def det(box, cat=0, conf=0.9, image="im0"):
    return Detection(box, cat, conf, image)


def gt(box, cat=0, image="im0"):
    return GroundTruth(box, cat, image)


# --- matching -------------------------------------------------------------------

def test_match_single_true_positive():
    outcome = match_detections([det(B(0, 0, 2, 2))], [gt(B(0, 0, 2, 2))])
    assert outcome.tp_count == 1 and outcome.fp_count == 0
    assert outcome.unmatched_gt_indices == ()


def test_match_no_detections_all_fn():
    outcome = match_detections([], [gt(B(0, 0, 1, 1)), gt(B(2, 2, 3, 3))])
    assert outcome.tp_count == 0 and outcome.fp_count == 0
    assert outcome.unmatched_gt_indices == (0, 1)


def test_match_discards_low_confidence():
    outcome = match_detections(
        [det(B(0, 0, 2, 2), conf=0.1)], [gt(B(0, 0, 2, 2))], MatchConfig(0.45, 0.25)
    )
    assert outcome.flags == ()
    assert outcome.unmatched_gt_indices == (0,)


def test_match_cross_category_counts_fp_but_consumes_gt():
    outcome = match_detections([det(B(0, 0, 2, 2), cat=1)], [gt(B(0, 0, 2, 2), cat=2)])
    assert outcome.tp_count == 0 and outcome.fp_count == 1
    assert outcome.flags[0].matched_gt_index == 0
    assert outcome.unmatched_gt_indices == ()


def test_match_one_to_one_consumption():
    detections = [det(B(0, 0, 2, 2), conf=0.9), det(B(0, 0, 2, 2), conf=0.8)]
    outcome = match_detections(detections, [gt(B(0, 0, 2, 2))])
    assert outcome.tp_count == 1 and outcome.fp_count == 1


def test_match_unknown_category_rejected():
    with pytest.raises(CategoryError):
        match_detections([det(B(0, 0, 1, 1), cat=9)], [], categories=[0, 1])
    with pytest.raises(CategoryError):
        match_detections([], [gt(B(0, 0, 1, 1), cat=9)], categories=[0, 1])


def _slow_iou(a, b):
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return inter / union if union > 0 else 0.0


def _slow_match(detections, ground_truths, config):
    """Independent re-statement of the greedy rule with plain loops."""
    order = sorted(
        [i for i, d in enumerate(detections) if d.confidence >= config.confidence_threshold],
        key=lambda i: (-detections[i].confidence, i),
    )
    taken = [False] * len(ground_truths)
    flags = []
    for i in order:
        best, best_iou = None, 0.0
        for j, g in enumerate(ground_truths):
            if taken[j]:
                continue
            value = _slow_iou(detections[i].box, g.box)
            if value >= config.iou_threshold and value > best_iou:
                best, best_iou = j, value
        if best is None:
            flags.append((i, False, None))
        else:
            taken[best] = True
            flags.append((i, detections[i].category_id == ground_truths[best].category_id, best))
    fn = tuple(j for j, used in enumerate(taken) if not used)
    return flags, fn


def test_match_agrees_with_exhaustive_oracle():
    rng = random.Random(2024)
    config = MatchConfig(0.45, 0.25)
    for _ in range(300):
        dets, gts = synthetic_instance(rng, images=1)
        outcome = match_detections(dets, gts, config)
        flags, fn = _slow_match(dets, gts, config)
        assert [(f.detection_index, f.is_tp, f.matched_gt_index) for f in outcome.flags] == flags
        assert outcome.unmatched_gt_indices == fn


# --- precision / recall -----------------------------------------------------------

@pytest.mark.parametrize(
    "tp,fp,expected", [(2, 0, 1.0), (0, 5, 0.0), (3, 1, 0.75), (0, 0, 1.0)]
)
def test_precision_values(tp, fp, expected):
    assert precision(tp, fp) == expected


@pytest.mark.parametrize(
    "tp,fn,expected", [(2, 0, 1.0), (0, 4, 0.0), (3, 1, 0.75), (0, 0, 0.0)]
)
def test_recall_values(tp, fn, expected):
    assert recall(tp, fn) == expected


def test_counts_must_be_nonnegative():
    with pytest.raises(ValueError):
        precision(-1, 0)
    with pytest.raises(ValueError):
        recall(0, -2)


# --- PR curve ----------------------------------------------------------------------

def test_pr_curve_single_true_positive():
    curve = pr_curve([det(B(0, 0, 2, 2), conf=0.8)], [gt(B(0, 0, 2, 2))])
    assert len(curve) == 1
    point = curve[0]
    assert (point.precision, point.recall) == (1.0, 1.0)
    assert (point.cum_tp, point.cum_fp) == (1, 0)


def test_pr_curve_all_false_positives():
    detections = [det(B(10, 10, 11, 11), conf=c) for c in (0.9, 0.5, 0.3)]
    curve = pr_curve(detections, [gt(B(0, 0, 1, 1))])
    assert all(p.precision == 0.0 for p in curve)
    assert all(p.recall == 0.0 for p in curve)


def test_pr_curve_ignores_confidence_threshold():
    detections = [det(B(0, 0, 2, 2), conf=0.05)]
    curve = pr_curve(detections, [gt(B(0, 0, 2, 2))], MatchConfig(0.45, 0.9))
    assert len(curve) == 1 and curve[0].cum_tp == 1


def test_pr_curve_requires_ground_truth_and_one_category():
    with pytest.raises(EvalError):
        pr_curve([det(B(0, 0, 1, 1))], [])
    with pytest.raises(EvalError):
        pr_curve([det(B(0, 0, 1, 1), cat=0)], [gt(B(0, 0, 1, 1), cat=1)])


def test_pr_curve_cumulative_columns_match_running_sums():
    rng = random.Random(7)
    for _ in range(50):
        dets, gts = synthetic_instance(rng, max_categories=1, images=3)
        if not gts:
            continue
        curve = pr_curve(dets, gts, MatchConfig(0.45, 0.25))
        # spreadsheet-style recompute: flags sorted by confidence
        tp = fp = 0
        assert [p.confidence for p in curve] == sorted(
            (p.confidence for p in curve), reverse=True
        )
        for point in curve:
            delta_tp = point.cum_tp - tp
            delta_fp = point.cum_fp - fp
            assert (delta_tp, delta_fp) in ((1, 0), (0, 1))
            tp, fp = point.cum_tp, point.cum_fp
            assert point.precision == pytest.approx(tp / (tp + fp))
            assert point.recall == pytest.approx(tp / len(gts))


def test_recall_non_decreasing_as_confidence_drops():
    rng = random.Random(11)
    for _ in range(30):
        dets, gts = synthetic_instance(rng, max_categories=1, images=2)
        if not gts or not dets:
            continue
        curve = pr_curve(dets, gts)
        recalls = [p.recall for p in curve]
        assert recalls == sorted(recalls)


# --- interpolation and AP -------------------------------------------------------------

def point(recall_value, precision_value):
    return PrPoint(0.5, 0, 0, precision_value, recall_value)


def test_interpolated_precision_example():
    curve = [point(0.2, 1.0), point(0.5, 0.6), point(0.5, 0.8)]
    interp = interpolate_precision(curve)
    assert interp(0.3) == 0.8
    assert interp(0.0) == 1.0
    assert interp(0.51) == 0.0


def test_interpolation_envelope_non_increasing():
    curve = [point(r / 10, p) for r, p in enumerate((1.0, 0.4, 0.9, 0.2, 0.7, 0.1))]
    interp = interpolate_precision(curve)
    samples = [interp(r / 100) for r in range(101)]
    assert samples == sorted(samples, reverse=True)


def test_interpolation_requires_points():
    with pytest.raises(ValueError):
        interpolate_precision([])


def test_average_precision_perfect_and_zero():
    perfect = pr_curve([det(B(0, 0, 2, 2), conf=1.0)], [gt(B(0, 0, 2, 2))])
    assert average_precision(perfect) == 1.0
    assert average_precision(perfect, mode="trapezoid") == 1.0
    missed = pr_curve([det(B(9, 9, 10, 10), conf=0.8)], [gt(B(0, 0, 1, 1))])
    assert average_precision(missed) == 0.0
    assert average_precision([]) == 0.0
    with pytest.raises(ValueError):
        average_precision(perfect, mode="simpson")


def _oracle_ap_from_curve(curve):
    total = 0.0
    for k in range(101):
        r = k / 100.0
        best = 0.0
        for p in curve:
            if p.recall >= r and p.precision > best:
                best = p.precision
        total += best
    return total / 101.0


def test_average_precision_matches_definition_scan():
    rng = random.Random(99)
    checked = 0
    while checked < 100:
        dets, gts = synthetic_instance(rng, max_categories=1, images=2)
        if not gts:
            continue
        curve = pr_curve(dets, gts)
        assert average_precision(curve) == pytest.approx(
            _oracle_ap_from_curve(curve), abs=1e-12
        )
        checked += 1


def test_average_precision_invariant_under_order_preserving_rescale():
    rng = random.Random(13)
    for _ in range(40):
        dets, gts = synthetic_instance(rng, max_categories=1, images=2)
        if not gts or len(dets) < 2:
            continue
        confidences = sorted({d.confidence for d in dets}, reverse=True)
        rank = {c: i for i, c in enumerate(confidences)}
        squeezed = [
            Detection(d.box, d.category_id, 1.0 - rank[d.confidence] * (0.5 / len(dets)), d.image_id)
            for d in dets
        ]
        original = average_precision(pr_curve(dets, gts))
        rescaled = average_precision(pr_curve(squeezed, gts))
        assert rescaled == pytest.approx(original, abs=1e-12)


# --- mAP -------------------------------------------------------------------------------

def test_mean_average_precision_examples():
    assert mean_average_precision({1: 1.0}) == 1.0
    assert mean_average_precision({1: 1.0, 2: 0.0}) == 0.5
    synthetic = {c: (c % 5) / 4 for c in range(16)}
    assert mean_average_precision(synthetic) == pytest.approx(
        sum(synthetic.values()) / 16
    )
    with pytest.raises(EvalError):
        mean_average_precision({})


def test_per_category_ap_excludes_categories_without_ground_truth():
    dets = [det(B(0, 0, 2, 2), cat=1, conf=0.9), det(B(5, 5, 6, 6), cat=2, conf=0.8)]
    gts = [gt(B(0, 0, 2, 2), cat=1)]
    aps = per_category_ap(dets, gts, MatchConfig(0.5, 0.25), categories=[1, 2])
    assert set(aps) == {1}
    assert aps[1] == 1.0


def test_map_over_iou_range_perfect_detector():
    dets = [det(B(0, 0, 2, 2), cat=1, conf=1.0)]
    gts = [gt(B(0, 0, 2, 2), cat=1)]
    assert map_over_iou_range(dets, gts) == 1.0
    assert map_over_iou_range(dets, gts, thresholds=[0.5]) == mean_average_precision(
        per_category_ap(dets, gts, MatchConfig(0.5, 0.25))
    )
    with pytest.raises(ValueError):
        map_over_iou_range(dets, gts, thresholds=[])
    with pytest.raises(ValueError):
        map_over_iou_range(dets, gts, thresholds=[1.5])


def test_map_over_iou_range_steps_with_overlap_quality():
    # detection boxes overlap their targets at IoU exactly 0.6
    gts = [gt(B(0, 0, 10, 10), cat=0, image=f"im{i}") for i in range(3)]
    dets = [det(B(0, 0, 10, 6), cat=0, conf=0.9, image=f"im{i}") for i in range(3)]
    ap50 = mean_average_precision(per_category_ap(dets, gts, MatchConfig(0.5, 0.25)))
    value = map_over_iou_range(dets, gts)
    assert value == pytest.approx(0.3 * ap50, abs=1e-12)


# --- confusion matrix ---------------------------------------------------------------

def test_confusion_matrix_perfect_corpus():
    dets = [det(B(0, 0, 2, 2), cat=1), det(B(4, 4, 6, 6), cat=2, conf=0.8)]
    gts = [gt(B(0, 0, 2, 2), cat=1), gt(B(4, 4, 6, 6), cat=2)]
    outcomes = match_corpus(dets, gts)
    matrix = confusion_matrix(outcomes, [1, 2])
    assert matrix.cell(1, 1) == 1 and matrix.cell(2, 2) == 1
    assert matrix.cell(None, 1) == 0 and matrix.cell(1, None) == 0


def test_confusion_matrix_no_detections():
    gts = [gt(B(0, 0, 2, 2), cat=1), gt(B(4, 4, 6, 6), cat=2)]
    matrix = confusion_matrix(match_corpus([], gts), [1, 2])
    assert matrix.cell(1, None) == 1 and matrix.cell(2, None) == 1
    assert sum(matrix.grid[0][:2] + matrix.grid[1][:2]) == 0


def test_confusion_matrix_hand_tally():
    # image a: cat-1 gt matched by cat-1 det (TP); a cat-2 stray det (FP).
    # image b: cat-2 gt matched by cat-1 det (cross cell).
    # image c: cat-1 gt missed (FN column).
    dets = [
        det(B(0, 0, 2, 2), cat=1, conf=0.9, image="a"),
        det(B(8, 8, 9, 9), cat=2, conf=0.8, image="a"),
        det(B(0, 0, 2, 2), cat=1, conf=0.7, image="b"),
    ]
    gts = [
        gt(B(0, 0, 2, 2), cat=1, image="a"),
        gt(B(0, 0, 2, 2), cat=2, image="b"),
        gt(B(5, 5, 7, 7), cat=1, image="c"),
    ]
    matrix = confusion_matrix(match_corpus(dets, gts), [1, 2])
    assert matrix.cell(1, 1) == 1  # diagonal TP
    assert matrix.cell(2, 1) == 1  # cross cell: true 2 predicted 1
    assert matrix.cell(None, 2) == 1  # background row: unmatched cat-2 det
    assert matrix.cell(1, None) == 1  # background column: missed cat-1 gt
    assert matrix.cell(2, None) == 0
    buffer = io.StringIO()
    matrix.write_csv(buffer)
    lines = buffer.getvalue().splitlines()
    assert lines[0] == "true\\pred,1,2,background"
    assert len(lines) == 4


def test_corpus_count_invariants():
    rng = random.Random(5)
    for _ in range(40):
        dets, gts = synthetic_instance(rng, images=3)
        config = MatchConfig(0.45, 0.25)
        metrics = evaluate_corpus(dets, gts, config)
        total_tp = sum(r.tp for r in metrics.per_category)
        total_fp = sum(r.fp for r in metrics.per_category)
        total_fn = sum(r.fn for r in metrics.per_category)
        retained = sum(1 for d in dets if d.confidence >= config.confidence_threshold)
        assert total_tp + total_fn == len(gts)
        assert total_tp + total_fp == retained
        # confusion row sums equal per-category ground-truth counts
        per_cat_gt = defaultdict(int)
        for g in gts:
            per_cat_gt[g.category_id] += 1
        matrix = metrics.confusion
        for i, cat in enumerate(matrix.categories):
            assert sum(matrix.grid[i]) == per_cat_gt[cat]


def test_confidence_threshold_monotonicity():
    rng = random.Random(17)
    for _ in range(30):
        dets, gts = synthetic_instance(rng, images=2)
        counts = []
        for threshold in (0.0, 0.25, 0.5, 0.75):
            outcomes = match_corpus(dets, gts, MatchConfig(0.45, threshold))
            counts.append(
                (
                    sum(o.tp_count for o in outcomes),
                    sum(o.fp_count for o in outcomes),
                )
            )
        for (tp_low, fp_low), (tp_high, fp_high) in zip(counts, counts[1:]):
            assert tp_high <= tp_low
            assert fp_high <= fp_low


def test_identity_predictor_is_perfect():
    rng = random.Random(21)
    gts = []
    for i in range(12):
        _, instance_gts = synthetic_instance(rng, images=1)
        gts.extend(GroundTruth(g.box, g.category_id, f"im{i}") for g in instance_gts)
    dets = [Detection(g.box, g.category_id, 1.0, g.image_id) for g in gts]
    metrics = evaluate_corpus(dets, gts)
    assert metrics.map50 == 1.0
    assert metrics.map50_95 == 1.0


def test_threads_env_var_does_not_change_results(monkeypatch):
    rng = random.Random(31)
    dets, gts = [], []
    for i in range(8):
        d, g = synthetic_instance(rng, images=1)
        dets.extend(Detection(x.box, x.category_id, x.confidence, f"im{i}") for x in d)
        gts.extend(GroundTruth(x.box, x.category_id, f"im{i}") for x in g)
    serial = evaluate_corpus(dets, gts)
    monkeypatch.setenv("TRAPEVAL_THREADS", "4")
    threaded = evaluate_corpus(dets, gts)
    assert serial == threaded
    monkeypatch.setenv("TRAPEVAL_THREADS", "zebra")
    with pytest.raises(ValueError):
        evaluate_corpus(dets, gts)


# --- CSV interfaces --------------------------------------------------------------------

def test_detections_csv_round_trip():
    dets = [
        Detection(B(0, 0, 2.5, 2.5), 1, 0.875, "im0"),
        Detection(B(1, 1, 3, 4), 2, 0.25, "im1"),
    ]
    buffer = io.StringIO()
    write_detections_csv(dets, buffer)
    parsed = read_detections_csv(io.StringIO(buffer.getvalue()))
    assert parsed == dets


def test_detections_csv_rejects_bad_input():
    with pytest.raises(FormatError):
        read_detections_csv(io.StringIO(""))
    with pytest.raises(FormatError):
        read_detections_csv(io.StringIO("image,who,knows\n"))
    header = "image_id,category_id,confidence,x1,y1,x2,y2\n"
    with pytest.raises(FormatError):
        read_detections_csv(io.StringIO(header + "im0,1,nope,0,0,1,1\n"))
    with pytest.raises(FormatError):
        read_detections_csv(io.StringIO(header + "im0,1,1.5,0,0,1,1\n"))
    with pytest.raises(FormatError):
        read_detections_csv(io.StringIO(header + "im0,1,0.5,0,0,1\n"))


def test_metrics_csv_contains_summary_lines():
    dets = [det(B(0, 0, 2, 2), cat=1, conf=1.0)]
    gts = [gt(B(0, 0, 2, 2), cat=1)]
    metrics = evaluate_corpus(dets, gts)
    buffer = io.StringIO()
    write_metrics_csv(metrics, buffer)
    rows = list(csv.reader(io.StringIO(buffer.getvalue())))
    assert rows[0] == ["category_id", "ap", "precision", "recall", "tp", "fp", "fn"]
    assert ["mAP50", "1"] in rows
    assert ["mAP50-95", "1"] in rows
