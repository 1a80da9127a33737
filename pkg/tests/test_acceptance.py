"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line
(run with ``pytest tests/test_acceptance.py -s`` to see them). Tolerances are
pinned here and nowhere else."""

import datetime as dt
import math
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

from trapeval.boxes import BoundingBox, Detection, GroundTruth, iou
from trapeval.cli import main
from trapeval.dataset import (
    SplitConfig,
    REFERENCE_SPLIT_COUNTS,
    split_cis_trans,
    split_report,
    verify_split,
)
from trapeval.evaluation import MatchConfig, average_precision, evaluate_corpus, pr_curve
from trapeval.gradcam import gradcam_heatmap
from trapeval.graph import Graph, ScoreSelector, build_graph, check_reference_shapes
from trapeval.losses import (
    LossKind,
    LossParams,
    WiouState,
    evaluate_loss,
    finite_diff_grad,
    focusing_coefficient,
    loss_giou,
    loss_iou,
    simulate_regression,
)
from trapeval.nn import GamChannelAttention
from trapeval.ppm import write_ppm
from trapeval.gradcam import colorize
from trapeval.tensor import upsample_forward

from conftest import gradient_pairs, random_box, synthetic_instance
from test_graph import tiny_image, tiny_spec


@contextmanager
def criterion(number: int, label: str):
    try:
        yield
    except BaseException:
        print(f"criterion {number:02d} FAIL {label}")
        raise
    print(f"criterion {number:02d} PASS {label}")


STATE = WiouState(mean_iou_loss=0.35, sample_count=9)


def test_criterion_1_gradient_suite():
    with criterion(1, "analytic vs central-difference gradients, 8 kinds x 1000 pairs, <10s"):
        pairs = gradient_pairs(seed=20240501, count=1000)
        start = time.perf_counter()
        for kind in LossKind:
            for pred, gt in pairs:
                ev, _ = evaluate_loss(kind, pred, gt, None, STATE)
                numeric = finite_diff_grad(kind, pred, gt, 1e-6, None, STATE)
                for analytic, fd in zip(ev.grad, numeric):
                    if abs(analytic) > 1e-8:
                        assert abs(analytic - fd) / abs(analytic) < 1e-4, (kind, pred, gt)
                    else:
                        assert abs(analytic - fd) < 1e-7, (kind, pred, gt)
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0, f"gradient suite took {elapsed:.1f}s"


def test_criterion_2_disjoint_gradient_dichotomy():
    with criterion(2, "disjoint pairs: IoU gradient exactly zero, GIoU gradient alive"):
        rng = random.Random(20240502)
        checked = 0
        while checked < 100:
            gt = random_box(rng)
            shift = gt.width + gt.height + rng.uniform(1.0, 5.0)
            pred = random_box(rng).translated(shift + 9.0, -(shift + 9.0))
            if iou(pred, gt) > 0.0:
                continue
            iou_grad = loss_iou(pred, gt).grad
            assert math.sqrt(sum(g * g for g in iou_grad)) == 0.0
            giou_grad = loss_giou(pred, gt).grad
            assert math.sqrt(sum(g * g for g in giou_grad)) > 1e-6
            checked += 1


def test_criterion_3_focusing_curve():
    with criterion(3, "r(delta) = 1 exactly; grid argmax at 1/ln(alpha) within 0.002"):
        params = LossParams()
        assert focusing_coefficient(params.delta, params) == 1.0
        grid = [i * 0.001 for i in range(10_001)]
        values = [focusing_coefficient(b, params) for b in grid]
        argmax = grid[values.index(max(values))]
        expected = 1.0 / math.log(1.9)
        assert expected == pytest.approx(1.558, abs=1e-3)
        assert abs(argmax - expected) < 0.002


def test_criterion_4_loss_spot_values():
    with criterion(4, "six derived scalar loss values within 1e-5 of hand arithmetic"):
        overlap = (BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 3, 3))
        disjoint = (BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3))
        # hand arithmetic: inter 1, union 7; hull 3x3; dist^2 8 resp. 2
        cases = [
            (LossKind.IOU, overlap, 1.0 - 1.0 / 7.0),
            (LossKind.GIOU, disjoint, 1.0 + (9.0 - 2.0) / 9.0),
            (LossKind.DIOU, disjoint, 1.0 + 8.0 / 18.0),
            (LossKind.EIOU, overlap, 6.0 / 7.0 + 2.0 / 18.0),
            (LossKind.FOCAL_EIOU, overlap, (1.0 / 7.0) ** 0.5 * (6.0 / 7.0 + 2.0 / 18.0)),
            (LossKind.WIOU_V1, overlap, math.exp(2.0 / 18.0) * (6.0 / 7.0)),
        ]
        for kind, (pred, gt), expected in cases:
            ev, _ = evaluate_loss(kind, pred, gt, None, WiouState())
            assert abs(ev.value - expected) < 1e-5, (kind, ev.value, expected)


def _oracle_ap(detections, ground_truths, iou_threshold):
    """Definition-scan AP for one category, written with plain loops."""

    def overlap(a, b):
        iw = min(a.x2, b.x2) - max(a.x1, b.x1)
        ih = min(a.y2, b.y2) - max(a.y1, b.y1)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
        return inter / union if union > 0 else 0.0

    image_ids = sorted({d.image_id for d in detections} | {g.image_id for g in ground_truths})
    flagged = []
    for image_id in image_ids:
        dets = [d for d in detections if d.image_id == image_id]
        gts = [g for g in ground_truths if g.image_id == image_id]
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
        used = [False] * len(gts)
        for i in order:
            best, best_value = None, 0.0
            for j in range(len(gts)):
                if used[j]:
                    continue
                value = overlap(dets[i].box, gts[j].box)
                if value >= iou_threshold and value > best_value:
                    best, best_value = j, value
            if best is not None:
                used[best] = True
                flagged.append((dets[i].confidence, True))
            else:
                flagged.append((dets[i].confidence, False))
    flagged.sort(key=lambda pair: -pair[0])

    n_gt = len(ground_truths)
    points = []
    tp = fp = 0
    for confidence, is_tp in flagged:
        tp += 1 if is_tp else 0
        fp += 0 if is_tp else 1
        points.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100.0
        best = 0.0
        for recall_value, precision_value in points:
            if recall_value >= r and precision_value > best:
                best = precision_value
        total += best
    return total / 101


def test_criterion_5_eval_oracle_equivalence():
    with criterion(5, "engine AP equals definition-scan oracle on 500 instances; identity mAP50 = 1"):
        rng = random.Random(20240505)
        config = MatchConfig(0.5, 0.25)
        checked = 0
        while checked < 500:
            dets, gts = synthetic_instance(rng, images=2)
            categories = sorted({g.category_id for g in gts})
            for cat in categories:
                cat_gts = [g for g in gts if g.category_id == cat]
                cat_dets = [d for d in dets if d.category_id == cat]
                engine = average_precision(pr_curve(cat_dets, cat_gts, config))
                oracle = _oracle_ap(cat_dets, cat_gts, config.iou_threshold)
                assert abs(engine - oracle) < 1e-9, (cat_dets, cat_gts)
            checked += 1
        gts = [
            GroundTruth(random_box(random.Random(s)), s % 3, f"im{s % 5}")
            for s in range(40)
        ]
        dets = [Detection(g.box, g.category_id, 1.0, g.image_id) for g in gts]
        assert evaluate_corpus(dets, gts).map50 == 1.0


def test_criterion_6_shape_tables(capsys):
    with criterion(6, "640 shape check passes for both variants in under a second"):
        start = time.perf_counter()
        assert check_reference_shapes(build_graph("baseline", 640), "baseline") == []
        assert check_reference_shapes(build_graph("improved", 640), "improved") == []
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0, f"shape propagation took {elapsed:.2f}s"
        assert main(["shapes", "baseline", "--size", "640", "--check"]) == 0
        assert main(["shapes", "improved", "--size", "640", "--check"]) == 0
        capsys.readouterr()


def test_criterion_7_upsample_fixture():
    with criterion(7, "nearest-neighbour upsample reproduces the worked 2x2 -> 4x4 matrix"):
        out = upsample_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2)
        expected = np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float
        )
        assert np.array_equal(out[0], expected)


def test_criterion_8_channel_attention_fixture():
    with criterion(8, "channel-attention MLP stages for C=16, H=W=2 are 4x16 -> 4x4 -> 4x16"):
        block = GamChannelAttention(16, seed=8)
        x = np.random.default_rng(8).normal(size=(16, 2, 2))
        out, cache = block.forward(x)
        assert cache["permuted"].shape == (4, 16)
        assert cache["hidden"].shape == (4, 4)
        assert cache["l2"].shape == (4, 16)
        assert out.shape == (16, 2, 2)


def test_criterion_9_gradcam_correctness(tmp_path):
    with criterion(9, "tiny-graph gradients match finite differences; heatmaps bounded and reproducible"):
        graph = Graph(tiny_spec(seed_base=90))
        image = tiny_image(90)
        run = graph.forward(image)
        selector = ScoreSelector(category=1, scale=0, cell=(2, 2))
        rng = np.random.default_rng(91)
        h = 1e-5
        for layer in ("c0", "c1", "g1", "s1"):
            grad = graph.backward_to_layer(run, selector, layer).data
            activation = run.activations[layer]
            for flat in rng.choice(activation.size, size=20, replace=False):
                ix = np.unravel_index(flat, activation.shape)
                hi, lo = activation.copy(), activation.copy()
                hi[ix] += h
                lo[ix] -= h
                v_hi = selector.resolve(graph.forward(image, overrides={layer: hi}))[3]
                v_lo = selector.resolve(graph.forward(image, overrides={layer: lo}))[3]
                fd = (v_hi - v_lo) / (2 * h)
                if abs(grad[ix]) > 1e-8:
                    assert abs(grad[ix] - fd) / abs(grad[ix]) < 1e-3, layer
                else:
                    assert abs(grad[ix] - fd) < 1e-6, layer

        heat = gradcam_heatmap(run, "g1", ScoreSelector(category=1))
        assert heat.data.min() >= 0.0 and heat.data.max() <= 1.0

        def render(tag: str) -> bytes:
            fresh = Graph(tiny_spec(seed_base=90)).forward(tiny_image(90))
            hm = gradcam_heatmap(fresh, "g1", ScoreSelector(category=1))
            path = tmp_path / f"heatmap_{tag}.ppm"
            write_ppm(colorize(hm), path)
            return path.read_bytes()

        assert render("a") == render("b")


def test_criterion_10_split_invariants():
    with criterion(10, "split invariants over 100 seeded corpora; count-diff report emitted"):
        for seed in range(100):
            rng = random.Random(seed)
            records = []
            from test_dataset import record

            for i in range(rng.randint(150, 260)):
                records.append(
                    record(
                        image_id=f"s{seed}_{i}",
                        location=i % 20,
                        date=dt.date(2023, rng.randint(1, 12), rng.randint(1, 28)),
                        boxes=([(0, 0, 10, 10), 1],),
                    )
                )
            locations = sorted({r.location_id for r in records})
            picked = random.Random(seed).sample(locations, 10)
            config = SplitConfig(
                trans_test_locations=tuple(picked[:9]),
                trans_val_location=picked[9],
                seed=seed,
            )
            result = split_cis_trans(records, config)
            assert verify_split(result) == [], f"seed {seed}"
        report = split_report(result, REFERENCE_SPLIT_COUNTS)
        assert "split,expected,actual,delta" in report
        assert "location,split,images" in report


def test_criterion_11_trajectory_behaviour():
    with criterion(11, "DIoU descent closes center distance; IoU descent is stationary"):
        start = BoundingBox(0, 0, 1, 1)
        gt = BoundingBox(2, 2, 3, 3)
        diou = simulate_regression(LossKind.DIOU, start, gt, step=0.01, iters=500)
        assert diou.rows[-1].center_dist < diou.rows[0].center_dist
        iou_run = simulate_regression(LossKind.IOU, start, gt, step=0.01, iters=500)
        assert len({row.box.corners() for row in iou_run.rows}) == 1
        assert iou_run.rows[-1].loss == iou_run.rows[0].loss == 1.0
