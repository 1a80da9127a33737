"""Command-line surface: evaluation runs, loss-descent studies, heatmap
emission, dataset splitting and architecture shape checks.

Data goes to files under --out-dir (and a few summary lines to stdout);
diagnostics go to stderr. Exit code 0 means no defined error occurred.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from . import dataset as ds
from . import evaluation as ev
from . import gradcam as gc
from .boxes import BoundingBox
from .errors import DivergedError, TrapevalError
from .graph import Graph, ScoreSelector, build_graph, check_reference_shapes, parse_graph_text, write_graph_text
from .losses import (
    LossKind,
    LossParams,
    WiouState,
    focusing_coefficient,
    simulate_regression,
    write_trajectory_csv,
)
from .ppm import read_ppm, write_pgm, write_ppm
from .svg import LineChart

import numpy as np


def _parse_box(text: str) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"box must be x1,y1,x2,y2 (got {text!r})")
    try:
        return BoundingBox(*(float(p) for p in parts)).normalized()
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _parse_kinds(text: str) -> list[LossKind]:
    if text == "all":
        return list(LossKind)
    kinds = []
    for token in text.split(","):
        token = token.strip()
        try:
            kinds.append(LossKind(token))
        except ValueError:
            valid = ",".join(k.value for k in LossKind)
            raise argparse.ArgumentTypeError(f"unknown loss kind {token!r} (valid: {valid},all)")
    return kinds


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_shapes(args) -> int:
    spec = build_graph(args.variant, args.size, num_categories=args.categories, seed=args.seed)
    _, rows = spec.propagate_shapes()
    for row in rows:
        note = f"  # {row.note}" if row.note else ""
        print(f"{row.name:8s} {row.kind:12s} {row.dims_text()}{note}")
    if args.emit:
        with open(args.emit, "w", encoding="utf-8") as stream:
            write_graph_text(spec, stream)
        print(f"wrote graph description to {args.emit}", file=sys.stderr)
    if args.check:
        if args.size != 640:
            print("error: --check applies to the reference 640 input", file=sys.stderr)
            return 1
        problems = check_reference_shapes(spec, args.variant)
        for problem in problems:
            print(f"shape mismatch: {problem}", file=sys.stderr)
        if problems:
            return 1
        print("shape check passed", file=sys.stderr)
    return 0


def cmd_losslab(args) -> int:
    out = _out_dir(args)
    params = LossParams(gamma=args.gamma, alpha=args.alpha, delta=args.delta)
    kinds = args.kinds
    chart = LineChart("loss vs iteration", "iteration", "loss")
    failures = 0
    for kind in kinds:
        try:
            trajectory = simulate_regression(
                kind,
                args.start,
                args.gt,
                step=args.step,
                iters=args.iters,
                params=params,
                state=WiouState() if kind is LossKind.WIOU_V3 else None,
            )
        except DivergedError as exc:
            print(f"{kind.value}: diverged at iteration {exc.iteration}", file=sys.stderr)
            failures += 1
            continue
        path = out / f"trajectory_{kind.value}.csv"
        with open(path, "w", encoding="utf-8", newline="") as stream:
            write_trajectory_csv(trajectory, stream)
        chart.add_series(
            kind.value,
            [float(r.iteration) for r in trajectory.rows],
            [r.loss for r in trajectory.rows],
        )
        final = trajectory.rows[-1]
        print(
            f"{kind.value},{final.loss:.12g},{final.iou:.12g},{final.center_dist:.12g}"
        )
    chart.write(out / "loss_curves.svg")

    focus = LineChart("focusing coefficient r(beta)", "beta", "r")
    betas = [i / 100.0 for i in range(0, 1001)]
    values = [focusing_coefficient(b, params) for b in betas]
    focus.add_series("r", betas, values)
    peak = 1.0 / math.log(args.alpha)
    focus.add_vline(peak, f"beta*={peak:.4g}")
    focus.write(out / "focusing_curve.svg")
    with open(out / "focusing_curve.csv", "w", encoding="utf-8") as stream:
        stream.write(f"# gain peaks at beta = 1/ln(alpha) = {peak:.12g}\n")
        stream.write("beta,r\n")
        for b, r in zip(betas, values):
            stream.write(f"{b:.12g},{r:.12g}\n")
    return 1 if failures else 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    with open(args.detections, "r", encoding="utf-8", newline="") as stream:
        detections = ev.read_detections_csv(stream)
    data = ds.parse_annotations(args.annotations)
    ground_truths = [gt for record in data.records for gt in record.annotations]
    categories = data.category_ids() if data.categories else None
    config = ev.MatchConfig(args.iou_thresh, args.conf_thresh)
    metrics = ev.evaluate_corpus(detections, ground_truths, config, categories)

    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as stream:
        ev.write_metrics_csv(metrics, stream)
    with open(out / "ap_modes.csv", "w", encoding="utf-8", newline="") as stream:
        ev.write_ap_modes_csv(metrics, stream)
    with open(out / "confusion_matrix.csv", "w", encoding="utf-8", newline="") as stream:
        metrics.confusion.write_csv(stream)

    config50 = ev.MatchConfig(0.5, config.confidence_threshold)
    overlay_chart = LineChart("PR curves (IoU 0.5)", "recall", "precision")
    for row in metrics.per_category:
        cat = row.category_id
        cat_dets = [d for d in detections if d.category_id == cat]
        cat_gts = [g for g in ground_truths if g.category_id == cat]
        if not cat_gts:
            continue
        curve = ev.pr_curve(cat_dets, cat_gts, config50)
        xs = [0.0] + [p.recall for p in curve]
        ys = [1.0] + [p.precision for p in curve]
        chart = LineChart(f"PR curve category {cat} (IoU 0.5)", "recall", "precision")
        chart.add_series(f"cat {cat}", xs, ys)
        chart.write(out / f"pr_curve_cat{cat}.svg")
        overlay_chart.add_series(f"cat {cat}", xs, ys)
    overlay_chart.write(out / "pr_curves_all.svg")

    print(f"mAP50,{metrics.map50:.12g}")
    print(f"mAP50-95,{metrics.map50_95:.12g}")
    return 0


def cmd_gradcam(args) -> int:
    out = _out_dir(args)
    with open(args.graph, "r", encoding="utf-8") as stream:
        spec = parse_graph_text(stream)
    image = read_ppm(args.image)
    graph = Graph(spec)
    run = graph.forward(image)
    selector = ScoreSelector(category=args.category, scale=args.scale)
    pinned, score = gc.pin_selector(run, args.layer, selector)
    heat = gc.gradcam_heatmap(run, args.layer, pinned)
    write_ppm(gc.colorize(heat), out / "heatmap.ppm")
    write_ppm(gc.overlay(image, heat, args.alpha_overlay), out / "overlay.ppm")
    if args.pgm:
        write_pgm(np.rint(heat.data * 255.0), out / "heatmap.pgm")
    print(f"score,{score:.12g}")
    return 0


def cmd_split(args) -> int:
    out = _out_dir(args)
    data = ds.filter_empty(ds.parse_annotations(args.annotations))
    locations = sorted({r.location_id for r in data.records})
    if args.trans_test:
        trans_test = tuple(int(t) for t in args.trans_test.split(","))
        if args.trans_val is None:
            print("error: --trans-val is required with --trans-test", file=sys.stderr)
            return 1
        trans_val = args.trans_val
    else:
        import random

        if len(locations) < 10:
            print(f"error: need >= 10 locations, have {len(locations)}", file=sys.stderr)
            return 1
        picked = random.Random(args.seed).sample(locations, 10)
        trans_test, trans_val = tuple(picked[:9]), picked[9]
        print(
            f"picked trans test locations {sorted(trans_test)} and validation "
            f"location {trans_val}",
            file=sys.stderr,
        )
    config = ds.SplitConfig(
        trans_test_locations=trans_test,
        trans_val_location=trans_val,
        cis_val_fraction=args.val_fraction,
        seed=args.seed,
        day_basis=args.day_basis,
    )
    result = ds.split_cis_trans(list(data.records), config)
    problems = ds.verify_split(result)
    if problems:
        for problem in problems:
            print(f"invariant violation: {problem}", file=sys.stderr)
        return 1
    for name, part in result.all_parts().items():
        ds.write_annotations(ds.Dataset(tuple(part), data.categories), out / f"{name}.json")
    expected = ds.REFERENCE_SPLIT_COUNTS if args.check_reference_counts else None
    report = ds.split_report(result, expected)
    (out / "report.csv").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trapeval",
        description="box-loss studies, detection metrics, heatmaps and dataset splits",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="evaluate detections against annotations")
    p_eval.add_argument("detections", help="detections CSV")
    p_eval.add_argument("annotations", help="annotations JSON")
    p_eval.add_argument("--iou-thresh", type=float, default=ev.DEFAULT_IOU_THRESHOLD)
    p_eval.add_argument("--conf-thresh", type=float, default=ev.DEFAULT_CONFIDENCE_THRESHOLD)
    p_eval.add_argument("--out-dir", default="out")
    p_eval.set_defaults(func=cmd_eval)

    p_loss = sub.add_parser("losslab", help="gradient-descent trajectories per loss kind")
    p_loss.add_argument("--kinds", type=_parse_kinds, default=list(LossKind))
    p_loss.add_argument("--start", type=_parse_box, default=BoundingBox(0, 0, 1, 1))
    p_loss.add_argument("--gt", type=_parse_box, default=BoundingBox(2, 2, 3, 3))
    p_loss.add_argument("--step", type=float, default=0.01)
    p_loss.add_argument("--iters", type=int, default=500)
    p_loss.add_argument("--gamma", type=float, default=0.5)
    p_loss.add_argument("--alpha", type=float, default=1.9)
    p_loss.add_argument("--delta", type=float, default=3.0)
    p_loss.add_argument("--out-dir", default="out")
    p_loss.set_defaults(func=cmd_losslab)

    p_cam = sub.add_parser("gradcam", help="emit a score heatmap and overlay")
    p_cam.add_argument("graph", help="graph description file")
    p_cam.add_argument("image", help="input image (binary PPM)")
    p_cam.add_argument("--layer", required=True)
    p_cam.add_argument("--category", type=int, required=True)
    p_cam.add_argument("--scale", type=int, default=None)
    p_cam.add_argument("--alpha-overlay", type=float, default=0.5)
    p_cam.add_argument("--pgm", action="store_true", help="also write the raw heatmap as PGM")
    p_cam.add_argument("--out-dir", default="out")
    p_cam.set_defaults(func=cmd_gradcam)

    p_split = sub.add_parser("split", help="location/day split of an annotation file")
    p_split.add_argument("annotations")
    p_split.add_argument("--trans-test", default="", help="comma list of trans test locations")
    p_split.add_argument("--trans-val", type=int, default=None)
    p_split.add_argument("--val-fraction", type=float, default=0.05)
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--day-basis", choices=("day_of_month", "day_of_year"), default="day_of_month")
    p_split.add_argument("--check-reference-counts", action="store_true")
    p_split.add_argument("--out-dir", default="out")
    p_split.set_defaults(func=cmd_split)

    p_shapes = sub.add_parser("shapes", help="print per-layer output dimensions")
    p_shapes.add_argument("variant", choices=("baseline", "improved"))
    p_shapes.add_argument("--size", type=int, default=640)
    p_shapes.add_argument("--categories", type=int, default=16)
    p_shapes.add_argument("--seed", type=int, default=0)
    p_shapes.add_argument("--check", action="store_true")
    p_shapes.add_argument("--emit", default="", help="write the graph description file")
    p_shapes.set_defaults(func=cmd_shapes)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrapevalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
