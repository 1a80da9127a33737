"""Bounding-box regression losses with analytic gradients.

Implements the IoU-loss family: plain IoU, GIoU (hull-gap penalty), DIoU
(normalized center distance), CIoU (aspect-ratio consistency), EIoU
(separate width/height penalties), Focal-EIoU (IoU^gamma scaling), WIoUv1
(exponential center-distance factor) and WIoUv3 (WIoUv1 scaled by the
non-monotonic focusing coefficient r(beta)).

Gradients are taken with respect to the predicted box corners
(x1, y1, x2, y2). Conventions, chosen so the central-difference oracle and
the analytic path agree on one contract:

- min/max kinks use sub-gradient 0 (strict comparisons select the active
  branch, ties contribute nothing);
- at pred == gt (a kink at the loss minimum) the gradient is defined as 0,
  so descent started at the target stays put;
- WIoUv1 treats the hull diagonal in its exponent as a constant during
  differentiation, and WIoUv3 additionally freezes beta and r;
- Focal-EIoU is 0 with zero gradient wherever IoU = 0 (the formula's own
  vanishing-gradient behaviour, kept as written).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import IO, Callable

from .boxes import BoundingBox, center_distance_sq, iou
from .errors import DegenerateBoxError, DegenerateHullError, DivergedError

Vec4 = tuple[float, float, float, float]

_ZERO4: Vec4 = (0.0, 0.0, 0.0, 0.0)


class LossKind(Enum):
    IOU = "iou"
    GIOU = "giou"
    DIOU = "diou"
    CIOU = "ciou"
    EIOU = "eiou"
    FOCAL_EIOU = "focal_eiou"
    WIOU_V1 = "wiou_v1"
    WIOU_V3 = "wiou_v3"


@dataclass(frozen=True)
class LossParams:
    gamma: float = 0.5
    alpha: float = 1.9
    delta: float = 3.0
    running_mean_momentum: float = 0.99

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha <= 1:
            raise ValueError("alpha must be > 1")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if not 0.0 < self.running_mean_momentum <= 1.0:
            raise ValueError("running_mean_momentum must be in (0, 1]")


@dataclass(frozen=True)
class WiouState:
    """Running mean of the plain IoU loss, seeded by the first observation."""

    mean_iou_loss: float = 0.0
    sample_count: int = 0

    def observe(self, iou_loss: float, momentum: float) -> "WiouState":
        if self.sample_count == 0:
            return WiouState(iou_loss, 1)
        mean = momentum * self.mean_iou_loss + (1.0 - momentum) * iou_loss
        return WiouState(mean, self.sample_count + 1)


@dataclass(frozen=True)
class LossEval:
    value: float
    grad: Vec4


def _vadd(a: Vec4, b: Vec4) -> Vec4:
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3])


def _vscale(a: Vec4, s: float) -> Vec4:
    return (a[0] * s, a[1] * s, a[2] * s, a[3] * s)


class _Geom:
    """Shared geometry of a (pred, gt) pair and its pred-corner derivatives."""

    def __init__(self, pred: BoundingBox, gt: BoundingBox):
        x1, y1, x2, y2 = pred.corners()
        a1, b1, a2, b2 = gt.corners()
        self.w = x2 - x1
        self.h = y2 - y1
        self.wg = a2 - a1
        self.hg = b2 - b1
        self.area_p = self.w * self.h
        self.area_g = self.wg * self.hg
        self.d_area: Vec4 = (-self.h, -self.w, self.h, self.w)

        iw = min(x2, a2) - max(x1, a1)
        ih = min(y2, b2) - max(y1, b1)
        if iw > 0.0 and ih > 0.0:
            self.inter = iw * ih
            # Active-branch indicators; ties contribute sub-gradient 0.
            self.d_inter: Vec4 = (
                -ih if x1 > a1 else 0.0,
                -iw if y1 > b1 else 0.0,
                ih if x2 < a2 else 0.0,
                iw if y2 < b2 else 0.0,
            )
        else:
            self.inter = 0.0
            self.d_inter = _ZERO4
        self.union = self.area_p + self.area_g - self.inter
        self.d_union: Vec4 = (
            self.d_area[0] - self.d_inter[0],
            self.d_area[1] - self.d_inter[1],
            self.d_area[2] - self.d_inter[2],
            self.d_area[3] - self.d_inter[3],
        )

        if self.union > 0.0:
            u2 = self.union * self.union
            self.iou = self.inter / self.union
            self.d_iou: Vec4 = tuple(
                (self.d_inter[i] * self.union - self.inter * self.d_union[i]) / u2
                for i in range(4)
            )  # type: ignore[assignment]
        else:
            self.iou = 0.0
            self.d_iou = _ZERO4

        # Enclosing hull.
        self.hull_w = max(x2, a2) - min(x1, a1)
        self.hull_h = max(y2, b2) - min(y1, b1)
        self.hull_area = self.hull_w * self.hull_h
        self.d_hull_w: Vec4 = (
            -1.0 if x1 < a1 else 0.0,
            0.0,
            1.0 if x2 > a2 else 0.0,
            0.0,
        )
        self.d_hull_h: Vec4 = (
            0.0,
            -1.0 if y1 < b1 else 0.0,
            0.0,
            1.0 if y2 > b2 else 0.0,
        )
        self.d_hull_area: Vec4 = tuple(
            self.d_hull_w[i] * self.hull_h + self.hull_w * self.d_hull_h[i]
            for i in range(4)
        )  # type: ignore[assignment]

        # Squared hull diagonal and squared center distance.
        self.diag_sq = self.hull_w**2 + self.hull_h**2
        self.d_diag_sq: Vec4 = tuple(
            2.0 * self.hull_w * self.d_hull_w[i] + 2.0 * self.hull_h * self.d_hull_h[i]
            for i in range(4)
        )  # type: ignore[assignment]
        dx = (x1 + x2) / 2.0 - (a1 + a2) / 2.0
        dy = (y1 + y2) / 2.0 - (b1 + b2) / 2.0
        self.dist_sq = dx * dx + dy * dy
        self.d_dist_sq: Vec4 = (dx, dy, dx, dy)


def _is_identical(pred: BoundingBox, gt: BoundingBox) -> bool:
    return pred.corners() == gt.corners() and pred.area > 0.0


def _iou_core(g: _Geom) -> tuple[float, Vec4]:
    return 1.0 - g.iou, _vscale(g.d_iou, -1.0)


def loss_iou(pred: BoundingBox, gt: BoundingBox) -> LossEval:
    """1 - IoU. Zero gradient on disjoint pairs (IoU is locally constant)."""
    if _is_identical(pred, gt):
        return LossEval(0.0, _ZERO4)
    value, grad = _iou_core(_Geom(pred, gt))
    return LossEval(value, grad)


def loss_giou(pred: BoundingBox, gt: BoundingBox) -> LossEval:
    """IoU loss plus the hull-gap penalty (hull - union) / hull."""
    if _is_identical(pred, gt):
        return LossEval(0.0, _ZERO4)
    g = _Geom(pred, gt)
    value, grad = _iou_core(g)
    if g.hull_area > 0.0:
        c2 = g.hull_area * g.hull_area
        value += (g.hull_area - g.union) / g.hull_area
        d_pen = tuple(
            -(g.d_union[i] * g.hull_area - g.union * g.d_hull_area[i]) / c2
            for i in range(4)
        )
        grad = _vadd(grad, d_pen)  # type: ignore[arg-type]
    return LossEval(value, grad)


def _diou_core(g: _Geom) -> tuple[float, Vec4]:
    if g.diag_sq <= 0.0:
        raise DegenerateHullError("enclosing hull has zero diagonal")
    value, grad = _iou_core(g)
    q = g.diag_sq * g.diag_sq
    value += g.dist_sq / g.diag_sq
    d_pen = tuple(
        (g.d_dist_sq[i] * g.diag_sq - g.dist_sq * g.d_diag_sq[i]) / q for i in range(4)
    )
    return value, _vadd(grad, d_pen)  # type: ignore[arg-type]


def loss_diou(pred: BoundingBox, gt: BoundingBox) -> LossEval:
    """IoU loss plus center distance normalized by the squared hull diagonal."""
    if _is_identical(pred, gt):
        return LossEval(0.0, _ZERO4)
    value, grad = _diou_core(_Geom(pred, gt))
    return LossEval(value, grad)


def loss_ciou(pred: BoundingBox, gt: BoundingBox) -> LossEval:
    """DIoU plus the aspect-ratio consistency term alpha * v."""
    if _is_identical(pred, gt):
        return LossEval(0.0, _ZERO4)
    g = _Geom(pred, gt)
    if g.h <= 0.0 or g.hg <= 0.0:
        raise DegenerateBoxError("aspect ratio undefined for zero-height box")
    value, grad = _diou_core(g)

    k = 4.0 / math.pi**2
    t = math.atan(g.w / g.h)
    tg = math.atan(g.wg / g.hg)
    v = k * (t - tg) ** 2
    if v > 0.0:
        # d atan(w/h) over corners; dw = (-1,0,1,0), dh = (0,-1,0,1).
        denom = g.w * g.w + g.h * g.h
        dt: Vec4 = (
            -g.h / denom,
            g.w / denom,
            g.h / denom,
            -g.w / denom,
        )
        dv = _vscale(dt, 2.0 * k * (t - tg))
        liou = 1.0 - g.iou
        d_liou = _vscale(g.d_iou, -1.0)
        # alpha * v = v^2 / (liou + v), differentiated through alpha as well.
        s = liou + v
        value += v * v / s
        d_term = tuple(
            (2.0 * v * dv[i] * s - v * v * (d_liou[i] + dv[i])) / (s * s)
            for i in range(4)
        )
        grad = _vadd(grad, d_term)  # type: ignore[arg-type]
    return LossEval(value, grad)


def _eiou_core(g: _Geom) -> tuple[float, Vec4]:
    if g.hull_w <= 0.0 or g.hull_h <= 0.0:
        raise DegenerateHullError("enclosing hull has a zero side")
    value, grad = _diou_core(g)
    dw_diff = g.w - g.wg
    dh_diff = g.h - g.hg
    w2 = g.hull_w * g.hull_w
    h2 = g.hull_h * g.hull_h
    value += dw_diff * dw_diff / w2 + dh_diff * dh_diff / h2
    d_w_term: Vec4 = tuple(
        (2.0 * dw_diff * (-1.0 if i == 0 else 1.0 if i == 2 else 0.0)) / w2
        - 2.0 * dw_diff * dw_diff * g.d_hull_w[i] / (w2 * g.hull_w)
        for i in range(4)
    )  # type: ignore[assignment]
    d_h_term: Vec4 = tuple(
        (2.0 * dh_diff * (-1.0 if i == 1 else 1.0 if i == 3 else 0.0)) / h2
        - 2.0 * dh_diff * dh_diff * g.d_hull_h[i] / (h2 * g.hull_h)
        for i in range(4)
    )  # type: ignore[assignment]
    return value, _vadd(_vadd(grad, d_w_term), d_h_term)


def loss_eiou(pred: BoundingBox, gt: BoundingBox) -> LossEval:
    """DIoU plus width and height differences normalized by the hull sides."""
    if _is_identical(pred, gt):
        return LossEval(0.0, _ZERO4)
    value, grad = _eiou_core(_Geom(pred, gt))
    return LossEval(value, grad)


def loss_focal_eiou(
    pred: BoundingBox, gt: BoundingBox, params: LossParams | None = None
) -> LossEval:
    """EIoU scaled by IoU^gamma; identically zero wherever IoU is zero."""
    params = params or LossParams()
    if params.gamma == 0.0:
        return loss_eiou(pred, gt)
    if _is_identical(pred, gt):
        return LossEval(0.0, _ZERO4)
    g = _Geom(pred, gt)
    if g.iou == 0.0:
        # IoU^gamma annihilates both value and gradient; kept as the formula
        # states even though it reinstates the vanishing-gradient regime.
        return LossEval(0.0, _ZERO4)
    e_value, e_grad = _eiou_core(g)
    scale = g.iou**params.gamma
    d_scale = _vscale(g.d_iou, params.gamma * g.iou ** (params.gamma - 1.0))
    grad = _vadd(_vscale(e_grad, scale), _vscale(d_scale, e_value))
    return LossEval(scale * e_value, grad)


def _wiou_v1_core(g: _Geom) -> tuple[float, Vec4]:
    if g.diag_sq <= 0.0:
        raise DegenerateHullError("enclosing hull has zero diagonal")
    # The squared diagonal is a frozen constant here: only dist_sq carries
    # gradient through the exponential factor.
    factor = math.exp(g.dist_sq / g.diag_sq)
    liou = 1.0 - g.iou
    d_liou = _vscale(g.d_iou, -1.0)
    value = factor * liou
    grad = tuple(
        factor * (g.d_dist_sq[i] / g.diag_sq) * liou + factor * d_liou[i]
        for i in range(4)
    )
    return value, grad  # type: ignore[return-value]


def loss_wiou_v1(pred: BoundingBox, gt: BoundingBox) -> LossEval:
    """IoU loss amplified by exp(center_dist^2 / hull_diag^2)."""
    if _is_identical(pred, gt):
        return LossEval(0.0, _ZERO4)
    value, grad = _wiou_v1_core(_Geom(pred, gt))
    return LossEval(value, grad)


def outlier_degree(
    current_iou_loss: float, state: WiouState
) -> float:
    """beta = current detached IoU loss over the running mean IoU loss."""
    if state.sample_count == 0:
        # Bootstrap: the first sample defines the mean, so it is exactly average.
        return 1.0
    if state.mean_iou_loss <= 0.0:
        if current_iou_loss == 0.0:
            return 1.0
        raise ValueError("running mean of IoU loss is not positive")
    return current_iou_loss / state.mean_iou_loss


def focusing_coefficient(beta: float, params: LossParams | None = None) -> float:
    """r(beta) = beta / (delta * alpha^(beta - delta)).

    Non-monotonic: rises on [0, 1/ln(alpha)), falls after; r(delta) = 1.
    """
    params = params or LossParams()
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return beta / (params.delta * params.alpha ** (beta - params.delta))


def loss_wiou_v3(
    pred: BoundingBox,
    gt: BoundingBox,
    state: WiouState,
    params: LossParams | None = None,
) -> tuple[LossEval, WiouState]:
    """r(beta) * WIoUv1, with beta from the running-mean state.

    beta and r are constants during differentiation. Returns the loss and the
    state advanced by the current detached IoU loss.
    """
    params = params or LossParams()
    current = 1.0 - iou(pred, gt)
    beta = outlier_degree(current, state)
    r = focusing_coefficient(beta, params)
    new_state = state.observe(current, params.running_mean_momentum)
    if _is_identical(pred, gt):
        return LossEval(0.0, _ZERO4), new_state
    value, grad = _wiou_v1_core(_Geom(pred, gt))
    return LossEval(r * value, _vscale(grad, r)), new_state


def _frozen_value_fn(
    kind: LossKind,
    pred: BoundingBox,
    gt: BoundingBox,
    params: LossParams,
    state: WiouState | None,
) -> Callable[[BoundingBox], float]:
    """Value function with the detach conventions frozen at the base point.

    For WIoUv1 the hull diagonal of the *base* pair stays in the exponent;
    for WIoUv3 additionally beta and r are fixed. All other kinds are
    evaluated plainly.
    """
    if kind is LossKind.WIOU_V1 or kind is LossKind.WIOU_V3:
        base = _Geom(pred, gt)
        if base.diag_sq <= 0.0:
            raise DegenerateHullError("enclosing hull has zero diagonal")
        diag_sq = base.diag_sq
        r = 1.0
        if kind is LossKind.WIOU_V3:
            beta = outlier_degree(1.0 - base.iou, state or WiouState())
            r = focusing_coefficient(beta, params)

        def f(p: BoundingBox) -> float:
            g = _Geom(p, gt)
            return r * math.exp(g.dist_sq / diag_sq) * (1.0 - g.iou)

        return f

    simple = {
        LossKind.IOU: lambda p: loss_iou(p, gt).value,
        LossKind.GIOU: lambda p: loss_giou(p, gt).value,
        LossKind.DIOU: lambda p: loss_diou(p, gt).value,
        LossKind.CIOU: lambda p: loss_ciou(p, gt).value,
        LossKind.EIOU: lambda p: loss_eiou(p, gt).value,
        LossKind.FOCAL_EIOU: lambda p: loss_focal_eiou(p, gt, params).value,
    }
    return simple[kind]


def finite_diff_grad(
    kind: LossKind,
    pred: BoundingBox,
    gt: BoundingBox,
    h: float = 1e-6,
    params: LossParams | None = None,
    state: WiouState | None = None,
) -> Vec4:
    """Central-difference gradient over predicted corners.

    Honors the same detach conventions as the analytic path, so away from
    kinks the two must agree.
    """
    if h <= 0:
        raise ValueError("step h must be > 0")
    params = params or LossParams()
    f = _frozen_value_fn(kind, pred, gt, params, state)
    base = list(pred.corners())
    grad = []
    for i in range(4):
        hi = list(base)
        lo = list(base)
        hi[i] += h
        lo[i] -= h
        grad.append((f(BoundingBox(*hi)) - f(BoundingBox(*lo))) / (2.0 * h))
    return tuple(grad)  # type: ignore[return-value]


def evaluate_loss(
    kind: LossKind,
    pred: BoundingBox,
    gt: BoundingBox,
    params: LossParams | None = None,
    state: WiouState | None = None,
) -> tuple[LossEval, WiouState | None]:
    """Uniform dispatch; returns the updated state for WIoUv3, else the input."""
    params = params or LossParams()
    if kind is LossKind.IOU:
        return loss_iou(pred, gt), state
    if kind is LossKind.GIOU:
        return loss_giou(pred, gt), state
    if kind is LossKind.DIOU:
        return loss_diou(pred, gt), state
    if kind is LossKind.CIOU:
        return loss_ciou(pred, gt), state
    if kind is LossKind.EIOU:
        return loss_eiou(pred, gt), state
    if kind is LossKind.FOCAL_EIOU:
        return loss_focal_eiou(pred, gt, params), state
    if kind is LossKind.WIOU_V1:
        return loss_wiou_v1(pred, gt), state
    if kind is LossKind.WIOU_V3:
        ev, new_state = loss_wiou_v3(pred, gt, state or WiouState(), params)
        return ev, new_state
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass(frozen=True)
class TrajectoryRow:
    iteration: int
    loss: float
    iou: float
    center_dist: float
    area: float
    box: BoundingBox


@dataclass(frozen=True)
class Trajectory:
    kind: LossKind
    rows: tuple[TrajectoryRow, ...]

    @property
    def final_box(self) -> BoundingBox:
        return self.rows[-1].box


TRAJECTORY_CSV_HEADER = ["iter", "loss", "iou", "center_dist", "area", "x1", "y1", "x2", "y2"]


def write_trajectory_csv(trajectory: Trajectory, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(TRAJECTORY_CSV_HEADER)
    for row in trajectory.rows:
        b = row.box
        writer.writerow(
            [row.iteration]
            + [f"{v:.12g}" for v in (row.loss, row.iou, row.center_dist, row.area)]
            + [f"{v:.12g}" for v in (b.x1, b.y1, b.x2, b.y2)]
        )


DEFAULT_ARENA = (-1e4, -1e4, 1e4, 1e4)


def simulate_regression(
    kind: LossKind,
    start: BoundingBox,
    gt: BoundingBox,
    step: float,
    iters: int,
    params: LossParams | None = None,
    state: WiouState | None = None,
    arena: tuple[float, float, float, float] = DEFAULT_ARENA,
) -> Trajectory:
    """Plain gradient descent on the chosen loss over predicted corners.

    Corners are re-ordered and clamped to the arena after every step so the
    box never inverts mid-descent. Raises DivergedError (naming the
    iteration) if any value goes non-finite.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    params = params or LossParams()
    if kind is LossKind.WIOU_V3 and state is None:
        state = WiouState()

    def clamp(b: BoundingBox) -> BoundingBox:
        xmin, ymin, xmax, ymax = arena
        return BoundingBox(
            min(max(b.x1, xmin), xmax),
            min(max(b.y1, ymin), ymax),
            min(max(b.x2, xmin), xmax),
            min(max(b.y2, ymin), ymax),
        )

    box = clamp(start.normalized())
    rows: list[TrajectoryRow] = []
    for it in range(iters + 1):
        ev, state = evaluate_loss(kind, box, gt, params, state)
        if not all(map(math.isfinite, (ev.value, *ev.grad, *box.corners()))):
            raise DivergedError(it)
        rows.append(
            TrajectoryRow(
                iteration=it,
                loss=ev.value,
                iou=iou(box, gt),
                center_dist=math.sqrt(center_distance_sq(box, gt)),
                area=box.area,
                box=box,
            )
        )
        if it == iters:
            break
        moved = BoundingBox(
            box.x1 - step * ev.grad[0],
            box.y1 - step * ev.grad[1],
            box.x2 - step * ev.grad[2],
            box.y2 - step * ev.grad[3],
        )
        box = clamp(moved.normalized())
    return Trajectory(kind, tuple(rows))
