"""Oriented 3D boxes, rotated-box overlap measures and the metric/grid mapping.

Coordinates follow the usual LiDAR-style frame: x forward, y left, z up.  Box
yaw is measured around +z from the +x axis.  A box's ``l`` extends along its
heading, ``w`` across it and ``d`` vertically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    out = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    d: float
    theta: float = 0.0
    cls: int = 0
    score: float = 1.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.l, self.w, self.d, self.theta, self.score)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box field in {self}")
        if not (self.l > 0 and self.w > 0 and self.d > 0):
            raise ValueError(f"box sizes must be positive, got l={self.l} w={self.w} d={self.d}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.d

    def as_array(self) -> np.ndarray:
        """[x, y, z, l, w, d, theta]"""
        return np.array([self.x, self.y, self.z, self.l, self.w, self.d, self.theta])

    @classmethod
    def from_array(cls, arr, cls_id: int = 0, score: float = 1.0) -> "Box3D":
        a = [float(v) for v in arr[:7]]
        return cls(*a, cls=int(cls_id), score=float(score))

    def replace(self, **kw) -> "Box3D":
        fields = dict(x=self.x, y=self.y, z=self.z, l=self.l, w=self.w, d=self.d,
                      theta=self.theta, cls=self.cls, score=self.score)
        fields.update(kw)
        return Box3D(**fields)


def bev_corners(box: Box3D) -> list[tuple[float, float]]:
    """Counter-clockwise BEV footprint corners."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    hl, hw = box.l / 2.0, box.w / 2.0
    out = []
    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((box.x + dx * c - dy * s, box.y + dx * s + dy * c))
    return out


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise vertex order)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_convex(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW polygon ``clip``."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for k in range(m):
            px, py = inp[k - 1]
            qx, qy = inp[k]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sq >= 0.0:
                if sp < 0.0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif sp >= 0.0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # order-independent so iou(a, b) == iou(b, a) bit for bit
    if (a.x, a.y, a.l, a.w, a.theta) > (b.x, b.y, b.l, b.w, b.theta):
        a, b = b, a
    ra = math.hypot(a.l, a.w) / 2.0
    rb = math.hypot(b.l, b.w) / 2.0
    if math.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return 0.0
    poly = clip_convex(bev_corners(a), bev_corners(b))
    return max(polygon_area(poly), 0.0)


def _z_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.z - a.d / 2.0, b.z - b.d / 2.0)
    hi = min(a.z + a.d / 2.0, b.z + b.d / 2.0)
    return max(hi - lo, 0.0)


def _check_volume(a: Box3D, b: Box3D):
    if a.volume <= 0.0 or b.volume <= 0.0:
        raise ValueError("degenerate zero-volume box")


def _intersection_volume(a: Box3D, b: Box3D) -> float:
    # clipping round-off can push a near-total overlap past the smaller box
    return min(bev_intersection_area(a, b) * _z_overlap(a, b), a.volume, b.volume)


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = min(bev_intersection_area(a, b), a.l * a.w, b.l * b.w)
    union = a.l * a.w + b.l * b.w - inter
    return inter / union


def iou3d(a: Box3D, b: Box3D) -> float:
    _check_volume(a, b)
    inter = _intersection_volume(a, b)
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


def giou3d(a: Box3D, b: Box3D) -> float:
    """Generalized IoU with an axis-aligned enclosing volume.

    The enclosing volume is the axis-aligned hull of both rotated boxes, so
    for axis-aligned pairs whose hull equals their union the result is the
    plain IoU.
    """
    _check_volume(a, b)
    inter = _intersection_volume(a, b)
    union = a.volume + b.volume - inter
    pts = bev_corners(a) + bev_corners(b)
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    zlo = min(a.z - a.d / 2.0, b.z - b.d / 2.0)
    zhi = max(a.z + a.d / 2.0, b.z + b.d / 2.0)
    enclosing = (max(xs) - min(xs)) * (max(ys) - min(ys)) * (zhi - zlo)
    enclosing = max(enclosing, union)
    return inter / union - (enclosing - union) / enclosing


def nearest_bev_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Axis-aligned BEV IoU after snapping each yaw to the nearest of {0, pi/2}.

    Inputs are (N, 7) and (M, 7) arrays of [x, y, z, l, w, d, theta].  This is
    the cheap overlap measure used for dense anchor assignment and NMS.
    """
    def standup(b):
        b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
        rot = np.abs(wrap_angle(b[:, 6] + 0.0))
        rot = np.minimum(rot, np.pi - rot)
        swap = rot > np.pi / 4
        l = np.where(swap, b[:, 4], b[:, 3])
        w = np.where(swap, b[:, 3], b[:, 4])
        return np.stack([b[:, 0] - l / 2, b[:, 1] - w / 2, b[:, 0] + l / 2, b[:, 1] + w / 2], axis=1)

    sa, sb = standup(boxes_a), standup(boxes_b)
    ix = np.clip(np.minimum(sa[:, None, 2], sb[None, :, 2]) - np.maximum(sa[:, None, 0], sb[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(sa[:, None, 3], sb[None, :, 3]) - np.maximum(sa[:, None, 1], sb[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (sa[:, 2] - sa[:, 0]) * (sa[:, 3] - sa[:, 1])
    area_b = (sb[:, 2] - sb[:, 0]) * (sb[:, 3] - sb[:, 1])
    return inter / np.maximum(area_a[:, None] + area_b[None, :] - inter, 1e-12)


@dataclass(frozen=True)
class BevGridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell_x: float
    cell_y: float

    def __post_init__(self):
        if self.cell_x <= 0 or self.cell_y <= 0:
            raise ValueError("cell sizes must be positive")
        for span, cell, name in ((self.x_max - self.x_min, self.cell_x, "x"),
                                 (self.y_max - self.y_min, self.cell_y, "y")):
            cells = span / cell
            if span <= 0 or abs(cells - round(cells)) > 1e-9:
                raise ValueError(f"{name} extent {span} is not a whole number of {cell} m cells")

    @property
    def width(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_x))

    @property
    def height(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell_y))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def upsampled(self, factor: int = 2) -> "BevGridSpec":
        return BevGridSpec(self.x_min, self.x_max, self.y_min, self.y_max,
                           self.cell_x / factor, self.cell_y / factor)

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max


@dataclass(frozen=True)
class BevIndex:
    ix: int
    iy: int
    fx: float
    fy: float
    in_range: bool = True


def metric_to_bev_index(x: float, y: float, grid: BevGridSpec) -> BevIndex:
    fx = (x - grid.x_min) / grid.cell_x
    fy = (y - grid.y_min) / grid.cell_y
    ix, iy = math.floor(fx), math.floor(fy)
    ok = 0 <= fx < grid.width and 0 <= fy < grid.height
    return BevIndex(int(ix), int(iy), float(fx), float(fy), ok)


def box_to_bev_index(box: Box3D, grid: BevGridSpec) -> BevIndex:
    return metric_to_bev_index(box.x, box.y, grid)


def bev_index_to_metric(idx: BevIndex, grid: BevGridSpec) -> tuple[float, float]:
    """Inverse of :func:`metric_to_bev_index` for the continuous coordinates."""
    return grid.x_min + idx.fx * grid.cell_x, grid.y_min + idx.fy * grid.cell_y


def cell_center(ix: int, iy: int, grid: BevGridSpec) -> tuple[float, float]:
    return grid.x_min + (ix + 0.5) * grid.cell_x, grid.y_min + (iy + 0.5) * grid.cell_y
