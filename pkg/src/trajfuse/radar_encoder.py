"""Pillar encoder turning radar points into a BEV feature map on the global grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BevGridSpec

POINT_FEATURES = 6  # x_rel, y_rel, z, vr, rcs, log(1 + count)


@dataclass(frozen=True)
class RadarPoint:
    x: float
    y: float
    z: float
    vr: float
    rcs: float


def as_point_array(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        arr = points.astype(np.float64).reshape(-1, 5)
    else:
        arr = np.array([[p.x, p.y, p.z, p.vr, p.rcs] for p in points], dtype=np.float64).reshape(-1, 5)
    if not np.all(np.isfinite(arr)):
        raise ValueError("radar points must be finite")
    return arr


def pillar_inputs(points, grid: BevGridSpec):
    """Per-point pillar features and flat cell ids for in-grid points."""
    pts = as_point_array(points)
    ix = np.floor((pts[:, 0] - grid.x_min) / grid.cell_x).astype(np.int64)
    iy = np.floor((pts[:, 1] - grid.y_min) / grid.cell_y).astype(np.int64)
    ok = (ix >= 0) & (ix < grid.width) & (iy >= 0) & (iy < grid.height)
    pts, ix, iy = pts[ok], ix[ok], iy[ok]
    cell = iy * grid.width + ix
    counts = np.bincount(cell, minlength=grid.width * grid.height)[cell] if len(cell) else np.zeros(0)
    feats = np.empty((len(pts), POINT_FEATURES))
    feats[:, 0] = pts[:, 0] - (grid.x_min + (ix + 0.5) * grid.cell_x)
    feats[:, 1] = pts[:, 1] - (grid.y_min + (iy + 0.5) * grid.cell_y)
    feats[:, 2:5] = pts[:, 2:5]
    feats[:, 5] = np.log1p(counts)
    return feats, cell


def encode_radar(points, grid: BevGridSpec, params: dict):
    """Encode radar points into a (C, H, W) map.

    Each point's pillar feature passes through a shared linear layer and ReLU;
    points in the same cell are max-pooled and the pooled vector is written at
    that cell.  Empty cells are zero.  ``params`` holds ``W`` (6, C) and ``b`` (C,).
    Returns ``(fmap, cache)``.
    """
    W, b = params["W"], params["b"]
    C = W.shape[1]
    H, Wd = grid.shape
    feats, cell = pillar_inputs(points, grid)
    pre = feats @ W + b
    act = np.maximum(pre, 0.0)
    fmap = np.zeros((C, H * Wd))
    arg = np.zeros((0, C), dtype=np.int64)
    cells = np.zeros(0, dtype=np.int64)
    if len(cell):
        order = np.argsort(cell, kind="stable")
        sc = cell[order]
        starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
        pooled = np.maximum.reduceat(act[order], starts, axis=0)
        cells = sc[starts]
        fmap[:, cells] = pooled.T
        # first point attaining the max receives the gradient
        group = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(sc)]))
        hit = act[order] == pooled[group]
        pos = np.arange(len(sc))[:, None] * np.ones((1, C), dtype=np.int64)
        pos = np.where(hit, pos, len(sc))
        first = np.minimum.reduceat(pos, starts, axis=0)
        arg = order[first]
    cache = dict(feats=feats, pre=pre, arg=arg, cells=cells, shape=(C, H, Wd))
    return fmap.reshape(C, H, Wd), cache


def encode_radar_backward(dmap, cache):
    """Gradients ``(dW, db)`` of the encoder parameters."""
    C, H, Wd = cache["shape"]
    feats, pre, arg, cells = cache["feats"], cache["pre"], cache["arg"], cache["cells"]
    dpre = np.zeros_like(pre)
    if len(cells):
        g = dmap.reshape(C, -1)[:, cells].T  # (pillars, C)
        cols = np.arange(C)[None, :].repeat(len(cells), axis=0)
        np.add.at(dpre, (arg, cols), g)
        dpre *= pre > 0
    return feats.T @ dpre, dpre.sum(axis=0)


def read_radar_points(path) -> np.ndarray:
    """Read ``x y z vr rcs`` lines (whitespace separated, ``#`` comments allowed)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields (x y z vr rcs), got {len(parts)}")
            rows.append([float(v) for v in parts])
    return as_point_array(np.array(rows).reshape(-1, 5))


def write_radar_points(path, points):
    pts = as_point_array(points)
    with open(path, "w") as fh:
        for row in pts:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
