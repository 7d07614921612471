"""Synthetic scenes, file formats and AP evaluation.

The generator stands in for a first-stage detector: for every frame it
produces ground truth from constant-velocity kinematics, a noisy detection
list, radar points inside visible objects and global/local BEV feature maps
made of class-signed Gaussian bumps over a noise floor.  Occluded objects
leave no bump, no radar return and no detection in the frames they are
hidden.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BevGridSpec, Box3D, box_to_bev_index, iou_bev
from .memory_bank import FrameRecord

CLASS_SIZES = ((3.9, 1.6, 1.56), (0.8, 0.6, 1.73), (1.76, 0.6, 1.73))
CLASS_SPEEDS = ((3.0, 8.0), (0.5, 1.5), (2.0, 5.0))
CLASS_RADAR = ((8.0, 10.0), (3.0, -5.0), (4.0, 0.0))  # (mean points, mean rcs dB)
CLASS_BUMP = (0.8, 0.35, 0.5)  # bump sigma in metres


@dataclass
class ObjectSpec:
    cls: int
    x: float
    y: float
    yaw: float
    vx: float
    vy: float
    size: tuple
    spawn: int = 0
    despawn: int = 10**9
    occlusions: list = field(default_factory=list)  # [start, end) frame intervals

    def __post_init__(self):
        if self.despawn <= self.spawn:
            raise ValueError("despawn must come after spawn")

    def alive(self, t: int) -> bool:
        return self.spawn <= t < self.despawn

    def occluded(self, t: int) -> bool:
        return any(a <= t < b for a, b in self.occlusions)

    def box(self, t: int, dt: float) -> Box3D:
        l, w, d = self.size
        k = (t - self.spawn) * dt
        return Box3D(self.x + self.vx * k, self.y + self.vy * k, d / 2.0, l, w, d, self.yaw, cls=self.cls)


@dataclass
class ScenarioSpec:
    frames: int
    objects: list
    grid: BevGridSpec = field(default_factory=lambda: BevGridSpec(0.0, 51.2, -25.6, 25.6, 0.4, 0.4))
    dt: float = 0.1
    jitter: float = 0.0
    yaw_jitter: float = 0.0
    dropout: float = 0.0
    clutter_rate: float = 0.0
    C_g: int = 32
    C_l: int = 32
    amplitude: float = 1.0
    noise: float = 0.05
    radar: bool = True
    features: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("scenario needs at least one frame")


def _signatures(n_cls: int, C: int, salt: int) -> np.ndarray:
    # fixed class signatures shared by every scenario
    rng = np.random.default_rng(9000 + salt)
    sig = rng.normal(size=(n_cls, C))
    sig[:, :2] = 0.0  # channels 0/1 carry heading
    return sig / np.linalg.norm(sig, axis=1, keepdims=True) * 1.5


def _paint(fmap, grid: BevGridSpec, boxes, sig, width_scale, amplitude):
    C, H, W = fmap.shape
    xs = grid.x_min + (np.arange(W) + 0.5) * grid.cell_x
    ys = grid.y_min + (np.arange(H) + 0.5) * grid.cell_y
    for b in boxes:
        s = CLASS_BUMP[b.cls] * width_scale
        r = int(math.ceil(4 * s / min(grid.cell_x, grid.cell_y)))
        cx = int((b.x - grid.x_min) // grid.cell_x)
        cy = int((b.y - grid.y_min) // grid.cell_y)
        x0, x1 = max(cx - r, 0), min(cx + r + 1, W)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, H)
        if x0 >= x1 or y0 >= y1:
            continue
        gx = np.exp(-((xs[x0:x1] - b.x) ** 2) / (2 * s * s))
        gy = np.exp(-((ys[y0:y1] - b.y) ** 2) / (2 * s * s))
        bump = amplitude * gy[:, None] * gx[None, :]
        vec = sig[b.cls].copy()
        vec[0], vec[1] = math.cos(b.theta), math.sin(b.theta)
        fmap[:, y0:y1, x0:x1] += vec[:, None, None] * bump[None]


def _radar_points(rng, boxes, vels, grid: BevGridSpec):
    rows = []
    for b, (vx, vy) in zip(boxes, vels):
        lam, rcs = CLASS_RADAR[b.cls]
        k = rng.poisson(lam)
        if not k:
            continue
        u = rng.uniform(-0.5, 0.5, size=(k, 2)) * (b.l, b.w)
        c, s = math.cos(b.theta), math.sin(b.theta)
        px = b.x + u[:, 0] * c - u[:, 1] * s
        py = b.y + u[:, 0] * s + u[:, 1] * c
        pz = rng.uniform(0.0, b.d, size=k)
        rng_ = np.maximum(np.hypot(px, py), 1e-6)
        vr = (vx * px + vy * py) / rng_ + rng.normal(0, 0.1, size=k)
        rows.append(np.stack([px, py, pz, vr, rcs + rng.normal(0, 2.0, size=k)], axis=1))
    n_clutter = rng.poisson(5)
    if n_clutter:
        rows.append(np.stack([
            rng.uniform(grid.x_min, grid.x_max, n_clutter),
            rng.uniform(grid.y_min, grid.y_max, n_clutter),
            rng.uniform(0.0, 2.0, n_clutter),
            rng.normal(0, 0.3, n_clutter),
            rng.normal(-10, 3, n_clutter)], axis=1))
    pts = np.concatenate(rows) if rows else np.zeros((0, 5))
    ok = (pts[:, 0] >= grid.x_min) & (pts[:, 0] < grid.x_max) & (pts[:, 1] >= grid.y_min) & (pts[:, 1] < grid.y_max)
    return pts[ok]


@dataclass
class FrameTruth:
    gt: list  # list[Box3D] of objects alive at t (including occluded ones)
    gt_ids: list  # object index per gt box
    det_gt: list  # object index per detection, -1 for clutter


def generate_frame(spec: ScenarioSpec, t: int):
    """Build frame ``t``: returns ``(FrameRecord, FrameTruth)``."""
    if not 0 <= t < spec.frames:
        raise ValueError(f"frame {t} outside [0, {spec.frames})")
    rng = np.random.default_rng([spec.seed, t])
    grid = spec.grid
    gt, gt_ids, visible, vels = [], [], [], []
    for k, obj in enumerate(spec.objects):
        if not obj.alive(t):
            continue
        b = obj.box(t, spec.dt)
        gt.append(b)
        gt_ids.append(k)
        if not obj.occluded(t):
            visible.append((k, b))
            vels.append((obj.vx, obj.vy))

    dets, det_gt = [], []
    for k, b in visible:
        if rng.uniform() < spec.dropout:
            continue
        j = rng.normal(0, spec.jitter, size=2) if spec.jitter > 0 else np.zeros(2)
        yj = rng.normal(0, spec.yaw_jitter) if spec.yaw_jitter > 0 else 0.0
        score = float(np.clip(rng.normal(0.8, 0.1), 0.3, 1.0)) if spec.jitter > 0 or spec.dropout > 0 else 1.0
        dets.append(b.replace(x=b.x + j[0], y=b.y + j[1], theta=b.theta + yj, score=score))
        det_gt.append(k)
    n_clutter = rng.poisson(spec.clutter_rate) if spec.clutter_rate > 0 else 0
    for _ in range(n_clutter):
        c = int(rng.integers(len(CLASS_SIZES)))
        l, w, d = CLASS_SIZES[c]
        dets.append(Box3D(rng.uniform(grid.x_min, grid.x_max), rng.uniform(grid.y_min, grid.y_max), d / 2,
                          l, w, d, rng.uniform(-np.pi, np.pi), cls=c, score=float(rng.uniform(0.1, 0.5))))
        det_gt.append(-1)

    H, W = grid.shape
    if spec.features:
        Fg = rng.normal(0, spec.noise, size=(spec.C_g, H, W)) if spec.noise > 0 else np.zeros((spec.C_g, H, W))
        Fl = rng.normal(0, spec.noise, size=(spec.C_l, 2 * H, 2 * W)) if spec.noise > 0 else np.zeros((spec.C_l, 2 * H, 2 * W))
        vis_boxes = [b for _, b in visible]
        _paint(Fg, grid, vis_boxes, _signatures(len(CLASS_SIZES), spec.C_g, 0), 1.0, spec.amplitude)
        _paint(Fl, grid.upsampled(2), vis_boxes, _signatures(len(CLASS_SIZES), spec.C_l, 1), 0.6, spec.amplitude)
    else:
        Fg = np.zeros((spec.C_g, H, W))
        Fl = np.zeros((spec.C_l, 2 * H, 2 * W))
    radar = _radar_points(rng, [b for _, b in visible], vels, grid) if spec.radar else np.zeros((0, 5))
    rec = FrameRecord(t, Fg, Fl, dets, [box_to_bev_index(d, grid) for d in dets], radar, t * spec.dt)
    return rec, FrameTruth(gt, gt_ids, det_gt)


@dataclass
class SceneConfig:
    """Knobs for random scenario generation."""

    frames: int = 10
    x_min: float = 0.0
    x_max: float = 25.6
    y_min: float = -12.8
    y_max: float = 12.8
    cell: float = 0.4
    C_g: int = 16
    C_l: int = 16
    min_objects: int = 3
    max_objects: int = 6
    class_probs: tuple = (0.5, 0.25, 0.25)
    jitter: float = 0.1
    yaw_jitter: float = 0.03
    dropout: float = 0.1
    clutter_rate: float = 0.5
    occlusion_prob: float = 0.6
    occlusion_min: int = 1
    occlusion_max: int = 3
    amplitude: float = 1.0
    noise: float = 0.05
    dt: float = 0.1

    @property
    def grid(self) -> BevGridSpec:
        return BevGridSpec(self.x_min, self.x_max, self.y_min, self.y_max, self.cell, self.cell)


def random_scenario(cfg: SceneConfig, seed: int) -> ScenarioSpec:
    """Draw a scenario whose objects stay inside the grid and do not overlap at spawn."""
    rng = np.random.default_rng([seed, 7])
    grid = cfg.grid
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objs: list[ObjectSpec] = []
    tries = 0
    T = cfg.frames * cfg.dt
    margin = 2.5
    while len(objs) < n and tries < 500:
        tries += 1
        c = int(rng.choice(len(cfg.class_probs), p=np.array(cfg.class_probs) / sum(cfg.class_probs)))
        lo, hi = CLASS_SPEEDS[c]
        speed = rng.uniform(lo, hi)
        yaw = rng.uniform(-np.pi, np.pi) if c == 1 else rng.choice([0.0, np.pi]) + rng.normal(0, 0.2)
        vx, vy = speed * math.cos(yaw), speed * math.sin(yaw)
        x0 = rng.uniform(grid.x_min + margin, grid.x_max - margin)
        y0 = rng.uniform(grid.y_min + margin, grid.y_max - margin)
        x1, y1 = x0 + vx * T, y0 + vy * T
        if not (grid.x_min + margin < x1 < grid.x_max - margin and grid.y_min + margin < y1 < grid.y_max - margin):
            continue
        size = tuple(s * rng.uniform(0.95, 1.05) for s in CLASS_SIZES[c])
        clash = False
        for o in objs:
            # keep trajectories apart: closest approach over the clip
            for k in np.linspace(0, T, 6):
                if math.hypot(x0 + vx * k - (o.x + o.vx * k), y0 + vy * k - (o.y + o.vy * k)) < 5.0:
                    clash = True
                    break
            if clash:
                break
        if clash:
            continue
        occ = []
        if rng.uniform() < cfg.occlusion_prob and cfg.frames > 2:
            length = int(rng.integers(cfg.occlusion_min, cfg.occlusion_max + 1))
            start = int(rng.integers(1, max(cfg.frames - length, 2)))
            occ.append((start, start + length))
        objs.append(ObjectSpec(c, x0, y0, float(yaw), vx, vy, size, 0, cfg.frames, occ))
    return ScenarioSpec(cfg.frames, objs, grid, cfg.dt, cfg.jitter, cfg.yaw_jitter, cfg.dropout,
                        cfg.clutter_rate, cfg.C_g, cfg.C_l, cfg.amplitude, cfg.noise, seed=seed)


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalRegion:
    """Entire annotated area or the near-field driving corridor.

    The corridor is given in camera coordinates (lateral x, forward z); in the
    BEV frame that is ``|y| < half_width`` and ``x < depth``.
    """

    mode: str = "EAA"
    x_min: float = 0.0
    x_max: float = 51.2
    y_min: float = -25.6
    y_max: float = 25.6
    half_width: float = 4.0
    depth: float = 25.0

    def __post_init__(self):
        if self.mode not in ("EAA", "RoI"):
            raise ValueError(f"unknown region mode {self.mode!r}")
        if self.mode == "RoI" and not (self.y_min < -self.half_width and self.half_width < self.y_max
                                       and self.x_min < self.depth <= self.x_max):
            raise ValueError("RoI must lie inside the annotated area")

    @classmethod
    def for_grid(cls, grid: BevGridSpec, mode: str = "EAA", **kw) -> "EvalRegion":
        return cls(mode, grid.x_min, grid.x_max, grid.y_min, grid.y_max, **kw)

    def contains(self, b: Box3D) -> bool:
        inside = self.x_min <= b.x < self.x_max and self.y_min <= b.y < self.y_max
        if self.mode == "RoI":
            inside = inside and -self.half_width < b.y < self.half_width and b.x < self.depth
        return inside


DEFAULT_IOU_THR = (0.5, 0.25, 0.25)


def average_precision_r40(tp_flags, n_gt: int) -> float:
    """40-point interpolated AP from score-sorted true-positive flags."""
    if n_gt == 0:
        return float("nan")
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=np.float64))
    if not len(tp):
        return 0.0
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in np.arange(1, 41) / 40.0:
        hit = np.flatnonzero(recall >= r - 1e-12)
        ap += env[hit[0]] if len(hit) else 0.0
    return ap / 40.0


def match_class(dets_per_frame, gts_per_frame, cls: int, thr: float, region: EvalRegion):
    """Greedy score-ranked matching for one class.

    Returns ``(tp_flags, n_gt, pairs)`` where ``pairs`` lists matched
    ``(frame, det_index, gt_index)`` triples.
    """
    entries = []
    n_gt = 0
    frames = sorted(set(dets_per_frame) | set(gts_per_frame))
    gts = {}
    for f in frames:
        g = [(i, b) for i, b in enumerate(gts_per_frame.get(f, [])) if b.cls == cls and region.contains(b)]
        gts[f] = g
        n_gt += len(g)
        for i, d in enumerate(dets_per_frame.get(f, [])):
            if d.cls == cls and region.contains(d):
                entries.append((-d.score, f, i, d))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    used = {f: set() for f in frames}
    flags, pairs = [], []
    for _, f, i, d in entries:
        best, best_iou = None, thr
        for gi, g in gts[f]:
            if gi in used[f]:
                continue
            v = iou_bev(d, g)
            if v >= best_iou:
                best, best_iou = gi, v
        if best is None:
            flags.append(0)
        else:
            used[f].add(best)
            flags.append(1)
            pairs.append((f, i, best))
    return flags, n_gt, pairs


def evaluate_ap(dets_per_frame, gts_per_frame, iou_thr=DEFAULT_IOU_THR, region: EvalRegion | None = None,
                num_classes: int = 3) -> dict:
    """Per-class AP (40-point) and their mean over classes that have ground truth.

    Inputs map frame id to lists of :class:`Box3D`.  Returns
    ``{"ap": {cls: AP}, "mAP": float}``; classes without ground truth get NaN
    and are left out of the mean.
    """
    region = region or EvalRegion(x_min=-np.inf, x_max=np.inf, y_min=-np.inf, y_max=np.inf)
    ap = {}
    for c in range(num_classes):
        flags, n_gt, _ = match_class(dets_per_frame, gts_per_frame, c, iou_thr[c], region)
        ap[c] = average_precision_r40(flags, n_gt)
    vals = [v for v in ap.values() if not math.isnan(v)]
    return {"ap": ap, "mAP": float(np.mean(vals)) if vals else float("nan")}


# --------------------------------------------------------------------------
# files


def write_detections(path, dets_per_frame):
    """``frame cls score x y z l w d theta`` per line, frames in ascending order."""
    with open(path, "w") as fh:
        for f in sorted(dets_per_frame):
            for b in dets_per_frame[f]:
                vals = (b.score, b.x, b.y, b.z, b.l, b.w, b.d, b.theta)
                fh.write(f"{f} {b.cls} " + " ".join(repr(float(v)) for v in vals) + "\n")


def read_detections(path) -> dict:
    out: dict[int, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 10:
                raise ValueError(f"{path}: line {lineno}: expected 10 fields, got {len(parts)}")
            try:
                f, c = int(parts[0]), int(parts[1])
                score, x, y, z, l, w, d, th = (float(v) for v in parts[2:])
                box = Box3D(x, y, z, l, w, d, th, cls=c, score=score)
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            out.setdefault(f, []).append(box)
    return out


_FRAME_MAGIC = b"M3FR"
_FRAME_VERSION = 1


def _pack_array(a) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def _unpack_array(buf, off):
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    size = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
    return arr, off + 8 * size


def frame_to_bytes(rec: FrameRecord) -> bytes:
    dets = np.array([[b.x, b.y, b.z, b.l, b.w, b.d, b.theta, b.cls, b.score] for b in rec.dets]).reshape(-1, 9)
    idx = np.array([[i.ix, i.iy, i.fx, i.fy, float(i.in_range)] for i in rec.indexes]).reshape(-1, 5)
    ts = rec.timestamp if rec.timestamp is not None else float("nan")
    body = b"".join([_FRAME_MAGIC, struct.pack("<Hqd", _FRAME_VERSION, rec.frame_id, ts),
                     _pack_array(rec.F_global), _pack_array(rec.F_local), _pack_array(dets),
                     _pack_array(idx), _pack_array(rec.radar)])
    return body + struct.pack("<I", zlib.crc32(body))


def frame_from_bytes(blob: bytes) -> FrameRecord:
    from .geometry import BevIndex

    if blob[:4] != _FRAME_MAGIC:
        raise ValueError("not a frame dump (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError("frame dump CRC mismatch")
    version, frame_id, ts = struct.unpack_from("<Hqd", body, 4)
    if version != _FRAME_VERSION:
        raise ValueError(f"unsupported frame dump version {version}")
    off = 4 + struct.calcsize("<Hqd")
    Fg, off = _unpack_array(body, off)
    Fl, off = _unpack_array(body, off)
    dets, off = _unpack_array(body, off)
    idx, off = _unpack_array(body, off)
    radar, off = _unpack_array(body, off)
    boxes = [Box3D(*r[:7], cls=int(r[7]), score=float(r[8])) for r in dets]
    indexes = [BevIndex(int(r[0]), int(r[1]), float(r[2]), float(r[3]), bool(r[4])) for r in idx]
    return FrameRecord(int(frame_id), Fg, Fl, boxes, indexes, radar, None if math.isnan(ts) else ts)


def save_frame(path, rec: FrameRecord):
    with open(path, "wb") as fh:
        fh.write(frame_to_bytes(rec))


def load_frame(path) -> FrameRecord:
    with open(path, "rb") as fh:
        return frame_from_bytes(fh.read())


def with_noise(spec: ScenarioSpec, **kw) -> ScenarioSpec:
    return replace(spec, **kw)
