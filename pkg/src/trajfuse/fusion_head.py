"""Reprojection of trajectory features, CBR fusion, anchor head and detection loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BevGridSpec, BevIndex, Box3D, nearest_bev_iou, wrap_angle
from .numerics import (
    ParamBundle,
    batchnorm,
    batchnorm_backward,
    conv3x3,
    conv3x3_backward,
    relu,
    sigmoid,
    softmax,
    softplus,
    xavier_uniform,
)

DIR_OFFSET = np.pi / 4


@dataclass
class AnchorConfig:
    classes: tuple = ("Car", "Pedestrian", "Cyclist")
    sizes: tuple = ((3.9, 1.6, 1.56), (0.8, 0.6, 1.73), (1.76, 0.6, 1.73))
    ground_z: float = 0.0
    yaws: tuple = (0.0, np.pi / 2)
    match_thr: tuple = (0.6, 0.5, 0.5)
    unmatch_thr: tuple = (0.45, 0.35, 0.35)

    def __post_init__(self):
        n = len(self.classes)
        if not (len(self.sizes) == len(self.match_thr) == len(self.unmatch_thr) == n):
            raise ValueError("per-class anchor settings must match the class list")
        for s in self.sizes:
            if min(s) <= 0:
                raise ValueError("anchor sizes must be positive")
        for hi, lo in zip(self.match_thr, self.unmatch_thr):
            if not hi > lo:
                raise ValueError("match threshold must exceed the ignore threshold")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def per_cell(self) -> int:
        return len(self.classes) * len(self.yaws)


def make_anchors(grid: BevGridSpec, acfg: AnchorConfig):
    """Anchors laid out one set per cell: ``(anchors (H*W*A, 7), anchor_cls (H*W*A,))``."""
    H, W = grid.shape
    xs = grid.x_min + (np.arange(W) + 0.5) * grid.cell_x
    ys = grid.y_min + (np.arange(H) + 0.5) * grid.cell_y
    per = []
    cls = []
    for c, (l, w, d) in enumerate(acfg.sizes):
        for yaw in acfg.yaws:
            per.append((l, w, d, acfg.ground_z + d / 2.0, yaw))
            cls.append(c)
    A = len(per)
    out = np.zeros((H, W, A, 7))
    out[..., 0] = xs[None, :, None]
    out[..., 1] = ys[:, None, None]
    for a, (l, w, d, z, yaw) in enumerate(per):
        out[:, :, a, 2] = z
        out[:, :, a, 3:6] = (l, w, d)
        out[:, :, a, 6] = yaw
    return out.reshape(-1, 7), np.tile(np.array(cls), H * W)


# --------------------------------------------------------------------------
# reprojection and fusion


def reproject(F_S, indexes: list[BevIndex], grid_shape):
    """Scatter trajectory vectors (R, C) into a (C, H, W) map; collisions sum.

    Returns ``(map, dropped)`` where ``dropped`` counts out-of-range indexes.
    """
    F_S = np.asarray(F_S, dtype=np.float64).reshape(len(indexes), -1) if len(indexes) else np.zeros((0, 0))
    H, W = grid_shape
    C = F_S.shape[1] if len(indexes) else 0
    keep = [r for r, idx in enumerate(indexes) if idx.in_range and 0 <= idx.ix < W and 0 <= idx.iy < H]
    dropped = len(indexes) - len(keep)
    return _scatter(F_S[keep], [indexes[r] for r in keep], C, H, W), dropped


def _scatter(F, idx, C, H, W):
    out = np.zeros((C, H * W))
    if len(idx):
        lin = np.array([i.iy * W + i.ix for i in idx])
        for c in range(C):
            out[c] = np.bincount(lin, weights=F[:, c], minlength=H * W)
    return out.reshape(C, H, W)


def reproject_backward(dmap, indexes: list[BevIndex]):
    """Gradient w.r.t. the trajectory vectors (zero rows for dropped indexes)."""
    C, H, W = dmap.shape
    out = np.zeros((len(indexes), C))
    for r, idx in enumerate(indexes):
        if idx.in_range and 0 <= idx.ix < W and 0 <= idx.iy < H:
            out[r] = dmap[:, idx.iy, idx.ix]
    return out


def init_cbr_params(params: ParamBundle, C: int, rng: np.random.Generator):
    fan_in, fan_out = 3 * C * 9, C * 9
    params.add("cbr.W", xavier_uniform(rng, fan_in, fan_out, shape=(C, 3 * C, 3, 3)))
    params.add("cbr.b", np.zeros(C))
    params.add("cbr.gamma", np.ones(C))
    params.add("cbr.beta", np.zeros(C))
    params.add("cbr.running_mean", np.zeros(C), trainable=False)
    params.add("cbr.running_var", np.ones(C), trainable=False)


def fuse_cbr(F_s_local, F_s_global, F_current, p: dict, training: bool = False,
             momentum: float = 0.9, eps: float = 1e-5):
    """Concat([local, global, current]) -> 3x3 conv -> batch norm -> ReLU.

    ``p`` carries ``W``, ``b``, ``gamma``, ``beta``, ``running_mean`` and
    ``running_var``; running statistics are updated in place when training.
    """
    shapes = {F_s_local.shape, F_s_global.shape, F_current.shape}
    if len(shapes) != 1:
        raise ValueError(f"fusion inputs differ in shape: {sorted(shapes)}")
    x = np.concatenate([F_s_local, F_s_global, F_current], axis=0)
    conv, cols = conv3x3(x, p["W"], p["b"])
    bn, bcache = batchnorm(conv, p["gamma"], p["beta"], p["running_mean"], p["running_var"],
                           training, momentum, eps)
    out = relu(bn)
    return out, dict(cols=cols, bn=bn, bcache=bcache, x_shape=x.shape)


def fuse_cbr_backward(dout, cache, p: dict):
    """Returns ``(d_local, d_global, d_current, grads)``."""
    dbn = dout * (cache["bn"] > 0)
    dconv, dgamma, dbeta = batchnorm_backward(dbn, cache["bcache"])
    dx, dW, db = conv3x3_backward(dconv, cache["cols"], p["W"], cache["x_shape"])
    C = dx.shape[0] // 3
    return dx[:C], dx[C:2 * C], dx[2 * C:], dict(W=dW, b=db, gamma=dgamma, beta=dbeta)


# --------------------------------------------------------------------------
# head


def init_head_params(params: ParamBundle, C: int, acfg: AnchorConfig, rng: np.random.Generator,
                     prior: float = 0.01):
    A, K = acfg.per_cell, acfg.num_classes
    params.add("head.W_cls", xavier_uniform(rng, C, A * K))
    params.add("head.b_cls", np.full(A * K, -np.log((1 - prior) / prior)))
    params.add("head.W_box", xavier_uniform(rng, C, A * 7) * 0.1)
    params.add("head.b_box", np.zeros(A * 7))
    params.add("head.W_dir", xavier_uniform(rng, C, A * 2))
    params.add("head.b_dir", np.zeros(A * 2))


def head_forward(F, p: dict, acfg: AnchorConfig):
    """1x1 predictors on a (C, H, W) map.

    Returns flat ``(cls (N, K), box (N, 7), dir (N, 2), cache)`` with anchors
    ordered (row, column, anchor) like :func:`make_anchors`.
    """
    C, H, W = F.shape
    A, K = acfg.per_cell, acfg.num_classes
    x = F.reshape(C, -1).T
    cls = (x @ p["W_cls"] + p["b_cls"]).reshape(H * W * A, K)
    box = (x @ p["W_box"] + p["b_box"]).reshape(H * W * A, 7)
    dr = (x @ p["W_dir"] + p["b_dir"]).reshape(H * W * A, 2)
    return cls, box, dr, dict(x=x, shape=F.shape)


def head_backward(dcls, dbox, ddir, cache, p: dict):
    x = cache["x"]
    HW = x.shape[0]
    g = {}
    dx = np.zeros_like(x)
    for name, d in (("cls", dcls), ("box", dbox), ("dir", ddir)):
        d2 = d.reshape(HW, -1)
        g["W_" + name] = x.T @ d2
        g["b_" + name] = d2.sum(axis=0)
        dx += d2 @ p["W_" + name].T
    return dx.T.reshape(cache["shape"]), g


def _limit_period(val, offset=0.5, period=np.pi):
    return val - np.floor(val / period + offset) * period


def encode_boxes(gt, anchors):
    """Residual encoding of (N, 7) boxes against (N, 7) anchors."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    diag = np.sqrt(anchors[:, 3] ** 2 + anchors[:, 4] ** 2)
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - anchors[:, 0]) / diag
    out[:, 1] = (gt[:, 1] - anchors[:, 1]) / diag
    out[:, 2] = (gt[:, 2] - anchors[:, 2]) / anchors[:, 5]
    out[:, 3:6] = np.log(gt[:, 3:6] / anchors[:, 3:6])
    out[:, 6] = _limit_period(gt[:, 6] - anchors[:, 6])
    return out


def direction_bins(theta):
    return np.floor(np.mod(np.asarray(theta) - DIR_OFFSET, 2 * np.pi) / np.pi).astype(np.int64)


def decode_boxes(deltas, anchors, dir_bins=None):
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    diag = np.sqrt(anchors[:, 3] ** 2 + anchors[:, 4] ** 2)
    out = np.empty_like(anchors)
    out[:, 0] = deltas[:, 0] * diag + anchors[:, 0]
    out[:, 1] = deltas[:, 1] * diag + anchors[:, 1]
    out[:, 2] = deltas[:, 2] * anchors[:, 5] + anchors[:, 2]
    out[:, 3:6] = np.exp(deltas[:, 3:6]) * anchors[:, 3:6]
    theta = anchors[:, 6] + deltas[:, 6]
    if dir_bins is not None:
        theta = _limit_period(theta - DIR_OFFSET, 0.0, np.pi) + DIR_OFFSET + np.pi * np.asarray(dir_bins)
    out[:, 6] = wrap_angle(theta)
    return out


@dataclass
class Targets:
    labels: np.ndarray  # (N,) 1 positive, 0 negative, -1 ignored
    cls_onehot: np.ndarray  # (N, K)
    box: np.ndarray  # (N, 7) encoded regression targets (valid on positives)
    dir: np.ndarray  # (N,) direction bin (valid on positives)


def assign_targets(anchors, anchor_cls, gt_boxes, gt_cls, acfg: AnchorConfig) -> Targets:
    """Per-class anchor assignment by nearest-BEV IoU thresholds.

    An anchor is positive when its IoU with a same-class box reaches the
    class match threshold (each box also claims its best anchor), negative
    below the unmatch threshold and ignored in between.
    """
    N = len(anchors)
    K = acfg.num_classes
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    gt_cls = np.asarray(gt_cls, dtype=np.int64).reshape(-1)
    labels = np.zeros(N, dtype=np.int64)
    onehot = np.zeros((N, K))
    box = np.zeros((N, 7))
    dirs = np.zeros(N, dtype=np.int64)
    matched_gt = np.full(N, -1)
    for c in range(K):
        a_idx = np.flatnonzero(anchor_cls == c)
        g_idx = np.flatnonzero(gt_cls == c)
        if not len(g_idx) or not len(a_idx):
            continue
        iou = nearest_bev_iou(anchors[a_idx], gt_boxes[g_idx])
        best_gt = iou.argmax(axis=1)
        best_iou = iou.max(axis=1)
        ign = (best_iou >= acfg.unmatch_thr[c]) & (best_iou < acfg.match_thr[c])
        labels[a_idx[ign]] = -1
        pos = best_iou >= acfg.match_thr[c]
        gi = best_gt.copy()
        # every box keeps at least its best anchor(s)
        per_gt_best = iou.max(axis=0)
        for j in range(len(g_idx)):
            if per_gt_best[j] <= 0:
                continue
            hits = np.flatnonzero(iou[:, j] == per_gt_best[j])
            pos[hits] = True
            gi[hits] = j
        matched_gt[a_idx[pos]] = g_idx[gi[pos]]
    pos = matched_gt >= 0
    labels[pos] = 1
    if pos.any():
        g = matched_gt[pos]
        onehot[np.flatnonzero(pos), gt_cls[g]] = 1.0
        box[pos] = encode_boxes(gt_boxes[g], anchors[pos])
        dirs[pos] = direction_bins(gt_boxes[g, 6])
    return Targets(labels, onehot, box, dirs)


@dataclass
class LossWeights:
    beta1: float = 2.0
    beta2: float = 1.0
    beta3: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0 / 9.0

    def __post_init__(self):
        ws = (self.beta1, self.beta2, self.beta3)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")


def focal_loss(logits, onehot, alpha=0.25, gamma=2.0):
    """Elementwise sigmoid focal loss and its gradient w.r.t. the logits."""
    p = sigmoid(logits)
    log_p = -softplus(-logits)
    log_q = -softplus(logits)
    pos = onehot > 0.5
    loss = np.where(pos, -alpha * (1 - p) ** gamma * log_p, -(1 - alpha) * p ** gamma * log_q)
    grad = np.where(pos, alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p)),
                    (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * log_q))
    return loss, grad


def smooth_l1(diff, beta):
    a = np.abs(diff)
    small = a < beta
    loss = np.where(small, 0.5 * diff * diff / beta, a - 0.5 * beta)
    grad = np.where(small, diff / beta, np.sign(diff))
    return loss, grad


@dataclass
class LossOutput:
    total: float
    loc: float
    cls: float
    dir: float
    dcls: np.ndarray = field(repr=False)
    dbox: np.ndarray = field(repr=False)
    ddir: np.ndarray = field(repr=False)


def detection_loss(cls_pred, box_pred, dir_pred, targets: Targets, w: LossWeights) -> LossOutput:
    """Weighted localisation + focal classification + direction loss with gradients."""
    pos = targets.labels == 1
    care = targets.labels >= 0
    npos = max(float(pos.sum()), 1.0)

    fl, fg = focal_loss(cls_pred, targets.cls_onehot, w.focal_alpha, w.focal_gamma)
    L_cls = float((fl * care[:, None]).sum()) / npos
    dcls = fg * care[:, None] / npos

    diff = box_pred - targets.box
    sl, sg = smooth_l1(diff, w.smooth_l1_beta)
    L_loc = float((sl * pos[:, None]).sum()) / npos
    dbox = sg * pos[:, None] / npos

    probs = softmax(dir_pred, axis=-1)
    onehot_dir = np.zeros_like(dir_pred)
    onehot_dir[np.arange(len(dir_pred)), targets.dir] = 1.0
    logp = dir_pred - np.logaddexp(dir_pred[:, 0], dir_pred[:, 1])[:, None]
    L_dir = float(-(logp * onehot_dir).sum(axis=1)[pos].sum()) / npos
    ddir = (probs - onehot_dir) * pos[:, None] / npos

    total = w.beta1 * L_loc + w.beta2 * L_cls + w.beta3 * L_dir
    return LossOutput(total, L_loc, L_cls, L_dir, w.beta2 * dcls, w.beta1 * dbox, w.beta3 * ddir)


def decode_detections(cls_pred, box_pred, dir_pred, anchors, score_thr: float = 0.1,
                      pre_nms: int = 500, nms_thr: float = 0.1, max_out: int = 100) -> list[Box3D]:
    """Score, decode and class-wise greedy-NMS dense predictions into boxes."""
    scores_all = sigmoid(cls_pred)
    labels = scores_all.argmax(axis=1)
    scores = scores_all[np.arange(len(labels)), labels]
    keep = np.flatnonzero(scores >= score_thr)
    if not len(keep):
        return []
    keep = keep[np.argsort(-scores[keep], kind="stable")][:pre_nms]
    boxes = decode_boxes(box_pred[keep], anchors[keep], dir_pred[keep].argmax(axis=1))
    out = []
    for c in np.unique(labels[keep]):
        sel = np.flatnonzero(labels[keep] == c)
        chosen = _greedy_nms(boxes[sel], nms_thr)
        for i in chosen:
            k = sel[i]
            b = boxes[k]
            out.append(Box3D(*b, cls=int(c), score=float(scores[keep[k]])))
    out.sort(key=lambda b: -b.score)
    return out[:max_out]


def _greedy_nms(boxes, thr):
    """Greedy NMS over score-sorted boxes."""
    if not len(boxes):
        return []
    iou = nearest_bev_iou(boxes, boxes)
    alive = np.ones(len(boxes), dtype=bool)
    chosen = []
    for i in range(len(boxes)):
        if not alive[i]:
            continue
        chosen.append(i)
        alive &= iou[i] <= thr
    return chosen
