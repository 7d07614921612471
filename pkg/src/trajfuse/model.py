"""The trainable second stage and the streaming/offline runners around it."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregation import (
    AggregationConfig,
    AggregatedFeature,
    CandidateBatch,
    goa_backward,
    goa_batch,
    init_aggregation_params,
    lga_backward,
    lga_batch,
    mstr,
    mstr_backward,
)
from .fusion_head import (
    AnchorConfig,
    LossWeights,
    assign_targets,
    decode_detections,
    detection_loss,
    fuse_cbr,
    fuse_cbr_backward,
    head_backward,
    head_forward,
    init_cbr_params,
    init_head_params,
    make_anchors,
    reproject,
    reproject_backward,
)
from .geometry import BevGridSpec, Box3D, box_to_bev_index
from .memory_bank import FrameRecord, MemoryBank
from .numerics import ParamBundle, xavier_uniform
from .radar_encoder import POINT_FEATURES, encode_radar, encode_radar_backward
from .tracker import Tracker, TrackerConfig, TrackSnapshot


@dataclass
class ModelConfig:
    agg: AggregationConfig = field(default_factory=AggregationConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    use_goa: bool = True
    use_lga: bool = True
    bn_momentum: float = 0.9
    score_thr: float = 0.1
    nms_thr: float = 0.1
    max_detections: int = 100


@dataclass
class TrajectoryBatch:
    """Trajectory slots for one current frame.

    ``cands``/``refs`` hold, per (trajectory, window frame), the candidate
    BEV indexes and the optional reference index; ``current`` is each
    trajectory's index in the current frame.
    """

    track_ids: list
    n: int
    cands: list  # [R][n] -> list[BevIndex]
    refs: list  # [R][n] -> BevIndex | None
    current: list  # [R] -> BevIndex

    @property
    def R(self) -> int:
        return len(self.track_ids)

    def global_mask(self) -> np.ndarray:
        return np.array([[bool(c) for c in row] for row in self.cands], dtype=bool).reshape(self.R, self.n)

    def local_mask(self) -> np.ndarray:
        return np.array([[r is not None for r in row] for row in self.refs], dtype=bool).reshape(self.R, self.n)


def build_batch(window: list[FrameRecord], snap: TrackSnapshot, grid: BevGridSpec) -> TrajectoryBatch:
    """Collect the window slots of every live track that has at least one observation."""
    ids, cands, refs, current = [], [], [], []
    H, W = grid.shape
    for row in snap.rows:
        cur = box_to_bev_index(row.box, grid)
        if not cur.in_range:
            continue
        c_row, r_row = [], []
        for rec in window:
            ci = [rec.indexes[k] for k in row.cands.get(rec.frame_id, [])]
            c_row.append([c for c in ci if c.in_range])
            k = row.refs.get(rec.frame_id)
            ref = rec.indexes[k] if k is not None else None
            r_row.append(ref if ref is not None and ref.in_range else None)
        if not any(c_row) and not any(r is not None for r in r_row):
            continue
        ids.append(row.track_id)
        cands.append(c_row)
        refs.append(r_row)
        current.append(cur)
    return TrajectoryBatch(ids, len(window), cands, refs, current)


class SecondStage:
    """Multi-frame refinement network with hand-written backward pass."""

    def __init__(self, grid: BevGridSpec, cfg: ModelConfig | None = None, params: ParamBundle | None = None,
                 seed: int = 0):
        self.grid = grid
        self.cfg = cfg or ModelConfig()
        self.anchors, self.anchor_cls = make_anchors(grid, self.cfg.anchors)
        if params is None:
            params = self.init_params(self.cfg, np.random.default_rng(seed))
        self.params = params

    @staticmethod
    def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamBundle:
        p = ParamBundle()
        C = cfg.agg.C_g
        p.add("radar.W", xavier_uniform(rng, POINT_FEATURES, C) * 0.1)
        p.add("radar.b", np.zeros(C))
        init_aggregation_params(p, cfg.agg, rng)
        init_cbr_params(p, C, rng)
        init_head_params(p, C, cfg.anchors, rng)
        return p

    def _cbr_params(self):
        p = self.params
        return {k: p["cbr." + k] for k in ("W", "b", "gamma", "beta", "running_mean", "running_var")}

    # ------------------------------------------------------------------
    def aggregate(self, window: list[FrameRecord], batch: TrajectoryBatch):
        """Per-frame and fused trajectory features plus the caches for backward."""
        cfg = self.cfg.agg
        p = self.params
        R, n, C = batch.R, batch.n, cfg.C_g
        Fg = [rec.F_global for rec in window]
        Fl = [rec.F_local for rec in window]
        cache = {}
        per_g = np.zeros((R, n, C))
        per_l = np.zeros((R, n, C))
        mask_g = batch.global_mask() if self.cfg.use_goa else np.zeros((R, n), dtype=bool)
        mask_l = batch.local_mask() if self.cfg.use_lga else np.zeros((R, n), dtype=bool)

        if mask_g.any():
            radar, rcache = None, None
            if cfg.use_radar:
                radar, rcache = [], []
                for rec in window:
                    fmap, rc = encode_radar(rec.radar, self.grid, {"W": p["radar.W"], "b": p["radar.b"]})
                    radar.append(fmap)
                    rcache.append(rc)
            rs, fs = np.nonzero(mask_g)
            cb = CandidateBatch.from_lists(fs, [batch.cands[r][f] for r, f in zip(rs, fs)], self.grid.shape)
            out, _, gcache = goa_batch(Fg, radar, cb, p["goa.W_a"], cfg.use_pe)
            per_g[rs, fs] = out
            cache["goa"] = (rs, fs, gcache, rcache)
        if mask_l.any():
            rs, fs = np.nonzero(mask_l)
            ix = [batch.refs[r][f].ix for r, f in zip(rs, fs)]
            iy = [batch.refs[r][f].iy for r, f in zip(rs, fs)]
            out, lcache = lga_batch(Fg, Fl, fs, ix, iy, p.sub("lga"), cfg)
            per_l[rs, fs] = out
            cache["lga"] = (rs, fs, lcache)

        fused_g, _, mg = mstr(per_g.transpose(0, 2, 1), mask_g, p.sub("mstr_g"), cfg.mstr_heads, cfg.use_time_encoding)
        fused_l, _, ml = mstr(per_l.transpose(0, 2, 1), mask_l, p.sub("mstr_l"), cfg.mstr_heads, cfg.use_time_encoding)
        cache["mstr"] = (mg, ml)
        feat = AggregatedFeature(per_g, per_l, fused_g, fused_l, mask_g, mask_l)
        return feat, cache

    def forward(self, window: list[FrameRecord], snap: TrackSnapshot, training: bool = False):
        """Dense predictions for the newest frame in ``window``."""
        batch = build_batch(window, snap, self.grid)
        feat, acache = self.aggregate(window, batch)
        hw = self.grid.shape
        map_g, _ = reproject(feat.fused_global, batch.current, hw)
        map_l, _ = reproject(feat.fused_local, batch.current, hw)
        C = self.cfg.agg.C_g
        if batch.R == 0:
            map_g = np.zeros((C,) + hw)
            map_l = np.zeros((C,) + hw)
        fused, fcache = fuse_cbr(map_l, map_g, window[-1].F_global, self._cbr_params(), training,
                                 self.cfg.bn_momentum)
        cls, box, dr, hcache = head_forward(fused, self.params.sub("head"), self.cfg.anchors)
        cache = dict(batch=batch, feat=feat, acache=acache, fcache=fcache, hcache=hcache, window=window)
        return cls, box, dr, cache

    def backward(self, dcls, dbox, ddir, cache):
        """Accumulate parameter gradients from head-output gradients."""
        p = self.params
        cfg = self.cfg.agg
        dF, g = head_backward(dcls, dbox, ddir, cache["hcache"], p.sub("head"))
        for k, v in g.items():
            p.accumulate("head." + k, v)
        dl_map, dg_map, _, g = fuse_cbr_backward(dF, cache["fcache"], self._cbr_params())
        for k, v in g.items():
            p.accumulate("cbr." + k, v)
        batch, acache = cache["batch"], cache["acache"]
        if batch.R == 0:
            return
        d_fg = reproject_backward(dg_map, batch.current)
        d_fl = reproject_backward(dl_map, batch.current)
        mg, ml = acache["mstr"]
        dseq_g, g = mstr_backward(d_fg, mg)
        for k, v in g.items():
            p.accumulate("mstr_g." + k, v)
        dseq_l, g = mstr_backward(d_fl, ml)
        for k, v in g.items():
            p.accumulate("mstr_l." + k, v)
        window = cache["window"]
        if "goa" in acache:
            rs, fs, gcache, rcache = acache["goa"]
            dout = dseq_g.transpose(0, 2, 1)[rs, fs]
            dW, dR = goa_backward(dout, gcache, p["goa.W_a"], len(window), cfg.C_g, self.grid.shape)
            p.accumulate("goa.W_a", dW)
            if rcache is not None:
                for f, rc in enumerate(rcache):
                    dWr, dbr = encode_radar_backward(dR[f], rc)
                    p.accumulate("radar.W", dWr)
                    p.accumulate("radar.b", dbr)
        if "lga" in acache:
            rs, fs, lcache = acache["lga"]
            dout = dseq_l.transpose(0, 2, 1)[rs, fs]
            g = lga_backward(dout, lcache, p.sub("lga"), cfg)
            for k, v in g.items():
                p.accumulate("lga." + k, v)

    # ------------------------------------------------------------------
    def targets(self, gt: list[Box3D]):
        gt_arr = np.array([b.as_array() for b in gt]).reshape(-1, 7)
        gt_cls = np.array([b.cls for b in gt], dtype=np.int64)
        return assign_targets(self.anchors, self.anchor_cls, gt_arr, gt_cls, self.cfg.anchors)

    def loss(self, window, snap, gt: list[Box3D], training: bool = True, backward: bool = True):
        cls, box, dr, cache = self.forward(window, snap, training)
        out = detection_loss(cls, box, dr, self.targets(gt), self.cfg.loss)
        if backward:
            self.backward(out.dcls, out.dbox, out.ddir, cache)
        return out

    def detect(self, window: list[FrameRecord], snap: TrackSnapshot) -> list[Box3D]:
        cls, box, dr, _ = self.forward(window, snap, training=False)
        return decode_detections(cls, box, dr, self.anchors, self.cfg.score_thr, nms_thr=self.cfg.nms_thr,
                                 max_out=self.cfg.max_detections)


# --------------------------------------------------------------------------
# runners


def track_sequence(frames, tracker_cfg: TrackerConfig, grid: BevGridSpec) -> list[TrackSnapshot]:
    """Run the tracker over frame records and return one snapshot per frame."""
    trk = Tracker(tracker_cfg, grid)
    snaps = []
    for rec in frames:
        trk.step(rec.frame_id, rec.dets, rec.timestamp)
        snaps.append(trk.snapshot(rec.frame_id))
    return snaps


def run_streaming(model: SecondStage, frames, tracker_cfg: TrackerConfig, window: int) -> dict:
    """Online inference: memory bank + tracker updated frame by frame."""
    bank = MemoryBank(window)
    trk = Tracker(tracker_cfg, model.grid)
    out = {}
    for rec in frames:
        bank.push(rec)
        trk.step(rec.frame_id, rec.dets, rec.timestamp)
        out[rec.frame_id] = model.detect(bank.window(), trk.snapshot(rec.frame_id, window))
    return out


def run_offline(model: SecondStage, frames: list[FrameRecord], snaps: list[TrackSnapshot], window: int) -> dict:
    """Batch inference over precomputed frames and tracker snapshots."""
    by_id = {s.frame_id: s for s in snaps}
    out = {}
    for t, rec in enumerate(frames):
        win = frames[max(0, t - window + 1): t + 1]
        out[rec.frame_id] = model.detect(win, by_id[rec.frame_id].restrict(window))
    return out
