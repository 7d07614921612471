"""Kalman-filter multi-object tracker with reference matches and candidate sets.

Each frame the tracker predicts every track, scores (track, detection) pairs
with 3D GIoU, runs a Hungarian assignment for the single-hypothesis reference
match and collects the highest-scoring high-GIoU detections as candidate
proposals.  Tracks are never deleted while they may still be referenced by
the memory-bank window; they are retired only after a long run of misses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BevGridSpec, BevIndex, Box3D, box_to_bev_index, giou3d, wrap_angle

STATE_DIM = 10
MEAS_DIM = 7
SENTINEL = 1e6


@dataclass
class KalmanConfig:
    q_pose: float = 0.01
    q_vel: float = 0.1
    r_meas: float = 0.04
    p0_vel: float = 10.0

    @property
    def Q(self) -> np.ndarray:
        return np.diag([self.q_pose] * MEAS_DIM + [self.q_vel] * 3)

    @property
    def R(self) -> np.ndarray:
        return np.eye(MEAS_DIM) * self.r_meas


@dataclass
class KalmanState:
    """Mean ``z = [x, y, z, theta, l, w, d, vx, vy, vz]`` and covariance ``P``."""

    z: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64).reshape(STATE_DIM)
        self.P = np.asarray(self.P, dtype=np.float64).reshape(STATE_DIM, STATE_DIM)

    def box(self, cls: int = 0, score: float = 1.0) -> Box3D:
        x, y, zc, th, l, w, d = self.z[:7]
        return Box3D(x, y, zc, l, w, d, th, cls=cls, score=score)

    @classmethod
    def from_box(cls, box: Box3D, kcfg: KalmanConfig | None = None) -> "KalmanState":
        kcfg = kcfg or KalmanConfig()
        z = np.zeros(STATE_DIM)
        z[:7] = measurement(box)
        P = np.diag([kcfg.r_meas] * MEAS_DIM + [kcfg.p0_vel] * 3)
        return cls(z, P)


def measurement(box: Box3D) -> np.ndarray:
    return np.array([box.x, box.y, box.z, box.theta, box.l, box.w, box.d])


def _transition(dt: float) -> np.ndarray:
    F = np.eye(STATE_DIM)
    F[0, 7] = F[1, 8] = F[2, 9] = dt
    return F


_H = np.zeros((MEAS_DIM, STATE_DIM))
_H[np.arange(MEAS_DIM), np.arange(MEAS_DIM)] = 1.0


def kf_predict(state: KalmanState, dt: float, Q: np.ndarray | None = None) -> KalmanState:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not (np.all(np.isfinite(state.z)) and np.all(np.isfinite(state.P))):
        raise ValueError("non-finite Kalman state")
    Q = KalmanConfig().Q if Q is None else Q
    F = _transition(dt)
    z = F @ state.z
    P = F @ state.P @ F.T + Q
    return KalmanState(z, 0.5 * (P + P.T))


def kf_update(state: KalmanState, det: Box3D, R: np.ndarray | None = None) -> KalmanState:
    R = KalmanConfig().R if R is None else R
    resid = measurement(det) - _H @ state.z
    resid[3] = wrap_angle(resid[3])
    S = _H @ state.P @ _H.T + R
    try:
        # Cholesky both checks and inverts the SPD innovation covariance
        c = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular innovation covariance") from exc
    PHt = state.P @ _H.T
    K = np.linalg.solve(c.T, np.linalg.solve(c, PHt.T)).T
    z = state.z + K @ resid
    z[3] = wrap_angle(z[3])
    # Joseph form keeps P symmetric PSD
    IKH = np.eye(STATE_DIM) - K @ _H
    P = IKH @ state.P @ IKH.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    z[4:7] = np.maximum(z[4:7], 1e-3)
    return KalmanState(z, P)


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment (Kuhn-Munkres with row potentials).

    Returns ``min(rows, cols)`` pairs sorted by row.  Rows are inserted in
    order and columns scanned in order with strict comparisons, so ties always
    resolve the same way.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if cost.ndim != 2:
        raise ValueError("cost must be 2D")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite; use a large sentinel for forbidden pairs")
    transposed = cost.shape[0] > cost.shape[1]
    a = cost.T if transposed else cost
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


@dataclass
class AssociationConfig:
    giou_thr_low: float = -0.5
    giou_thr_high: float = 0.3
    score_thr: float = 0.1
    max_candidates: int = 5

    def __post_init__(self):
        if not self.giou_thr_low < self.giou_thr_high:
            raise ValueError("giou_thr_low must be below giou_thr_high")
        for v in (self.giou_thr_low, self.giou_thr_high):
            if not -1.0 < v <= 1.0:
                raise ValueError(f"GIoU threshold {v} outside (-1, 1]")


def associate_from_giou(giou, scores, cfg: AssociationConfig):
    """Gate, match and collect candidates from a precomputed (tracks x dets) GIoU matrix.

    Returns ``(ref_matches, cand_sets, unmatched_dets)`` where ``ref_matches``
    is a list of ``(track_row, det)`` pairs and ``cand_sets[row]`` lists
    detection indexes sorted by descending score.
    """
    giou = np.asarray(giou, dtype=np.float64).reshape(len(giou), -1) if len(giou) else np.zeros((0, len(scores)))
    scores = np.asarray(scores, dtype=np.float64)
    n_t, n_d = giou.shape
    ref = []
    if n_t and n_d:
        cost = np.where(giou >= cfg.giou_thr_low, -giou, SENTINEL)
        ref = [(r, c) for r, c in hungarian(cost) if giou[r, c] >= cfg.giou_thr_low]
    ref_of = dict(ref)
    order = sorted(range(n_d), key=lambda k: (-scores[k], k))
    cands = []
    for r in range(n_t):
        picked = [k for k in order if giou[r, k] > cfg.giou_thr_high][: cfg.max_candidates]
        if r in ref_of and ref_of[r] not in picked:
            picked = picked[: cfg.max_candidates - 1] + [ref_of[r]]
            picked.sort(key=lambda k: (-scores[k], k))
        cands.append(picked)
    matched = {c for _, c in ref}
    unmatched = [k for k in range(n_d) if k not in matched]
    return ref, cands, unmatched


@dataclass
class RefEntry:
    frame_id: int
    det_index: int
    index: BevIndex


@dataclass
class CandEntry:
    det_index: int
    index: BevIndex
    score: float


@dataclass
class Track:
    id: int
    state: KalmanState
    cls: int
    score: float = 1.0
    age: int = 0
    hits: int = 0
    misses: int = 0
    ref_entries: dict[int, RefEntry] = field(default_factory=dict)
    cand_entries: dict[int, list[CandEntry]] = field(default_factory=dict)
    boxes: dict[int, Box3D] = field(default_factory=dict)

    def box(self) -> Box3D:
        return self.state.box(cls=self.cls, score=self.score)


def associate(tracks: list[Track], dets: list[Box3D], cfg: AssociationConfig):
    giou = np.array([[giou3d(t.box(), d) for d in dets] for t in tracks]).reshape(len(tracks), len(dets))
    return associate_from_giou(giou, [d.score for d in dets], cfg)


@dataclass
class TrackerConfig:
    assoc: AssociationConfig = field(default_factory=AssociationConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    dt: float = 0.1
    window: int = 5

    @property
    def max_misses(self) -> int:
        return 2 * self.window


class Tracker:
    """Online tracker; call :meth:`step` once per frame in increasing frame order."""

    def __init__(self, cfg: TrackerConfig | None = None, grid: BevGridSpec | None = None):
        self.cfg = cfg or TrackerConfig()
        self.grid = grid
        self.tracks: list[Track] = []
        self.retired: list[Track] = []
        self.next_id = 0
        self.last_frame: int | None = None
        self.last_time: float | None = None

    def _index(self, box: Box3D) -> BevIndex | None:
        return box_to_bev_index(box, self.grid) if self.grid is not None else None

    def step(self, frame_id: int, dets: list[Box3D], timestamp: float | None = None):
        """Advance one frame.  Returns the reference matches as ``{track_id: det_index}``."""
        if self.last_frame is not None and frame_id <= self.last_frame:
            raise ValueError(f"frame {frame_id} does not follow frame {self.last_frame}")
        cfg = self.cfg
        keep = [k for k, d in enumerate(dets) if d.score >= cfg.assoc.score_thr]
        kept = [dets[k] for k in keep]

        if timestamp is None:
            timestamp = frame_id * cfg.dt
        if self.last_time is not None:
            dt = timestamp - self.last_time
            Q = cfg.kalman.Q
            for t in self.tracks:
                t.state = kf_predict(t.state, dt, Q)
                t.age += 1

        ref, cands, unmatched = associate(self.tracks, kept, cfg.assoc)
        idx = [self._index(d) for d in kept]
        out = {}
        for row, (trk, cset) in enumerate(zip(self.tracks, cands)):
            if cset:
                trk.cand_entries[frame_id] = [CandEntry(keep[k], idx[k], kept[k].score) for k in cset]
        R = cfg.kalman.R
        matched_rows = set()
        for row, k in ref:
            trk = self.tracks[row]
            trk.state = kf_update(trk.state, kept[k], R)
            trk.cls, trk.score = kept[k].cls, kept[k].score
            trk.hits += 1
            trk.misses = 0
            trk.ref_entries[frame_id] = RefEntry(frame_id, keep[k], idx[k])
            out[trk.id] = keep[k]
            matched_rows.add(row)
        for row, trk in enumerate(self.tracks):
            if row not in matched_rows:
                trk.misses += 1

        for k in unmatched:
            det = kept[k]
            trk = Track(self.next_id, KalmanState.from_box(det, cfg.kalman), det.cls, det.score, hits=1)
            trk.ref_entries[frame_id] = RefEntry(frame_id, keep[k], idx[k])
            trk.cand_entries[frame_id] = [CandEntry(keep[k], idx[k], det.score)]
            self.next_id += 1
            self.tracks.append(trk)
            out[trk.id] = keep[k]

        alive = []
        for trk in self.tracks:
            trk.boxes[frame_id] = trk.box()
            if trk.misses > cfg.max_misses:
                self.retired.append(trk)
            else:
                alive.append(trk)
        self.tracks = alive
        self._prune(frame_id)
        self.last_frame = frame_id
        self.last_time = timestamp
        return out

    def _prune(self, frame_id: int):
        # entries older than the window are never read again
        horizon = frame_id - self.cfg.window
        for trk in self.tracks:
            for d in (trk.ref_entries, trk.cand_entries, trk.boxes):
                for f in [f for f in d if f <= horizon]:
                    del d[f]

    def snapshot(self, frame_id: int, window: int | None = None) -> "TrackSnapshot":
        """Per-frame view of live tracks used by the second stage."""
        n = window or self.cfg.window
        lo = frame_id - n + 1
        rows = []
        for trk in self.tracks:
            refs = {f: e.det_index for f, e in trk.ref_entries.items() if lo <= f <= frame_id}
            cands = {f: [c.det_index for c in cs] for f, cs in trk.cand_entries.items() if lo <= f <= frame_id}
            rows.append(TrackRow(trk.id, trk.boxes[frame_id], refs, cands))
        return TrackSnapshot(frame_id, rows)


@dataclass
class TrackRow:
    track_id: int
    box: Box3D
    refs: dict[int, int]
    cands: dict[int, list[int]]


@dataclass
class TrackSnapshot:
    """Everything the second stage needs from the tracker at one frame."""

    frame_id: int
    rows: list[TrackRow]

    def restrict(self, window: int) -> "TrackSnapshot":
        lo = self.frame_id - window + 1
        rows = [TrackRow(r.track_id, r.box,
                         {f: k for f, k in r.refs.items() if f >= lo},
                         {f: c for f, c in r.cands.items() if f >= lo}) for r in self.rows]
        return TrackSnapshot(self.frame_id, rows)


def write_trajectories(path, snapshots: list[TrackSnapshot]):
    """Tab-separated trajectory dump.

    One line per (frame, live track): ``frame track x y z l w d theta cls score
    matched_det candidates`` where ``matched_det`` is -1 when the track had no
    reference match in that frame and ``candidates`` is a comma-separated list
    (``-`` when empty).
    """
    with open(path, "w") as fh:
        for snap in snapshots:
            for r in snap.rows:
                b = r.box
                m = r.refs.get(snap.frame_id, -1)
                c = r.cands.get(snap.frame_id, [])
                fields = [str(snap.frame_id), str(r.track_id)]
                fields += [repr(float(v)) for v in (b.x, b.y, b.z, b.l, b.w, b.d, b.theta)]
                fields += [str(b.cls), repr(float(b.score)), str(m), ",".join(map(str, c)) or "-"]
                fh.write("\t".join(fields) + "\n")


def read_trajectories(path, window: int) -> list[TrackSnapshot]:
    """Rebuild per-frame snapshots (with ``window`` frames of history) from a dump."""
    per_frame: dict[int, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 13:
                raise ValueError(f"{path}:{lineno}: expected 13 fields, got {len(parts)}")
            f, tid = int(parts[0]), int(parts[1])
            vals = [float(v) for v in parts[2:9]]
            box = Box3D(*vals, cls=int(parts[9]), score=float(parts[10]))
            cands = [] if parts[12] == "-" else [int(v) for v in parts[12].split(",")]
            per_frame.setdefault(f, []).append((tid, box, int(parts[11]), cands))
    history: dict[int, dict] = {}
    snaps = []
    for f in sorted(per_frame):
        rows = []
        for tid, box, m, cands in per_frame[f]:
            h = history.setdefault(tid, {"refs": {}, "cands": {}})
            if m >= 0:
                h["refs"][f] = m
            if cands:
                h["cands"][f] = cands
            lo = f - window + 1
            rows.append(TrackRow(tid, box,
                                 {k: v for k, v in h["refs"].items() if k >= lo},
                                 {k: v for k, v in h["cands"].items() if k >= lo}))
        snaps.append(TrackSnapshot(f, rows))
    return snaps


def id_switches(assignments: list[dict[int, int]]) -> int:
    """Count identity switches from per-frame ``{gt_id: track_id}`` maps."""
    last: dict[int, int] = {}
    switches = 0
    for frame in assignments:
        for gid, tid in frame.items():
            if gid in last and last[gid] != tid:
                switches += 1
            last[gid] = tid
    return switches
