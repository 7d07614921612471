"""Corpora, the training loop, and window-length evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harness import (
    DEFAULT_IOU_THR,
    EvalRegion,
    SceneConfig,
    evaluate_ap,
    generate_frame,
    load_frame,
    random_scenario,
    read_detections,
    save_frame,
    write_detections,
)
from .memory_bank import FrameRecord
from .model import SecondStage, run_offline, track_sequence
from .numerics import AdamW
from .tracker import TrackerConfig, TrackSnapshot, read_trajectories, write_trajectories

log = logging.getLogger(__name__)


@dataclass
class Scenario:
    name: str
    frames: list[FrameRecord]
    snaps: list[TrackSnapshot]
    gt: list  # per frame, list[Box3D]


class GeneratedCorpus:
    """Scenarios drawn on demand from seeds; nothing is kept in memory."""

    def __init__(self, scene: SceneConfig, seeds, tracker: TrackerConfig | None = None):
        self.scene = scene
        self.seeds = [int(s) for s in seeds]
        self.tracker = tracker or TrackerConfig()

    def __len__(self):
        return len(self.seeds)

    def get(self, i: int) -> Scenario:
        spec = random_scenario(self.scene, self.seeds[i])
        frames, gt = [], []
        for t in range(spec.frames):
            rec, truth = generate_frame(spec, t)
            frames.append(rec)
            gt.append(truth.gt)
        snaps = track_sequence(frames, self.tracker, self.scene.grid)
        return Scenario(f"s{self.seeds[i]:06d}", frames, snaps, gt)

    def __iter__(self):
        for i in range(len(self)):
            yield self.get(i)


# on-disk layout: <root>/<scenario>/frame_XXXX.m3fr, tracks.tsv, gt.txt
def write_scenario(root, sc: Scenario, window: int):
    d = Path(root) / sc.name
    d.mkdir(parents=True, exist_ok=True)
    for rec in sc.frames:
        save_frame(d / f"frame_{rec.frame_id:04d}.m3fr", rec)
    if sc.snaps:
        write_trajectories(d / "tracks.tsv", sc.snaps)
    write_detections(d / "gt.txt", {rec.frame_id: g for rec, g in zip(sc.frames, sc.gt)})
    return d


class DumpCorpus:
    """Scenarios read back from frame dumps and trajectory files."""

    def __init__(self, root, window: int = 5, need_tracks: bool = True):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dump directory not found: {self.root}")
        self.dirs = sorted(p for p in self.root.iterdir() if p.is_dir() and any(p.glob("frame_*.m3fr")))
        if not self.dirs:
            raise FileNotFoundError(f"no frame dumps under {self.root}")
        self.window = window
        self.need_tracks = need_tracks

    def __len__(self):
        return len(self.dirs)

    def get(self, i: int) -> Scenario:
        d = self.dirs[i]
        frames = [load_frame(p) for p in sorted(d.glob("frame_*.m3fr"))]
        snaps = []
        if self.need_tracks:
            tp = d / "tracks.tsv"
            if not tp.exists():
                raise FileNotFoundError(f"missing trajectory file {tp}; run the track step first")
            snaps = read_trajectories(tp, self.window)
        gp = d / "gt.txt"
        gts = read_detections(gp) if gp.exists() else {}
        return Scenario(d.name, frames, snaps, [gts.get(r.frame_id, []) for r in frames])

    def __iter__(self):
        for i in range(len(self)):
            yield self.get(i)


def train(model: SecondStage, corpus, epochs: int = 18, lr: float = 2e-4, window: int = 5,
          vary_window: bool = True, seed: int = 0, weight_decay: float = 0.01, callback=None) -> list[float]:
    """Per-frame AdamW training; returns the mean loss of each epoch.

    With ``vary_window`` each sample uses a window length drawn from 1..window,
    so one model serves every inference length.
    """
    rng = np.random.default_rng(seed)
    opt = AdamW(model.params, lr=lr, weight_decay=weight_decay)
    history = []
    for ep in range(epochs):
        total, count = 0.0, 0
        for i in rng.permutation(len(corpus)):
            sc = corpus.get(int(i))
            for t in rng.permutation(len(sc.frames)):
                n = int(rng.integers(1, window + 1)) if vary_window else window
                win = sc.frames[max(0, t - n + 1): t + 1]
                model.params.zero_grad()
                out = model.loss(win, sc.snaps[t].restrict(n), sc.gt[t], training=True)
                opt.step()
                total += out.total
                count += 1
        history.append(total / max(count, 1))
        log.info("epoch %d/%d loss %.4f", ep + 1, epochs, history[-1])
        if callback is not None:
            callback(ep, history[-1])
    return history


def infer_corpus(model: SecondStage, corpus, window: int) -> dict:
    """Offline inference; returns ``{scenario: {frame: [Box3D]}}``."""
    return {sc.name: run_offline(model, sc.frames, sc.snaps, window) for sc in corpus}


def evaluate_corpus(dets: dict, corpus, region: EvalRegion, iou_thr=DEFAULT_IOU_THR, num_classes: int = 3):
    """Pool every (scenario, frame) pair into one AP computation."""
    D, G = {}, {}
    for sc in corpus:
        for rec, g in zip(sc.frames, sc.gt):
            key = (sc.name, rec.frame_id)
            D[key] = dets[sc.name].get(rec.frame_id, [])
            G[key] = g
    return evaluate_ap(D, G, iou_thr, region, num_classes)


def ablate_frames(model: SecondStage, corpus, windows=(1, 2, 3, 4, 5), region: EvalRegion | None = None,
                  iou_thr=DEFAULT_IOU_THR) -> list:
    """``[(n, result)]`` for each window length, with ``result`` from :func:`evaluate_ap`."""
    region = region or EvalRegion.for_grid(model.grid)
    rows = []
    for n in windows:
        res = evaluate_corpus(infer_corpus(model, corpus, n), corpus, region, iou_thr)
        log.info("n=%d mAP=%.4f", n, res["mAP"])
        rows.append((n, res))
    return rows
