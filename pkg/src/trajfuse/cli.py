"""Command-line pipeline: gen -> track -> train -> infer -> eval, plus the window ablation."""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

from .aggregation import AggregationConfig
from .fusion_head import LossWeights
from .harness import EvalRegion, SceneConfig, evaluate_ap, read_detections, write_detections
from .model import ModelConfig, SecondStage, run_streaming, track_sequence
from .numerics import load_checkpoint, save_checkpoint
from .tracker import AssociationConfig, KalmanConfig, TrackerConfig, write_trajectories
from .training import DumpCorpus, GeneratedCorpus, ablate_frames, train, write_scenario

log = logging.getLogger("trajfuse")


@dataclasses.dataclass
class CorpusSettings:
    train_scenarios: int = 200
    eval_scenarios: int = 50
    eval_seed_offset: int = 100000


@dataclasses.dataclass
class TrainSettings:
    epochs: int = 18
    lr: float = 2e-4
    weight_decay: float = 0.01
    window: int = 5
    vary_window: bool = True


@dataclasses.dataclass
class TrackerSettings:
    giou_thr_low: float = -0.5
    giou_thr_high: float = 0.3
    score_thr: float = 0.1
    max_candidates: int = 5
    q_pose: float = 0.01
    q_vel: float = 0.1
    r_meas: float = 0.04
    p0_vel: float = 10.0


@dataclasses.dataclass
class ModelSettings:
    lga_heads: int = 4
    lga_points: int = 4
    mstr_heads: int = 4
    use_pe: bool = True
    use_radar: bool = True
    use_time_encoding: bool = True
    use_goa: bool = True
    use_lga: bool = True
    bn_momentum: float = 0.9
    score_thr: float = 0.1
    nms_thr: float = 0.1
    max_detections: int = 100
    beta1: float = 2.0
    beta2: float = 1.0
    beta3: float = 0.2
    init_seed: int = 0


@dataclasses.dataclass
class EvalSettings:
    region: str = "EAA"
    iou_car: float = 0.5
    iou_pedestrian: float = 0.25
    iou_cyclist: float = 0.25
    half_width: float = 4.0
    depth: float = 25.0

    def __post_init__(self):
        if self.region not in ("EAA", "RoI"):
            raise ValueError(f"region must be EAA or RoI, got {self.region!r}")


SECTIONS = {
    "scene": SceneConfig,
    "corpus": CorpusSettings,
    "tracker": TrackerSettings,
    "model": ModelSettings,
    "train": TrainSettings,
    "eval": EvalSettings,
}


class ConfigError(ValueError):
    pass


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in raw.split(","))
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated values")
            return vals
        return raw.strip()
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None


@dataclasses.dataclass
class PipelineConfig:
    scene: SceneConfig = dataclasses.field(default_factory=SceneConfig)
    corpus: CorpusSettings = dataclasses.field(default_factory=CorpusSettings)
    tracker: TrackerSettings = dataclasses.field(default_factory=TrackerSettings)
    model: ModelSettings = dataclasses.field(default_factory=ModelSettings)
    train: TrainSettings = dataclasses.field(default_factory=TrainSettings)
    eval: EvalSettings = dataclasses.field(default_factory=EvalSettings)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        parts = {}
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{sec}]; valid sections: {', '.join(SECTIONS)}")
        for sec, klass in SECTIONS.items():
            defaults = klass()
            valid = [f.name for f in dataclasses.fields(klass)]
            kw = {}
            if cp.has_section(sec):
                for key, raw in cp.items(sec):
                    if key not in valid:
                        raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]; valid keys: {', '.join(valid)}")
                    kw[key] = _convert(raw, getattr(defaults, key), f"{source} [{sec}] {key}")
            try:
                parts[sec] = klass(**kw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source} [{sec}]: {exc}") from None
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), str(p))

    def tracker_config(self) -> TrackerConfig:
        t = self.tracker
        return TrackerConfig(
            AssociationConfig(t.giou_thr_low, t.giou_thr_high, t.score_thr, t.max_candidates),
            KalmanConfig(t.q_pose, t.q_vel, t.r_meas, t.p0_vel),
            dt=self.scene.dt, window=self.train.window)

    def model_config(self) -> ModelConfig:
        m = self.model
        agg = AggregationConfig(self.scene.C_g, self.scene.C_l, m.lga_heads, m.lga_points, 2, m.mstr_heads,
                                m.use_pe, m.use_radar, m.use_time_encoding)
        return ModelConfig(agg=agg, loss=LossWeights(m.beta1, m.beta2, m.beta3), use_goa=m.use_goa,
                           use_lga=m.use_lga, bn_momentum=m.bn_momentum, score_thr=m.score_thr,
                           nms_thr=m.nms_thr, max_detections=m.max_detections)

    def region(self) -> EvalRegion:
        e = self.eval
        return EvalRegion.for_grid(self.scene.grid, e.region, half_width=e.half_width, depth=e.depth)

    def iou_thr(self) -> tuple:
        return (self.eval.iou_car, self.eval.iou_pedestrian, self.eval.iou_cyclist)

    def seeds(self, split: str, base: int) -> range:
        c = self.corpus
        if split == "train":
            return range(base, base + c.train_scenarios)
        return range(base + c.eval_seed_offset, base + c.eval_seed_offset + c.eval_scenarios)


# --------------------------------------------------------------------------
# output helpers


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def format_table(header, rows) -> str:
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.2f}"
    return str(v)


def _ap_row(n, res, classes):
    return [n] + [100 * res["ap"][c] for c in range(len(classes))] + [100 * res["mAP"]]


# --------------------------------------------------------------------------
# subcommands


def _split_dir(out: Path, split: str) -> Path:
    return out / split


def cmd_gen(args, cfg: PipelineConfig):
    out = Path(args.out)
    total = 0
    for split in args.splits:
        corpus = GeneratedCorpus(cfg.scene, cfg.seeds(split, args.seed), cfg.tracker_config())
        for sc in corpus:
            sc.snaps = []  # trajectories come from the track step
            write_scenario(_split_dir(out, split), sc, cfg.train.window)
            total += 1
    print(f"wrote {total} scenarios to {out}")


def cmd_track(args, cfg: PipelineConfig):
    out = Path(args.out)
    count = 0
    for split in args.splits:
        corpus = DumpCorpus(_split_dir(out, split), args.frames, need_tracks=False)
        for d, sc in zip(corpus.dirs, corpus):
            snaps = track_sequence(sc.frames, cfg.tracker_config(), cfg.scene.grid)
            write_trajectories(d / "tracks.tsv", snaps)
            count += 1
    print(f"tracked {count} scenarios")


def _train_corpus(args, cfg):
    if args.from_config:
        return GeneratedCorpus(cfg.scene, cfg.seeds("train", args.seed), cfg.tracker_config())
    return DumpCorpus(_split_dir(Path(args.out), "train"), cfg.train.window)


def _eval_corpus(args, cfg, window):
    if args.from_config:
        return GeneratedCorpus(cfg.scene, cfg.seeds("eval", args.seed), cfg.tracker_config())
    return DumpCorpus(_split_dir(Path(args.out), "eval"), window)


def _load_model(args, cfg) -> SecondStage:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ck = Path(args.checkpoint)
    if not ck.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    model = SecondStage(cfg.scene.grid, cfg.model_config(), seed=cfg.model.init_seed)
    params = load_checkpoint(ck)
    if sorted(params.values) != sorted(model.params.values):
        raise ConfigError(f"checkpoint {ck} does not match the configured model")
    for k, v in params.values.items():
        if v.shape != model.params.values[k].shape:
            raise ConfigError(f"checkpoint {ck}: {k} has shape {v.shape}, model expects "
                              f"{model.params.values[k].shape}")
    model.params = params
    return model


def cmd_train(args, cfg: PipelineConfig):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    corpus = _train_corpus(args, cfg)
    model = SecondStage(cfg.scene.grid, cfg.model_config(), seed=cfg.model.init_seed)
    t = cfg.train
    hist = train(model, corpus, epochs=t.epochs, lr=t.lr, window=t.window, vary_window=t.vary_window,
                 seed=args.seed, weight_decay=t.weight_decay)
    Path(args.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.checkpoint, model.params)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_csv(Path(args.out) / "train_loss.csv", ["epoch", "loss"], [[i + 1, h] for i, h in enumerate(hist)])
    print(format_table(["epoch", "loss"], [[i + 1, h] for i, h in enumerate(hist)]))


def cmd_infer(args, cfg: PipelineConfig):
    model = _load_model(args, cfg)
    n = args.frames
    corpus = _eval_corpus(args, cfg, n)
    out = Path(args.out)
    det_dir = out / "detections" / f"n{n}"
    det_dir.mkdir(parents=True, exist_ok=True)
    for sc in corpus:
        dets = run_streaming(model, sc.frames, cfg.tracker_config(), n)
        write_detections(det_dir / f"{sc.name}.txt", dets)
        if args.from_config:
            write_detections(det_dir / f"{sc.name}.gt.txt", {r.frame_id: g for r, g in zip(sc.frames, sc.gt)})
    print(f"wrote detections for {len(corpus)} scenarios to {det_dir}")


def _evaluate_dir(det_dir: Path, cfg: PipelineConfig, gt_root: Path | None):
    files = sorted(p for p in det_dir.glob("*.txt") if not p.name.endswith(".gt.txt"))
    if not files:
        raise FileNotFoundError(f"no detection files in {det_dir}")
    D, G = {}, {}
    for p in files:
        name = p.stem
        gp = det_dir / f"{name}.gt.txt"
        if not gp.exists() and gt_root is not None:
            gp = gt_root / name / "gt.txt"
        if not gp.exists():
            raise FileNotFoundError(f"ground truth for {name} not found")
        dets, gts = read_detections(p), read_detections(gp)
        for f in set(dets) | set(gts):
            D[(name, f)] = dets.get(f, [])
            G[(name, f)] = gts.get(f, [])
    return evaluate_ap(D, G, cfg.iou_thr(), cfg.region(), len(cfg.model_config().anchors.classes))


def cmd_eval(args, cfg: PipelineConfig):
    out = Path(args.out)
    n = args.frames
    res = _evaluate_dir(out / "detections" / f"n{n}", cfg, out / "eval")
    classes = cfg.model_config().anchors.classes
    header = ["n"] + [f"AP_{c}" for c in classes] + ["mAP"]
    rows = [_ap_row(n, res, classes)]
    write_csv(out / f"metrics_n{n}.csv", header, rows)
    print(format_table(header, rows))


def cmd_ablate(args, cfg: PipelineConfig):
    model = _load_model(args, cfg)
    corpus = _eval_corpus(args, cfg, max(args.windows))
    rows = ablate_frames(model, corpus, args.windows, cfg.region(), cfg.iou_thr())
    classes = cfg.model_config().anchors.classes
    header = ["n"] + [f"AP_{c}" for c in classes] + ["mAP"]
    table = [_ap_row(n, res, classes) for n, res in rows]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ["n", "mAP"], [[n, 100 * res["mAP"]] for n, res in rows])
    write_csv(out / "ablation_per_class.csv", header, table)
    print(format_table(header, table))


COMMANDS = {
    "gen": cmd_gen,
    "track": cmd_track,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate-frames": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajfuse", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file (defaults built in)")
        p.add_argument("--seed", type=int, default=0, help="base scenario / shuffling seed")
        p.add_argument("--frames", type=int, default=5, help="memory-bank window length n")
        p.add_argument("--out", default="run", help="working directory for dumps and results")
        p.add_argument("--checkpoint", help="parameter checkpoint path")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("gen", "track"):
            p.add_argument("--splits", nargs="+", default=["train", "eval"], choices=["train", "eval"])
        if name in ("train", "infer", "ablate-frames"):
            p.add_argument("--from-config", action="store_true",
                           help="generate scenarios in memory from the config instead of reading dumps")
        if name == "ablate-frames":
            p.add_argument("--windows", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.frames < 1:
            raise ConfigError("--frames must be at least 1")
        COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"trajfuse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
