"""Multi-frame trajectory-driven feature fusion for radar-camera BEV detection."""
from .geometry import BevGridSpec, BevIndex, Box3D, giou3d, iou3d, iou_bev
from .memory_bank import FrameRecord, MemoryBank
from .model import ModelConfig, SecondStage, run_offline, run_streaming, track_sequence
from .numerics import AdamW, ParamBundle
from .tracker import Tracker, TrackerConfig, hungarian

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BevGridSpec", "BevIndex", "Box3D", "FrameRecord", "MemoryBank", "ModelConfig", "ParamBundle",
    "SecondStage", "Tracker", "TrackerConfig", "giou3d", "hungarian", "iou3d", "iou_bev", "run_offline",
    "run_streaming", "track_sequence",
]
