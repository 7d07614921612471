"""FIFO store of the most recent frames' features, detections and BEV indexes."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import BevIndex, Box3D


@dataclass(eq=False)
class FrameRecord:
    """One frame of first-stage output.

    ``F_global`` is (C_g, H, W); ``F_local`` is (C_l, 2H, 2W) over the same
    metric extent.  ``radar`` is an (N, 5) array of ``x y z vr rcs`` rows.
    Feature arrays are made read-only so the bank and its consumers can share
    them without copying.
    """

    frame_id: int
    F_global: np.ndarray
    F_local: np.ndarray
    dets: list[Box3D]
    indexes: list[BevIndex]
    radar: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    timestamp: float | None = None

    def __post_init__(self):
        if len(self.dets) != len(self.indexes):
            raise ValueError(f"{len(self.dets)} detections but {len(self.indexes)} BEV indexes")
        if self.F_global.ndim != 3 or self.F_local.ndim != 3:
            raise ValueError("feature maps must be (C, H, W)")
        _, h, w = self.F_global.shape
        if self.F_local.shape[1:] != (2 * h, 2 * w):
            raise ValueError(f"local map {self.F_local.shape[1:]} is not twice global {(h, w)}")
        self.radar = np.asarray(self.radar, dtype=np.float64).reshape(-1, 5)
        for a in (self.F_global, self.F_local, self.radar):
            a.flags.writeable = False

    @property
    def nbytes(self) -> int:
        return self.F_global.nbytes + self.F_local.nbytes + self.radar.nbytes


class MemoryBank:
    def __init__(self, capacity: int = 5):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._records: deque[FrameRecord] = deque()

    def __len__(self):
        return len(self._records)

    @property
    def newest_id(self) -> int | None:
        return self._records[-1].frame_id if self._records else None

    def push(self, rec: FrameRecord) -> "MemoryBank":
        if self._records and rec.frame_id <= self._records[-1].frame_id:
            raise ValueError(f"frame {rec.frame_id} pushed after frame {self._records[-1].frame_id}")
        self._records.append(rec)
        while len(self._records) > self.capacity:
            self._records.popleft()
        return self

    def window(self) -> list[FrameRecord]:
        """Stored records oldest to newest (the payloads are shared, not copied)."""
        if not self._records:
            raise ValueError("memory bank is empty")
        return list(self._records)

    def frame_ids(self) -> list[int]:
        return [r.frame_id for r in self._records]
