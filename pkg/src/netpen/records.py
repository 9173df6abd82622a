"""Small value types shared between the simulator, the autonomy stack and the link."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

DEFECT_CLASSES = ("biofouling", "net_hole", "plastic", "vegetation")
CLASS_CODES = {name: i for i, name in enumerate(DEFECT_CLASSES)}


class Phase(enum.IntEnum):
    ACQUIRE = 0
    TRACK = 1
    LOST = 2
    DONE = 3
    ABORT = 4


@dataclass(frozen=True)
class ControlCommand:
    """Normalized thruster-fraction command, one component per DOF.

    Positive surge approaches the net, positive sway moves right,
    positive heave descends and positive yaw_rate turns right.
    """

    surge: float = 0.0
    sway: float = 0.0
    heave: float = 0.0
    yaw_rate: float = 0.0

    def as_tuple(self):
        return (self.surge, self.sway, self.heave, self.yaw_rate)

    def clipped(self) -> "ControlCommand":
        return ControlCommand(*(min(1.0, max(-1.0, c)) for c in self.as_tuple()))


@dataclass(frozen=True)
class Telemetry:
    frame_id: int
    depth: float
    heading: float
    est_distance: float | None = None
    phase: Phase = Phase.ACQUIRE


@dataclass(frozen=True)
class Detection:
    cls: str
    bbox: tuple
    confidence: float

    def __post_init__(self):
        if self.cls not in CLASS_CODES:
            raise ValueError(f"unknown defect class {self.cls!r}")
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not (0.0 <= self.confidence <= 1.0) or math.isnan(self.confidence):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self):
        return {"cls": self.cls, "bbox": list(self.bbox), "confidence": self.confidence}

    @classmethod
    def from_dict(cls, d):
        return cls(d["cls"], tuple(d["bbox"]), d["confidence"])
