"""Plain records shared by generation, inference, evaluation and file I/O."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Box = tuple[float, float, float, float]  # (x, y, w, h)


@dataclass
class Frame:
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    index: int
    video_id: int

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


@dataclass
class TrackEntry:
    frame: int
    box: Box
    mask: np.ndarray  # bool [H, W]
    score: float = 1.0
    # ground-truth identity behind an oracle proposal; never serialized
    source_id: int | None = None


@dataclass
class InstanceTrack:
    identity: int
    category: int
    video_id: int
    entries: list[TrackEntry] = field(default_factory=list)
    score: float = 1.0

    def add(self, entry: TrackEntry) -> None:
        if self.entries and entry.frame <= self.entries[-1].frame:
            raise ValueError(
                f"track {self.identity}: frame {entry.frame} not after {self.entries[-1].frame}")
        self.entries.append(entry)

    def frames(self) -> list[int]:
        return [e.frame for e in self.entries]

    def entry_at(self, frame: int) -> TrackEntry | None:
        for e in self.entries:
            if e.frame == frame:
                return e
        return None


@dataclass
class VideoAnnotation:
    video_id: int
    height: int
    width: int
    num_frames: int
    instances: list[InstanceTrack] = field(default_factory=list)

    def objects_in_frame(self, frame: int) -> list[tuple[InstanceTrack, TrackEntry]]:
        out = []
        for inst in self.instances:
            e = inst.entry_at(frame)
            if e is not None:
                out.append((inst, e))
        return out


def tight_box(mask: np.ndarray) -> Box | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    x0, y0 = int(xs.min()), int(ys.min())
    return (float(x0), float(y0), float(xs.max() - x0 + 1), float(ys.max() - y0 + 1))


def box_iou(a: Box, b: Box) -> float:
    ax1, ay1 = a[0] + a[2], a[1] + a[3]
    bx1, by1 = b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax1, bx1) - max(a[0], b[0]))
    ih = max(0.0, min(ay1, by1) - max(a[1], b[1]))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def box_center(box: Box) -> tuple[float, float]:
    return box[0] + box[2] / 2.0, box[1] + box[3] / 2.0
