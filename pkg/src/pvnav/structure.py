"""Per-frame detection containers shared by the detectors, anchors and association."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class OrientedBBox:
    """Oriented box ``[x_c, y_c, w, h, alpha]`` plus detector confidence.

    Canonical form has ``w >= h`` and ``alpha`` in ``[0, pi)``.
    """

    x_c: float
    y_c: float
    w: float
    h: float
    alpha: float
    confidence: float = 1.0

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError("box dimensions must be non-negative")
        w, h, a = float(self.w), float(self.h), float(self.alpha)
        if w < h:
            w, h, a = h, w, a + np.pi / 2
        a = float(np.mod(a, np.pi))
        if a >= np.pi:
            a = 0.0
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "alpha", a)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x_c, self.y_c])

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        c, s = np.cos(self.alpha), np.sin(self.alpha)
        u = np.array([c, s]) * self.w / 2
        v = np.array([-s, c]) * self.h / 2
        ctr = self.center
        return np.array([ctr - u - v, ctr + u - v, ctr + u + v, ctr - u + v])


def order_quad(quad) -> np.ndarray:
    """Reorder four image corners as TL, TR, BR, BL (image y pointing down)."""
    q = np.asarray(quad, dtype=float).reshape(4, 2)
    c = q.mean(axis=0)
    ang = np.arctan2(q[:, 1] - c[1], q[:, 0] - c[0])
    # sweeping angles up from -pi visits TL (about -135 deg), TR, BR, BL
    order = np.argsort(ang, kind="stable")
    return q[order]


@dataclass
class Detection:
    """One module detection with logical coordinates.

    ``corners`` (4x2, TL, TR, BR, BL) come from the edge detector; box
    detections carry ``bbox`` and use the box center as their reference point.
    """

    center: np.ndarray
    corners: np.ndarray | None = None
    bbox: OrientedBBox | None = None
    row: int = -1
    seq: int = -1
    track_id: int | None = None
    source: str = "edge"

    def feature_points(self) -> np.ndarray:
        if self.corners is not None:
            return np.vstack([self.corners, self.center])
        if self.bbox is not None:
            return np.vstack([self.bbox.corners(), self.center])
        return np.atleast_2d(self.center)


@dataclass
class SemanticStructure:
    """Detections organised into rows and sequence positions.

    ``direction`` is +1 when sequence positions grow towards image +x along
    the rows, -1 otherwise. ``gaps`` holds confirmed bench gaps as
    ``(seq_before, seq_after)`` pairs; association removes the sequence slots
    they span.
    """

    detections: list[Detection] = field(default_factory=list)
    row_lines: list[np.ndarray] = field(default_factory=list)
    rep_dims: tuple[float, float] | None = None
    direction: int = 1
    gaps: list[tuple[int, int]] = field(default_factory=list)
    image_shape: tuple[int, int] | None = None

    @property
    def n_rows(self) -> int:
        rows = {d.row for d in self.detections if d.row >= 0}
        return max(rows) + 1 if rows else 0

    def rows(self) -> dict[int, list[Detection]]:
        out: dict[int, list[Detection]] = {}
        for d in self.detections:
            if d.row >= 0:
                out.setdefault(d.row, []).append(d)
        for r in out:
            out[r].sort(key=lambda d: d.seq)
        return dict(sorted(out.items()))

    def compact_seq(self, seq: int) -> int:
        """Sequence position with the empty slots of confirmed gaps removed."""
        skipped = sum(after - before - 1 for before, after in set(self.gaps) if after <= seq)
        return seq - skipped

    def with_gaps(self, gaps) -> "SemanticStructure":
        return replace(self, gaps=sorted({(int(a), int(b)) for a, b in gaps}))


@dataclass(frozen=True)
class BenchEndObservation:
    row: int
    side: str  # "start": lowest sequence position, "end": highest
    seq: int
    image_position: tuple[float, float]
    kind: str = "bench_end"


@dataclass(frozen=True)
class GapObservation:
    row: int
    seq_before: int
    seq_after: int
    image_position: tuple[float, float]
    darkness: float
    distance: float
    kind: str = "bench_gap"
