"""Oriented-box detections to a semantic row/sequence structure.

Boxes (or segmentation contours) come from an external instance detector.
They are cleaned with border, overlap and size rules, their centers are
grouped into parallel rows with sequential RANSAC, and the detections of each
row get sequence positions with slots left for missed modules.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .structure import Detection, OrientedBBox, SemanticStructure, order_quad


class DetectionParseError(ValueError):
    """The detection file does not follow the expected schema."""


class RowFitError(ValueError):
    """No row line with at least two inliers exists."""


# -- input ------------------------------------------------------------------------

def min_bounding_rect(contour) -> OrientedBBox:
    """Minimum-area rectangle among those aligned with an edge of the convex hull."""
    pts = np.asarray(contour, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise ValueError("need at least three points")
    centred = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 2:
        raise ValueError("collinear contour")
    try:
        hull = pts[ConvexHull(pts).vertices]
    except QhullError as exc:
        raise ValueError("collinear contour") from exc
    edges = np.roll(hull, -1, axis=0) - hull
    edges = edges[np.linalg.norm(edges, axis=1) > 0]
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))
    best = None
    for a in angles:
        c, s = np.cos(a), np.sin(a)
        R = np.array([[c, s], [-s, c]])  # world -> edge frame
        q = hull @ R.T
        lo, hi = q.min(axis=0), q.max(axis=0)
        area = float(np.prod(hi - lo))
        if best is None or area < best[0] - 1e-12:
            best = (area, a, lo, hi, R)
    _, a, lo, hi, R = best
    center = R.T @ ((lo + hi) / 2)
    w, h = hi - lo
    return OrientedBBox(float(center[0]), float(center[1]), float(w), float(h), float(a))


def load_detections(path) -> dict[int, list[OrientedBBox]]:
    """Read a detection JSON file into ``{frame index: boxes}``.

    Contours are converted with :func:`min_bounding_rect` and get confidence 1.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DetectionParseError(f"cannot read detections: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise DetectionParseError("expected an object with a 'frames' list")
    out: dict[int, list[OrientedBBox]] = {}
    for k, frame in enumerate(doc["frames"]):
        try:
            index = int(frame["index"])
            boxes = []
            for row in frame.get("boxes", []):
                if len(row) not in (5, 6):
                    raise ValueError(f"box needs 5 or 6 values, got {len(row)}")
                vals = [float(v) for v in row]
                conf = vals[5] if len(vals) == 6 else 1.0
                if not 0.0 <= conf <= 1.0:
                    raise ValueError("confidence outside [0, 1]")
                boxes.append(OrientedBBox(*vals[:5], confidence=conf))
            for contour in frame.get("contours", []):
                boxes.append(min_bounding_rect(contour))
        except (KeyError, TypeError, ValueError) as exc:
            raise DetectionParseError(f"frame entry {k}: {exc}") from exc
        if index in out:
            raise DetectionParseError(f"duplicate frame index {index}")
        out[index] = boxes
    return dict(sorted(out.items()))


def save_detections(path, frames: dict) -> None:
    doc = {"frames": [{"index": int(i), "boxes": [[b.x_c, b.y_c, b.w, b.h, b.alpha, b.confidence]
                                                     for b in boxes]}
                      for i, boxes in sorted(frames.items())]}
    Path(path).write_text(json.dumps(doc, indent=1))


# -- filtering --------------------------------------------------------------------

def box_iou(a: OrientedBBox, b: OrientedBBox) -> float:
    """Intersection over union of two oriented boxes."""
    union_guess = a.area + b.area
    if union_guess <= 0:
        return 0.0
    if np.hypot(a.x_c - b.x_c, a.y_c - b.y_c) > (np.hypot(a.w, a.h) + np.hypot(b.w, b.h)) / 2:
        return 0.0
    inter, _ = cv2.intersectConvexConvex(a.corners().astype(np.float32), b.corners().astype(np.float32))
    inter = max(float(inter), 0.0)
    union = union_guess - inter
    return inter / union if union > 0 else 0.0


def representative_box(boxes) -> OrientedBBox | None:
    """Box at rank floor(0.75 (n - 1)) of the area-ascending order."""
    if not boxes:
        return None
    order = sorted(boxes, key=lambda b: (b.area, b.x_c, b.y_c))
    return order[int(np.floor(0.75 * (len(order) - 1)))]


def _within(box, ref_dims, tol):
    w, h = ref_dims
    return abs(box.w - w) <= tol * w and abs(box.h - h) <= tol * h


def filter_boxes(boxes, image_shape, expected_dims=None, iou_threshold: float = 0.2,
                 size_divergence: float = 0.35, border_margin: float = 1.0) -> list[OrientedBBox]:
    """Drop border-touching, overlapping and off-size boxes.

    ``image_shape`` is ``(height, width)``. Of two boxes overlapping with IoU
    above ``iou_threshold`` the more confident one survives. Sizes are checked
    against the representative box and, when given, ``expected_dims``
    ``(w, h)``; the size rule is repeated until the representative no longer
    changes, so the result is a fixed point of this function.
    """
    H, W = image_shape[:2]
    kept = []
    for b in boxes:
        c = b.corners()
        if (c[:, 0].min() < border_margin or c[:, 1].min() < border_margin
                or c[:, 0].max() > W - 1 - border_margin or c[:, 1].max() > H - 1 - border_margin):
            continue
        kept.append(b)
    order = sorted(kept, key=lambda b: (-b.confidence, -b.area, b.x_c, b.y_c))
    survivors: list[OrientedBBox] = []
    for b in order:
        if all(box_iou(b, s) <= iou_threshold for s in survivors):
            survivors.append(b)
    if expected_dims is not None:
        survivors = [b for b in survivors if _within(b, expected_dims, size_divergence)]
    while survivors:
        rep = representative_box(survivors)
        nxt = [b for b in survivors if _within(b, (rep.w, rep.h), size_divergence)]
        if len(nxt) == len(survivors):
            break
        survivors = nxt
    return sorted(survivors, key=lambda b: (b.y_c, b.x_c))


# -- rows -------------------------------------------------------------------------

@dataclass
class RowFit:
    """Row label per center (-1 for outliers) and one line per row.

    Lines are ``(point, unit direction)`` with the direction pointing towards
    image +x; rows are numbered from the top of the image.
    """

    labels: np.ndarray
    lines: list

    @property
    def n_rows(self) -> int:
        return len(self.lines)


def _tls_line(P):
    c = P.mean(axis=0)
    _, _, vt = np.linalg.svd(P - c, full_matrices=False)
    d = vt[0]
    if d[0] < 0 or (d[0] == 0 and d[1] < 0):
        d = -d
    return c, d


def _residuals(P, line):
    c, d = line
    n = np.array([-d[1], d[0]])
    return np.abs((P - c) @ n)


def fit_rows(centers, residual_threshold: float, iterations: int = 200, seed: int = 0,
             parallel_tol_deg: float = 10.0) -> RowFit:
    """Sequential RANSAC grouping of module centers into parallel row lines."""
    P = np.asarray(centers, dtype=float).reshape(-1, 2)
    if len(P) < 2:
        raise RowFitError("need at least two centers")
    if not residual_threshold > 0:
        raise ValueError("residual threshold must be positive")
    rng = np.random.default_rng(seed)
    labels = np.full(len(P), -1)
    remaining = np.arange(len(P))
    found = []  # (line, member indices)
    while len(remaining) >= 2:
        Q = P[remaining]
        best = None
        n = len(Q)
        pairs = [(0, 1)] if n == 2 else [tuple(rng.choice(n, 2, replace=False)) for _ in range(iterations)]
        for i, j in pairs:
            d = Q[j] - Q[i]
            norm = np.hypot(*d)
            if norm == 0:
                continue
            line = (Q[i], d / norm)
            res = _residuals(Q, line)
            inl = res <= residual_threshold
            score = (int(inl.sum()), -float(res[inl].sum()))
            if best is None or score > best[0]:
                best = (score, inl)
        if best is None or best[0][0] < 2:
            break
        inl = best[1]
        line = _tls_line(Q[inl])
        inl2 = _residuals(Q, line) <= residual_threshold
        if inl2.sum() >= 2:
            inl = inl2
            line = _tls_line(Q[inl])
        found.append((line, remaining[inl]))
        remaining = remaining[~inl]
    if not found:
        raise RowFitError("no row line with at least two inliers")
    # the best supported line sets the reference row direction
    ref = max(found, key=lambda f: len(f[1]))[0][1]
    cos_tol = np.cos(np.radians(parallel_tol_deg))
    rows = [f for f in found if abs(float(f[0][1] @ ref)) >= cos_tol]
    normal = np.array([-ref[1], ref[0]])
    if normal[1] < 0:
        normal = -normal
    rows.sort(key=lambda f: float(f[0][0] @ normal))
    lines = []
    for r, (line, members) in enumerate(rows):
        labels[members] = r
        lines.append(line)
    return RowFit(labels, lines)


def _slots(offsets, median, gap_factor):
    """Sequence increments for consecutive spacings, with inserted skipped slots."""
    steps = []
    for s in offsets:
        steps.append(max(1, int(round(s / median))) if s > gap_factor * median else 1)
    return steps


def assign_sequence(detections, rows: RowFit, direction: int = 1, gap_factor: float = 1.5,
                    image_shape=None, rep_dims=None) -> SemanticStructure:
    """Sequence positions along each row, growing towards image +x when ``direction`` is +1.

    Spacings above ``gap_factor`` times the median spacing (pooled over all
    rows) skip ``round(spacing / median) - 1`` positions. Rows share one
    sequence origin: each row's first detection is placed by its offset from
    the leftmost detection of the structure, in median spacings.
    """
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    dets = list(detections)
    labels = np.asarray(rows.labels)
    if len(labels) != len(dets):
        raise ValueError("one row label per detection is required")
    if rows.n_rows == 0:
        return SemanticStructure([], [], rep_dims, direction, [], image_shape)
    axis = np.mean([d for _, d in rows.lines], axis=0)
    axis = axis / np.linalg.norm(axis) * direction
    per_row, spacings = {}, []
    for r in range(rows.n_rows):
        idx = np.flatnonzero(labels == r)
        t = np.array([float(dets[i].center @ axis) for i in idx])
        order = np.argsort(t, kind="stable")
        per_row[r] = (idx[order], t[order])
        spacings += list(np.diff(t[order]))
    spacings = [s for s in spacings if s > 0]
    median = float(np.median(spacings)) if spacings else None
    t_min = min(t[0] for _, t in per_row.values() if len(t))
    out = []
    for r, (idx, t) in per_row.items():
        if len(idx) == 0:
            continue
        seq = [int(round((t[0] - t_min) / median)) if median else 0]
        if median:
            for step in _slots(np.diff(t), median, gap_factor):
                seq.append(seq[-1] + step)
        for i, s in zip(idx, seq):
            d = dets[i]
            out.append(Detection(d.center, d.corners, d.bbox, r, s, d.track_id, d.source))
    lines = [np.concatenate([c, d]) for c, d in rows.lines]
    out.sort(key=lambda d: (d.row, d.seq))
    return SemanticStructure(out, lines, rep_dims, direction, [], image_shape)


def detections_from_boxes(boxes) -> list[Detection]:
    return [Detection(b.center, order_quad(b.corners()), b, source="box") for b in boxes]


def structure_from_boxes(boxes, image_shape, expected_dims=None, direction: int = 1,
                         size_divergence: float = 0.35, iou_threshold: float = 0.2,
                         residual_fraction: float = 0.2, parallel_tol_deg: float = 10.0,
                         seed: int = 0) -> SemanticStructure:
    """Full box path: filter, fit rows on the centers, assign sequence positions."""
    kept = filter_boxes(boxes, image_shape, expected_dims, iou_threshold, size_divergence)
    if len(kept) < 2:
        return SemanticStructure([], [], None, direction, [], tuple(image_shape[:2]))
    rep = representative_box(kept)
    dets = detections_from_boxes(kept)
    try:
        rows = fit_rows([d.center for d in dets], residual_fraction * rep.h, seed=seed,
                        parallel_tol_deg=parallel_tol_deg)
    except RowFitError:
        return SemanticStructure([], [], (rep.w, rep.h), direction, [], tuple(image_shape[:2]))
    return assign_sequence(dets, rows, direction, image_shape=tuple(image_shape[:2]),
                           rep_dims=(rep.w, rep.h))


def structure_from_modules(modules, direction: int = 1, image_shape=None) -> SemanticStructure:
    """Semantic structure from edge-detector grid cells.

    The grid already provides rows and columns; columns become sequence
    positions (mirrored when ``direction`` is -1) and a row line is fitted
    through each row's cell centers.
    """
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    if not modules:
        return SemanticStructure([], [], None, direction, [], image_shape)
    rows = sorted({m.row for m in modules})
    row_index = {r: i for i, r in enumerate(rows)}
    cols = [m.column for m in modules]
    c0, c1 = min(cols), max(cols)
    dets = []
    for m in modules:
        seq = m.column - c0 if direction > 0 else c1 - m.column
        dets.append(Detection(m.center, order_quad(m.corners), None, row_index[m.row], seq,
                              source="edge"))
    dets.sort(key=lambda d: (d.row, d.seq))
    lines = []
    for r in range(len(rows)):
        P = np.array([d.center for d in dets if d.row == r])
        if len(P) >= 2:
            c, d = _tls_line(P)
            lines.append(np.concatenate([c, d]))
        else:
            lines.append(np.concatenate([P[0], [1.0, 0.0]]))
    sides = np.array([[np.linalg.norm(m.corners[1] - m.corners[0]), np.linalg.norm(m.corners[3] - m.corners[0])]
                      for m in modules])
    rep = tuple(float(v) for v in np.median(sides, axis=0))
    return SemanticStructure(dets, lines, rep, direction, [], image_shape)
