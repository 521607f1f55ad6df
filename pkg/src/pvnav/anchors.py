"""Visual anchors (bench ends and bench gaps) and frame-to-frame module tracking."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import cv2
import numpy as np

from .structure import BenchEndObservation, Detection, GapObservation, SemanticStructure


# -- anchors ----------------------------------------------------------------------

def _row_axis(structure: SemanticStructure, row: int) -> np.ndarray:
    if row < len(structure.row_lines):
        d = np.asarray(structure.row_lines[row], float)[2:4]
    else:
        d = np.array([1.0, 0.0])
    d = d / np.linalg.norm(d)
    return d if d[0] >= 0 else -d


def _spacings(structure: SemanticStructure):
    """Consecutive center spacings in pixels per row, with their detection pairs."""
    out = {}
    for r, dets in structure.rows().items():
        pairs = []
        for a, b in zip(dets[:-1], dets[1:]):
            pairs.append((a, b, float(np.linalg.norm(np.asarray(b.center) - np.asarray(a.center)))))
        out[r] = pairs
    return out


def _unit_spacing(structure, pairs_by_row):
    """Median center distance of detections one sequence slot apart."""
    unit = [s / (b.seq - a.seq) for pairs in pairs_by_row.values() for a, b, s in pairs
            if b.seq - a.seq == 1]
    if not unit:
        unit = [s for pairs in pairs_by_row.values() for _, _, s in pairs]
    return float(np.median(unit)) if unit else None


def transition_patch(image: np.ndarray, a, b, axis, size) -> np.ndarray:
    """Patch of ``size`` (along, across) pixels centred between two detections, aligned with ``axis``."""
    mid = (np.asarray(a, float) + np.asarray(b, float)) / 2
    w, h = max(2, int(round(size[0]))), max(2, int(round(size[1])))
    angle = np.degrees(np.arctan2(axis[1], axis[0]))
    M = cv2.getRotationMatrix2D((float(mid[0]), float(mid[1])), angle, 1.0)
    # shift so the rotated patch lands in the output window
    M[:, 2] += np.array([w / 2, h / 2]) - mid
    return cv2.warpAffine(image, M, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def patch_histogram(patch: np.ndarray, bins: int = 32) -> np.ndarray:
    hist = cv2.calcHist([patch.astype(np.uint8)], [0], None, [bins], [0, 256]).ravel()
    total = hist.sum()
    return hist / total if total > 0 else hist


def bhattacharyya(h1: np.ndarray, h2: np.ndarray) -> float:
    """Bhattacharyya distance between two normalised histograms (0 identical, 1 disjoint)."""
    return float(cv2.compareHist(h1.astype(np.float32), h2.astype(np.float32), cv2.HISTCMP_BHATTACHARYYA))


@dataclass(frozen=True)
class GapParams:
    spacing_factor: float = 1.5
    bins: int = 32
    similarity_threshold: float = 0.3
    dark_ratio: float = 0.6
    patch_along: float = 0.5  # patch size in unit spacings
    patch_across: float = 0.5  # patch size in representative module heights


def detect_bench_gaps(structure: SemanticStructure, image: np.ndarray,
                      params: GapParams = GapParams()) -> list[GapObservation]:
    """Confirmed bench gaps between consecutive detections of a row.

    Candidates have a center spacing above ``spacing_factor`` times the
    median one-slot spacing. A candidate is confirmed when its transition
    patch histogram is far (Bhattacharyya distance above the threshold) from
    the median intra-bench transition histogram and the patch is darker than
    ``dark_ratio`` times the median intra-bench transition mean.
    """
    pairs_by_row = _spacings(structure)
    if not any(len(p) >= 2 for p in pairs_by_row.values()):
        return []
    unit = _unit_spacing(structure, pairs_by_row)
    if not unit:
        return []
    if structure.rep_dims is not None:
        across = params.patch_across * min(structure.rep_dims)
    else:
        across = params.patch_across * unit
    size = (params.patch_along * unit, across)
    img = image if image.dtype == np.uint8 else np.clip(image, 0, 255).astype(np.uint8)

    normal_hists, normal_means, candidates = [], [], []
    for r, pairs in pairs_by_row.items():
        axis = _row_axis(structure, r)
        for a, b, s in pairs:
            patch = transition_patch(img, a.center, b.center, axis, size)
            if s > params.spacing_factor * unit:
                candidates.append((r, a, b, s, patch))
            elif b.seq - a.seq == 1:
                normal_hists.append(patch_histogram(patch, params.bins))
                normal_means.append(float(patch.mean()))
    if not candidates or not normal_hists:
        return []
    ref_hist = np.median(np.array(normal_hists), axis=0)
    ref_hist = ref_hist / ref_hist.sum() if ref_hist.sum() > 0 else ref_hist
    ref_mean = float(np.median(normal_means))
    out = []
    for r, a, b, s, patch in candidates:
        dist = bhattacharyya(patch_histogram(patch, params.bins), ref_hist)
        darkness = float(patch.mean()) / ref_mean if ref_mean > 0 else 1.0
        if dist > params.similarity_threshold and darkness < params.dark_ratio:
            mid = (np.asarray(a.center, float) + np.asarray(b.center, float)) / 2
            out.append(GapObservation(r, a.seq, b.seq, (float(mid[0]), float(mid[1])), darkness, dist))
    return out


def detect_bench_ends(structure: SemanticStructure, margin: float | None = None) -> list[BenchEndObservation]:
    """First and last detection of every row, when they are far enough from the image border.

    A row end is only asserted if the slot beyond it lies inside the image
    with ``margin`` pixels to spare (default: one module spacing), so that a
    missing neighbour cannot be explained by the frame cutting the bench.
    """
    if not structure.detections or structure.image_shape is None:
        return []
    H, W = structure.image_shape[:2]
    pairs_by_row = _spacings(structure)
    unit = _unit_spacing(structure, pairs_by_row)
    if unit is None:
        unit = max(structure.rep_dims) if structure.rep_dims else 0.0
    guard = unit if margin is None else margin
    out = []
    for r, dets in structure.rows().items():
        axis = _row_axis(structure, r) * structure.direction  # points towards growing seq
        for side, det, sign in (("start", dets[0], -1.0), ("end", dets[-1], 1.0)):
            beyond = np.asarray(det.center, float) + sign * axis * (unit + guard)
            if 0 <= beyond[0] <= W - 1 and 0 <= beyond[1] <= H - 1:
                out.append(BenchEndObservation(r, side, det.seq, (float(det.center[0]), float(det.center[1]))))
    return out


# -- optical flow -----------------------------------------------------------------

@dataclass(frozen=True)
class FlowParams:
    window: int = 15
    levels: int = 2
    min_eigen: float = 1e-3
    fb_threshold: float | None = None  # forward-backward disagreement [px]; None skips the check


def estimate_flow(prev_image: np.ndarray, cur_image: np.ndarray, points,
                  params: FlowParams = FlowParams()):
    """Pyramidal Lucas-Kanade displacement of ``points`` with a validity flag.

    Points whose neighbourhood has no texture (small minimum eigenvalue of
    the gradient structure tensor), that leave the image or, when enabled,
    fail the forward-backward check are invalid and get a zero displacement.
    """
    if prev_image.shape != cur_image.shape:
        raise ValueError("images must have the same size")
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros((0, 2)), np.zeros(0, bool)
    prev = prev_image if prev_image.dtype == np.uint8 else np.clip(prev_image, 0, 255).astype(np.uint8)
    cur = cur_image if cur_image.dtype == np.uint8 else np.clip(cur_image, 0, 255).astype(np.uint8)
    win = (params.window, params.window)
    crit = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 30, 0.01)
    p0 = pts.reshape(-1, 1, 2)
    p1, st, _ = cv2.calcOpticalFlowPyrLK(prev, cur, p0, None, winSize=win, maxLevel=params.levels,
                                         criteria=crit, minEigThreshold=params.min_eigen)
    p1 = p1.reshape(-1, 2).astype(float)
    H, W = prev.shape[:2]
    valid = (st.ravel() == 1) & np.all(np.isfinite(p1), axis=1)
    valid &= (p1[:, 0] >= 0) & (p1[:, 0] <= W - 1) & (p1[:, 1] >= 0) & (p1[:, 1] <= H - 1)
    if params.fb_threshold is not None:
        pb, stb, _ = cv2.calcOpticalFlowPyrLK(cur, prev, p1.astype(np.float32).reshape(-1, 1, 2), None,
                                              winSize=win, maxLevel=params.levels, criteria=crit,
                                              minEigThreshold=params.min_eigen)
        fb = np.linalg.norm(pb.reshape(-1, 2) - pts, axis=1)
        valid &= (stb.ravel() == 1) & (fb <= params.fb_threshold)
    disp = np.where(valid[:, None], p1 - pts, 0.0)
    return disp, valid


# -- tracking ---------------------------------------------------------------------

@dataclass
class Track:
    id: int
    points: np.ndarray  # feature points: 4 corners and the center
    row: int = -1
    seq: int = -1
    module_id: str | None = None
    age: int = 1
    last_seen: int = 0
    missing: int = 0
    motion: deque = field(default_factory=lambda: deque(maxlen=5))

    @property
    def center(self) -> np.ndarray:
        return self.points[-1]

    def expected_shift(self) -> np.ndarray:
        """Average per-frame motion over the recent history."""
        if not self.motion:
            return np.zeros(2)
        return np.mean(np.array(self.motion), axis=0)


@dataclass
class TrackSet:
    tracks: list = field(default_factory=list)
    next_id: int = 0
    frame: int = -1

    def all_points(self) -> np.ndarray:
        if not self.tracks:
            return np.zeros((0, 2))
        return np.vstack([t.points for t in self.tracks])

    def by_id(self) -> dict:
        return {t.id: t for t in self.tracks}


def track_shifts(tracks: TrackSet, disp: np.ndarray, valid: np.ndarray) -> list:
    """Per-track shift from point flows (median of valid points; None without any)."""
    sizes = [len(t.points) for t in tracks.tracks]
    if not sizes:
        return []
    if len(set(sizes)) == 1:
        d = np.where(valid[:, None], disp, np.nan).reshape(len(sizes), sizes[0], 2)
        any_valid = valid.reshape(len(sizes), sizes[0]).any(axis=1)
        med = np.full((len(sizes), 2), np.nan)
        if any_valid.any():
            med[any_valid] = np.nanmedian(d[any_valid], axis=1)
        return [m if ok else None for m, ok in zip(med, any_valid)]
    out, k = [], 0
    for n in sizes:
        d, v = disp[k:k + n], valid[k:k + n]
        out.append(np.median(d[v], axis=0) if v.any() else None)
        k += n
    return out


def _copy_track(t: Track) -> Track:
    return Track(t.id, t.points.copy(), t.row, t.seq, t.module_id, t.age, t.last_seen, t.missing,
                 deque(t.motion, maxlen=t.motion.maxlen))


def track_modules(tracks: TrackSet, displacements, detections: list[Detection],
                  match_threshold: float, max_missing: int = 5, frame_index: int | None = None) -> TrackSet:
    """Match detections to predicted track positions and update the track set.

    ``displacements`` holds one shift per track (``None`` when the flow gave
    no valid point, in which case the track's recent motion is used). Pairs
    are matched greedily by ascending mean feature-point distance below
    ``match_threshold``. The detections' ``track_id`` fields are set.
    Unmatched tracks coast on their motion history for up to ``max_missing``
    frames; unmatched detections open tracks with fresh ids.
    """
    if displacements is None:
        displacements = [None] * len(tracks.tracks)
    if len(displacements) != len(tracks.tracks):
        raise ValueError("one displacement per track is required")
    frame = tracks.frame + 1 if frame_index is None else int(frame_index)
    predicted = []
    for t, shift in zip(tracks.tracks, displacements):
        nt = _copy_track(t)
        s = nt.expected_shift() if shift is None else np.asarray(shift, float)
        nt.points = nt.points + s
        nt.motion.append(s)
        predicted.append(nt)

    feats = [np.asarray(d.feature_points(), float) for d in detections]
    cand = []
    if predicted and feats:
        # mean feature-point distance when the point sets agree, center distance otherwise
        centers_t = np.array([t.points[-1] for t in predicted])
        centers_d = np.array([f[-1] for f in feats])
        dist = np.linalg.norm(centers_t[:, None] - centers_d[None], axis=2)
        same = {len(t.points) for t in predicted} | {len(f) for f in feats}
        if len(same) == 1:
            Pt = np.array([t.points for t in predicted])
            Pd = np.array(feats)
            dist = np.linalg.norm(Pt[:, None] - Pd[None], axis=3).mean(axis=2)
        ii, jj = np.nonzero(dist < match_threshold)
        cand = sorted((float(dist[i, j]), predicted[i].id, int(i), int(j)) for i, j in zip(ii, jj))
    used_t, used_d = set(), set()
    for dist, _, i, j in cand:
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        t, det = predicted[i], detections[j]
        # replace the predicted shift with the motion actually observed
        t.motion[-1] = t.motion[-1] + (feats[j][-1] - t.points[-1])
        t.points = feats[j].copy()
        t.row, t.seq = det.row, det.seq
        t.age += 1
        t.last_seen = frame
        t.missing = 0
        det.track_id = t.id

    out = []
    for i, t in enumerate(predicted):
        if i not in used_t:
            t.missing += 1
            if t.missing > max_missing:
                continue
        out.append(t)
    next_id = tracks.next_id
    for j, det in enumerate(detections):
        if j in used_d:
            continue
        t = Track(next_id, feats[j].copy(), det.row, det.seq, None, 1, frame, 0)
        det.track_id = next_id
        next_id += 1
        out.append(t)
    return TrackSet(out, next_id, frame)
