"""Edge-based PV module segmentation.

Pipeline per frame: undistort, adaptive Gaussian blur, Canny, Hough lines,
hierarchical clustering of lines by their Hausdorff distance, a vanishing-point
perpendicularity filter on the Gaussian sphere, the line-intersection grid
graph and finally the extraction of its 4-cycles as module candidates.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import cv2
import numpy as np
from scipy import ndimage
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from .camera import CameraIntrinsics


class StructureNotFound(RuntimeError):
    """The frame does not contain a usable grid structure."""


@dataclass(frozen=True)
class ImageLine:
    """Straight image line clipped to the image rectangle ``[0, W] x [0, H]``."""

    p0: tuple
    p1: tuple
    angle: float  # direction angle in [0, pi)
    weight: float = 0.0
    cls: str = ""  # "h" or "v"
    bounds: tuple = (0, 0)

    @property
    def points(self) -> np.ndarray:
        return np.array([self.p0, self.p1], dtype=float)

    @property
    def direction(self) -> np.ndarray:
        return np.array([np.cos(self.angle), np.sin(self.angle)])

    @property
    def midpoint(self) -> np.ndarray:
        return np.array([(self.p0[0] + self.p1[0]) / 2, (self.p0[1] + self.p1[1]) / 2], dtype=float)


def clip_line(point, angle, bounds):
    """Border points of the infinite line through ``point`` with direction ``angle``."""
    W, H = bounds
    px, py = float(point[0]), float(point[1])
    dx, dy = math.cos(angle), math.sin(angle)
    ts = []
    eps = 1e-9
    if abs(dx) > eps:
        for x in (0.0, W):
            t = (x - px) / dx
            y = py + t * dy
            if -eps <= y <= H + eps:
                ts.append(t)
    if abs(dy) > eps:
        for y in (0.0, H):
            t = (y - py) / dy
            x = px + t * dx
            if -eps <= x <= W + eps:
                ts.append(t)
    if len(ts) < 2:
        return None
    t0, t1 = min(ts), max(ts)
    if t1 - t0 < 1e-6:
        return None
    p0 = (min(max(px + t0 * dx, 0.0), W), min(max(py + t0 * dy, 0.0), H))
    p1 = (min(max(px + t1 * dx, 0.0), W), min(max(py + t1 * dy, 0.0), H))
    return p0, p1


def make_line(point, angle, bounds, weight=0.0, cls="") -> ImageLine | None:
    angle = float(angle) % math.pi
    if angle >= math.pi:
        angle = 0.0
    pts = clip_line(point, angle, bounds)
    if pts is None:
        return None
    return ImageLine(pts[0], pts[1], angle, float(weight), cls, tuple(bounds))


def line_from_points(p, q, bounds, weight=0.0, cls="") -> ImageLine | None:
    d = np.asarray(q, float) - np.asarray(p, float)
    return make_line(p, np.arctan2(d[1], d[0]), bounds, weight, cls)


# -- preprocessing ------------------------------------------------------------

@lru_cache(maxsize=8)
def _undistort_maps(K: CameraIntrinsics):
    return cv2.initUndistortRectifyMap(K.matrix, K.dist_coeffs, None, K.matrix,
                                       (K.width, K.height), cv2.CV_32FC1)


def undistort(image: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Remove lens distortion, keeping the same pinhole intrinsics."""
    if not K.has_distortion:
        return image.copy()
    mx, my = _undistort_maps(K)
    return cv2.remap(image, mx, my, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def focus_measure(image: np.ndarray) -> float:
    return float(np.var(image, dtype=np.float64))


class BlurResult(NamedTuple):
    image: np.ndarray
    kernel: int
    uniform: bool = False


def adaptive_blur(image: np.ndarray, target_focus: float, max_kernel: int = 31) -> BlurResult:
    """Smallest odd Gaussian kernel bringing the intensity variance to ``target_focus``."""
    if not target_focus > 0:
        raise ValueError("target focus must be positive")
    if focus_measure(image) == 0:
        return BlurResult(image, 1, True)
    k, out = 1, image
    while focus_measure(out) > target_focus and k < max_kernel:
        k += 2
        out = cv2.GaussianBlur(image, (k, k), 0)
    return BlurResult(out, k, False)


def canny_auto(image: np.ndarray, low_ratio: float = 0.4):
    """Canny with the high threshold from Otsu on the gradient magnitude.

    Returns the edge map, the high threshold and the Sobel gradients.
    """
    gx = cv2.Sobel(image, cv2.CV_16S, 1, 0, ksize=3)
    gy = cv2.Sobel(image, cv2.CV_16S, 0, 1, ksize=3)
    mag = cv2.magnitude(gx.astype(np.float32), gy.astype(np.float32))
    mmax = float(mag.max())
    if mmax <= 0:
        return np.zeros(image.shape, np.uint8), 0.0, (gx, gy)
    scaled = np.round(mag * (255.0 / mmax)).astype(np.uint8)
    otsu, _ = cv2.threshold(scaled, 0, 255, cv2.THRESH_BINARY | cv2.THRESH_OTSU)
    high = max(otsu * mmax / 255.0, 1.0)
    edges = cv2.Canny(gx, gy, low_ratio * high, high, L2gradient=True)
    return edges, high, (gx, gy)


def _adiff(a, b):
    d = np.abs(np.mod(np.asarray(a) - b, np.pi))
    return np.minimum(d, np.pi - d)


def _hough(edges, rho_res, theta_res, threshold, min_theta=0.0, max_theta=np.pi):
    res = cv2.HoughLinesWithAccumulator(edges, rho_res, theta_res, int(max(1, threshold)),
                                        min_theta=min_theta, max_theta=max_theta)
    return np.zeros((0, 3)) if res is None else res.reshape(-1, 3).astype(float)


def _theta_ranges(direction, band):
    """Hough normal-angle ranges in [0, pi] covering line directions ``direction +- band``."""
    normal = np.mod(direction + np.pi / 2, np.pi)
    lo, hi = normal - band, normal + band
    if lo < 0:
        return [(0.0, hi), (lo + np.pi, np.pi)]
    if hi > np.pi:
        return [(lo, np.pi), (0.0, hi - np.pi)]
    return [(lo, hi)]


def longest_support(mask: np.ndarray, lines, tolerance: int = 1, max_gap: int = 4) -> np.ndarray:
    """Longest run [px] of ``mask`` pixels along each line.

    Pixels within ``tolerance`` of the line count as support and breaks of up
    to ``max_gap`` samples are bridged.
    """
    if not lines:
        return np.zeros(0)
    k = 2 * tolerance + 1
    near = cv2.dilate((mask > 0).astype(np.uint8), np.ones((k, k), np.uint8))
    H, W = mask.shape
    P = np.array([[l.p0, l.p1] for l in lines], dtype=float)
    length = np.linalg.norm(P[:, 1] - P[:, 0], axis=1)
    n = int(np.ceil(length.max())) + 1
    s = np.arange(n, dtype=float)
    t = np.minimum(s[None, :] / np.maximum(length[:, None], 1e-9), 1.0)
    xy = P[:, None, 0] + t[..., None] * (P[:, None, 1] - P[:, None, 0])
    xs = np.clip(np.rint(xy[..., 0]).astype(int), 0, W - 1)
    ys = np.clip(np.rint(xy[..., 1]).astype(int), 0, H - 1)
    hit = near[ys, xs].astype(bool) & (s[None, :] <= length[:, None])
    if max_gap > 0:
        hit = ndimage.binary_closing(hit, structure=np.ones((1, max_gap + 1), bool), border_value=0) | hit
    runs = np.zeros(len(lines))
    padded = np.pad(hit, ((0, 0), (1, 1)))
    d = np.diff(padded.astype(np.int8), axis=1)
    for i in range(len(lines)):
        starts = np.flatnonzero(d[i] == 1)
        ends = np.flatnonzero(d[i] == -1)
        if len(starts):
            runs[i] = float((ends - starts).max())
    return runs


def detect_lines(edges: np.ndarray, th_horizontal: float, th_vertical: float,
                 rho_res: float = 1.0, theta_res: float = np.pi / 180, band: float = np.radians(20),
                 gradients=None, max_lines: int = 4000, min_run=None,
                 peak_fraction: float = 0.0) -> list[ImageLine]:
    """Hough lines on an edge map, split into two orientation classes.

    The two family angles are the strongest accumulator peak and the strongest
    peak at least 45 degrees away from it; a line is kept if it lies within
    ``band`` of a family and reaches that family's vote threshold. The family
    closer to the image horizontal is class ``"h"``. With ``gradients``
    (Sobel gx, gy) each family only votes with edge pixels whose gradient is
    roughly normal to it, which stops lines of one family collecting votes
    where they cross the other. ``min_run`` (horizontal, vertical) discards
    lines whose longest contiguous edge support is shorter, which removes
    oblique lines assembled from many short crossings of parallel edges.
    With ``peak_fraction`` a family's threshold is raised to that fraction of
    its strongest line's votes.
    """
    if th_horizontal <= 0 or th_vertical <= 0:
        raise ValueError("weight thresholds must be positive")
    if not np.any(edges):
        return []
    res = _hough(edges, rho_res, theta_res, min(th_horizontal, th_vertical))
    if len(res) == 0:
        return []
    res = res[np.lexsort((res[:, 0], res[:, 1], -res[:, 2]))]
    direction = np.mod(res[:, 1] + np.pi / 2, np.pi)
    fams = [direction[0]]
    far = np.nonzero(_adiff(direction, direction[0]) >= np.pi / 4)[0]
    if len(far):
        fams.append(direction[far[0]])
    fams.sort(key=lambda a: _adiff(a, 0.0))
    if len(fams) == 2:
        labels = ["h", "v"]
    else:
        labels = ["h" if _adiff(fams[0], 0.0) <= np.pi / 4 else "v"]

    H, W = edges.shape
    if gradients is not None:
        gx, gy = gradients
        ey, ex = np.nonzero(edges)
        grad_dir = np.arctan2(gy[ey, ex].astype(np.float32), gx[ey, ex].astype(np.float32))
    out = []
    for fam, lab in zip(fams, labels):
        thresh = th_horizontal if lab == "h" else th_vertical
        if gradients is not None:
            # edge gradient is normal to the line direction
            sel = _adiff(grad_dir, fam + np.pi / 2) <= band
            fam_edges = np.zeros_like(edges)
            fam_edges[ey[sel], ex[sel]] = 255
        else:
            fam_edges = edges
        rows = [_hough(fam_edges, rho_res, theta_res, thresh, lo, hi)
                for lo, hi in _theta_ranges(fam, band)]
        rows = np.vstack(rows)
        if gradients is None:
            # without gradients the full-map peaks are reused
            keep = (_adiff(direction, fam) <= band) & (res[:, 2] >= thresh)
            rows = res[keep]
        rows = rows[np.lexsort((rows[:, 0], rows[:, 1], -rows[:, 2]))][:max_lines]
        if peak_fraction > 0 and len(rows):
            thresh = max(thresh, peak_fraction * rows[0, 2])
        fam_lines = []
        for r, th, v in rows:
            d = np.mod(th + np.pi / 2, np.pi)
            if _adiff(d, fam) > band or v < thresh:
                continue
            line = make_line((r * np.cos(th), r * np.sin(th)), d, (W, H), v, lab)
            if line is not None:
                fam_lines.append(line)
        if min_run is not None and fam_lines:
            need = min_run[0] if lab == "h" else min_run[1]
            runs = longest_support(fam_edges, fam_lines)
            fam_lines = [l for l, run in zip(fam_lines, runs) if run >= need]
        out += fam_lines
    return out


# -- line distance and clustering ------------------------------------------------

def _point_segment_distance(p, a, b):
    ab = b - a
    denom = np.einsum("...d,...d->...", ab, ab)
    t = np.clip(np.einsum("...d,...d->...", p - a, ab) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p - proj, axis=-1)


def _scalar_distance(p, a, b):
    abx, aby = b[0] - a[0], b[1] - a[1]
    t = ((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / (abx * abx + aby * aby)
    t = min(1.0, max(0.0, t))
    return math.hypot(p[0] - a[0] - t * abx, p[1] - a[1] - t * aby)


def hausdorff_line_distance(L: ImageLine, K: ImageLine) -> float:
    """Largest distance of a border point of one line to the other (clipped) line."""
    l0, l1 = np.asarray(L.p0, float), np.asarray(L.p1, float)
    k0, k1 = np.asarray(K.p0, float), np.asarray(K.p1, float)
    if np.allclose(l0, l1) or np.allclose(k0, k1):
        raise ValueError("degenerate line: identical border points")
    return float(max(_scalar_distance(l0, k0, k1), _scalar_distance(l1, k0, k1),
                     _scalar_distance(k0, l0, l1), _scalar_distance(k1, l0, l1)))


def pairwise_hausdorff(lines) -> np.ndarray:
    P = np.array([[l.p0, l.p1] for l in lines], dtype=float)  # n x 2 x 2
    a, b = P[:, 0], P[:, 1]
    n = len(lines)
    D = np.zeros((n, n))
    for end in (a, b):
        # distance of each line's border point (rows) to every other segment (cols)
        d = _point_segment_distance(end[:, None, :], a[None, :, :], b[None, :, :])
        D = np.maximum(D, d)
    return np.maximum(D, D.T)


@dataclass
class LineCluster:
    members: list
    line: ImageLine

    @property
    def cls(self) -> str:
        return self.line.cls


def _canonical(line: ImageLine):
    mx = (line.p0[0] + line.p1[0]) / 2
    my = (line.p0[1] + line.p1[1]) / 2
    return (round(line.angle, 12), round(float(mx), 9), round(float(my), 9), -line.weight)


def mean_line(lines, bounds=None) -> ImageLine:
    """Vector mean: doubled-angle direction average through the mean midpoint."""
    lines = sorted(lines, key=_canonical)
    bounds = bounds or lines[0].bounds
    ang2 = np.array([2 * l.angle for l in lines])
    angle = 0.5 * np.arctan2(np.sin(ang2).sum(), np.cos(ang2).sum())
    mid = np.mean([l.midpoint for l in lines], axis=0)
    classes = [l.cls for l in lines]
    cls = max(sorted(set(classes)), key=classes.count)
    weight = float(sum(l.weight for l in lines))
    line = make_line(mid, angle, bounds, weight, cls)
    return line if line is not None else lines[0]


def cluster_lines(lines, stop_threshold: float) -> list[LineCluster]:
    """Single-linkage agglomerative clustering stopped at ``stop_threshold`` pixels."""
    if not stop_threshold > 0:
        raise ValueError("stop threshold must be positive")
    lines = sorted(lines, key=_canonical)
    if not lines:
        return []
    if len(lines) == 1:
        return [LineCluster(list(lines), lines[0])]
    # lines of different orientation classes are never merged, so each class
    # is clustered on its own (smaller distance matrices)
    groups: dict[tuple, list] = {}
    for cls in sorted({l.cls for l in lines}):
        sub = [l for l in lines if l.cls == cls]
        if len(sub) == 1:
            groups[(cls, 0)] = sub
            continue
        Z = linkage(squareform(pairwise_hausdorff(sub), checks=False), method="single")
        labels = fcluster(Z, t=np.nextafter(stop_threshold, 0), criterion="distance")
        for lab, line in zip(labels, sub):
            groups.setdefault((cls, int(lab)), []).append(line)
    clusters = [LineCluster(g, g[0] if len(g) == 1 else mean_line(g)) for g in groups.values()]
    clusters.sort(key=lambda c: _canonical(c.line))
    return clusters


def refine_line(line: ImageLine, edge_points: np.ndarray, band: float = 3.0, iters: int = 2) -> ImageLine:
    """Total-least-squares fit of ``line`` to the edge pixels within ``band`` of it."""
    cur = line
    for _ in range(iters):
        n = np.array([-np.sin(cur.angle), np.cos(cur.angle)])
        d = (edge_points - cur.midpoint) @ n
        sel = edge_points[np.abs(d) <= band]
        if len(sel) < 10:
            return cur
        c = sel.mean(axis=0)
        _, _, vt = np.linalg.svd(sel - c, full_matrices=False)
        nl = make_line(c, np.arctan2(vt[0, 1], vt[0, 0]), line.bounds, line.weight, line.cls)
        if nl is None:
            return cur
        cur = nl
    return cur


# -- Gaussian sphere ------------------------------------------------------------

def great_circle_normal(line: ImageLine, K: CameraIntrinsics) -> np.ndarray:
    Kinv = np.linalg.inv(K.matrix)
    r0 = Kinv @ np.array([line.p0[0], line.p0[1], 1.0])
    r1 = Kinv @ np.array([line.p1[0], line.p1[1], 1.0])
    n = np.cross(r0, r1)
    return n / np.linalg.norm(n)


def _vanishing_direction(normals):
    _, _, vt = np.linalg.svd(np.asarray(normals), full_matrices=True)
    return vt[-1]


@dataclass
class FamilyFit:
    vanishing: list
    kept: list


def _consensus_direction(normals, sin_tol):
    """Vanishing direction supported by the most great circles.

    Every pair of normals proposes the direction common to both circles; the
    proposal with the largest inlier set (ties: smallest summed residual)
    is refitted by SVD on its inliers.
    """
    n = len(normals)
    i, j = np.triu_indices(n, 1)
    cand = np.cross(normals[i], normals[j])
    norm = np.linalg.norm(cand, axis=1)
    ok = norm > 1e-12
    if not ok.any():
        return _vanishing_direction(normals)
    cand = cand[ok] / norm[ok, None]
    res = np.abs(normals @ cand.T)  # lines x candidates
    inl = res < sin_tol
    count = inl.sum(axis=0)
    cost = np.where(inl, res, sin_tol).sum(axis=0)
    best = int(np.lexsort((cost, -count))[0])
    return _vanishing_direction(normals[inl[:, best]])


def filter_perpendicular(clusters, K: CameraIntrinsics, angle_tol: float = np.radians(2.0)):
    """Keep lines consistent with two mutually perpendicular vanishing directions.

    Each family's vanishing direction is the unit vector orthogonal to the
    largest consistent subset of its great-circle normals; members further
    than ``angle_tol`` from it are dropped. Raises :class:`StructureNotFound`
    when a family has fewer than two lines or the families are not
    perpendicular.
    """
    if len(clusters) < 2:
        raise StructureNotFound("need at least two line clusters")
    sin_tol = np.sin(angle_tol)
    fams = {"h": [], "v": []}
    for c in clusters:
        line = c.line if isinstance(c, LineCluster) else c
        fams.setdefault(line.cls or "h", []).append(c)
    vps, kept = [], []
    for lab in ("h", "v"):
        members = fams.get(lab, [])
        if len(members) < 2:
            raise StructureNotFound(f"family {lab!r} has fewer than two lines")
        normals = np.array([great_circle_normal(m.line if isinstance(m, LineCluster) else m, K)
                            for m in members])
        v = _consensus_direction(normals, sin_tol)
        good = [i for i in range(len(members)) if abs(normals[i] @ v) < sin_tol]
        if len(good) < 2:
            raise StructureNotFound(f"family {lab!r} has fewer than two consistent lines")
        vps.append(v)
        kept += [members[i] for i in good]
    if abs(float(vps[0] @ vps[1])) >= sin_tol:
        raise StructureNotFound("line families are not perpendicular")
    kept.sort(key=lambda c: _canonical(c.line if isinstance(c, LineCluster) else c))
    return kept, vps


# -- graph and modules ------------------------------------------------------------

def intersect(a: ImageLine, b: ImageLine):
    p, r = a.points[0], a.points[1] - a.points[0]
    q, s = b.points[0], b.points[1] - b.points[0]
    den = r[0] * s[1] - r[1] * s[0]
    if abs(den) < 1e-12:
        return None
    t = ((q - p)[0] * s[1] - (q - p)[1] * s[0]) / den
    return p + t * r


@dataclass
class GridGraph:
    vertices: np.ndarray
    edges: list
    # vertex id -> (horizontal line index, vertical line index)
    incidence: list
    horizontal: list
    vertical: list
    lookup: dict = field(default_factory=dict)


def _as_line(c):
    return c.line if isinstance(c, LineCluster) else c


def build_grid_graph(clusters, image_shape=None) -> GridGraph:
    """Vertices at h/v line intersections inside the image; edges join consecutive
    vertices along each line."""
    lines = [_as_line(c) for c in clusters]
    if image_shape is None:
        bounds = lines[0].bounds if lines else (0, 0)
    else:
        bounds = (image_shape[1], image_shape[0])
    W, H = bounds
    hs = [l for l in lines if l.cls == "h"]
    vs = [l for l in lines if l.cls == "v"]

    def y_at(l, x):
        p = intersect(l, ImageLine((x, 0.0), (x, 1.0), np.pi / 2))
        return p[1] if p is not None else l.midpoint[1]

    def x_at(l, y):
        p = intersect(l, ImageLine((0.0, y), (1.0, y), 0.0))
        return p[0] if p is not None else l.midpoint[0]

    hs.sort(key=lambda l: y_at(l, W / 2))
    vs.sort(key=lambda l: x_at(l, H / 2))
    verts, inc, lookup = [], [], {}
    for i, h in enumerate(hs):
        for j, v in enumerate(vs):
            p = intersect(h, v)
            if p is None or not (0 <= p[0] <= W and 0 <= p[1] <= H):
                continue
            lookup[(i, j)] = len(verts)
            verts.append(p)
            inc.append((i, j))
    edges = []
    for i, h in enumerate(hs):
        ids = sorted((lookup[(i, j)] for j in range(len(vs)) if (i, j) in lookup),
                     key=lambda k: verts[k] @ h.direction)
        edges += list(zip(ids, ids[1:]))
    for j, v in enumerate(vs):
        ids = sorted((lookup[(i, j)] for i in range(len(hs)) if (i, j) in lookup),
                     key=lambda k: verts[k] @ v.direction)
        edges += list(zip(ids, ids[1:]))
    V = np.array(verts, dtype=float).reshape(-1, 2)
    return GridGraph(V, edges, inc, hs, vs, lookup)


@dataclass
class ModuleDetection:
    corners: np.ndarray  # TL, TR, BR, BL
    row: int
    column: int
    source: str = "edge"
    vertex_ids: tuple = ()

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)


def _is_convex(quad) -> bool:
    cross = []
    for k in range(4):
        a, b, c = quad[k], quad[(k + 1) % 4], quad[(k + 2) % 4]
        cross.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    cross = np.array(cross)
    return bool(np.all(cross > 0) or np.all(cross < 0))


def extract_modules(graph: GridGraph, expected_size=None, aspect_band=None,
                    size_tol: float = 0.35) -> list[ModuleDetection]:
    """Module quads from the simple 4-cycles of the grid graph.

    ``expected_size`` is the expected (horizontal, vertical) side length in
    pixels; ``aspect_band`` bounds horizontal/vertical. Logical coordinates
    count line indices from the top-left accepted cell.
    """
    edges = {frozenset(e) for e in graph.edges}
    lk = graph.lookup
    nh, nv = len(graph.horizontal), len(graph.vertical)
    if aspect_band is None and expected_size is not None:
        a = expected_size[0] / expected_size[1]
        aspect_band = (a / (1 + size_tol), a * (1 + size_tol))
    cells = []
    for i in range(nh):
        # consecutive vertices along horizontal line i
        row_js = [j for j in range(nv) if (i, j) in lk]
        for j, j2 in zip(row_js, row_js[1:]):
            a, b = lk[(i, j)], lk[(i, j2)]
            if frozenset((a, b)) not in edges:
                continue
            col_is = [k for k in range(i + 1, nh) if (k, j) in lk]
            if not col_is:
                continue
            i2 = col_is[0]
            if (i2, j2) not in lk:
                continue
            c, d = lk[(i2, j2)], lk[(i2, j)]
            if not ({frozenset((b, c)), frozenset((c, d)), frozenset((d, a))} <= edges):
                continue
            quad = graph.vertices[[a, b, c, d]]
            if not _is_convex(quad):
                continue
            hs = (np.linalg.norm(quad[1] - quad[0]) + np.linalg.norm(quad[2] - quad[3])) / 2
            vs = (np.linalg.norm(quad[3] - quad[0]) + np.linalg.norm(quad[2] - quad[1])) / 2
            if vs <= 0:
                continue
            if expected_size is not None:
                if abs(hs / expected_size[0] - 1) > size_tol or abs(vs / expected_size[1] - 1) > size_tol:
                    continue
            if aspect_band is not None and not (aspect_band[0] <= hs / vs <= aspect_band[1]):
                continue
            cells.append((i, j, quad, (a, b, c, d)))
    if not cells:
        return []
    i0 = min(c[0] for c in cells)
    j0 = min(c[1] for c in cells)
    return [ModuleDetection(q.copy(), i - i0, j - j0, "edge", ids) for i, j, q, ids in cells]


def select_mask(mask: np.ndarray, axis_factor: float = 2.0) -> np.ndarray:
    """Largest mask component plus the components centred near its middle axis."""
    binary = (mask > 0).astype(np.uint8)
    n, labels, stats, centroids = cv2.connectedComponentsWithStats(binary, connectivity=8)
    if n <= 1:
        return binary.astype(bool)
    big = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    ys, xs = np.nonzero(labels == big)
    pts = np.column_stack([xs, ys]).astype(float)
    c = pts.mean(axis=0)
    lam, vec = np.linalg.eigh(np.cov((pts - c).T) if len(pts) > 2 else np.eye(2))
    axis, minor = vec[:, 1], np.sqrt(max(lam[0], 0.0))
    normal = np.array([-axis[1], axis[0]])
    keep = np.zeros(n, bool)
    keep[big] = True
    for k in range(1, n):
        if abs((centroids[k] - c) @ normal) <= axis_factor * max(minor, 1.0):
            keep[k] = True
    return keep[labels]


def apply_mask(edges: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero edge pixels outside the selected mask region."""
    if edges.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} differs from edge map {edges.shape}")
    out = edges.copy()
    out[~select_mask(mask)] = 0
    return out


# -- full detector ------------------------------------------------------------------

@dataclass
class EdgeParams:
    expected_size: tuple | None = None  # (horizontal, vertical) module side [px]
    target_focus: float | None = None
    th_horizontal: float | None = None
    th_vertical: float | None = None
    band_deg: float = 20.0
    stop_threshold: float | None = None
    angle_tol_deg: float = 2.0
    refined_tol_deg: float = 1.0  # tighter vanishing-direction check once lines are refined
    size_tol: float = 0.35
    refine: bool = True
    refine_band: float = 3.0
    weight_ratio: float = 1.5
    peak_fraction: float = 0.2  # family threshold relative to its strongest line
    run_fraction: float = 0.0  # minimum contiguous support as a fraction of the module side
    border_margin: float = 6.0  # quads closer than this to the image border are dropped

    def resolved(self):
        """Fill pixel thresholds from the expected module size."""
        if self.expected_size is None:
            raise ValueError("expected module size in pixels is required")
        ew, eh = self.expected_size
        short = min(ew, eh)
        th_v = self.th_vertical if self.th_vertical is not None else 0.6 * eh
        th_h = self.th_horizontal if self.th_horizontal is not None else self.weight_ratio * th_v
        stop = self.stop_threshold if self.stop_threshold is not None else 0.35 * short
        return th_h, th_v, stop


@dataclass
class EdgeResult:
    modules: list
    lines: list
    clusters: list
    graph: GridGraph | None
    kernel: int
    timings: dict
    failure: str | None = None


def detect_modules(image: np.ndarray, K: CameraIntrinsics, params: EdgeParams,
                   mask: np.ndarray | None = None) -> EdgeResult:
    """Run the full edge pipeline on one frame (already at working resolution)."""
    t0 = time.perf_counter()
    th_h, th_v, stop = params.resolved()
    img = undistort(image, K)
    kernel = 1
    if params.target_focus is not None:
        img, kernel, _ = adaptive_blur(img, params.target_focus)
    edges, _, grads = canny_auto(img)
    if mask is not None:
        edges = apply_mask(edges, mask)
    min_run = None
    if params.run_fraction > 0:
        min_run = (params.run_fraction * params.expected_size[0], params.run_fraction * params.expected_size[1])
    lines = detect_lines(edges, th_h, th_v, band=np.radians(params.band_deg), gradients=grads,
                         min_run=min_run, peak_fraction=params.peak_fraction)
    t1 = time.perf_counter()
    clusters = cluster_lines(lines, stop)
    timings = {"lines": t1 - t0}
    try:
        kept, _ = filter_perpendicular(clusters, K.without_distortion(), np.radians(params.angle_tol_deg))
    except StructureNotFound as exc:
        timings["total"] = time.perf_counter() - t0
        return EdgeResult([], lines, clusters, None, kernel, timings, str(exc))
    if params.refine:
        ys, xs = np.nonzero(edges)
        pts = np.column_stack([xs, ys]).astype(float)
        # each class is fitted to the edge pixels whose gradient points across it
        gx, gy = grads
        across_h = np.abs(gy[ys, xs]) >= np.abs(gx[ys, xs])
        class_pts = {"h": pts[across_h], "v": pts[~across_h]}
        refined = []
        for c in kept:
            line = refine_line(c.line, class_pts.get(c.cls, pts), params.refine_band)
            if hausdorff_line_distance(line, c.line) <= params.refine_band:
                c.line = line
            refined.append(c.line)
        # refinement can pull neighbouring representatives onto the same edge
        kept = [LineCluster(c.members, c.line) for c in cluster_lines(refined, stop)]
        try:
            kept, _ = filter_perpendicular(kept, K.without_distortion(), np.radians(params.refined_tol_deg))
        except StructureNotFound as exc:
            timings["total"] = time.perf_counter() - t0
            return EdgeResult([], lines, kept, None, kernel, timings, str(exc))
    graph = build_grid_graph(kept, image.shape)
    modules = extract_modules(graph, params.expected_size, size_tol=params.size_tol)
    if params.border_margin > 0:
        H, W = image.shape[:2]
        b = params.border_margin
        modules = [m for m in modules
                   if np.all((m.corners >= b) & (m.corners <= np.array([W - 1 - b, H - 1 - b])))]
    timings["total"] = time.perf_counter() - t0
    return EdgeResult(modules, lines, kept, graph, kernel, timings,
                      None if modules else "no module quads")
