"""Synthetic plants, camera flights, rendered frames and GNSS streams.

Everything here exists so that each pipeline stage can be checked against
exact ground truth: layouts are generated analytically, frames are rendered as
flat-shaded quads (painter's algorithm), and GNSS is truth plus a configurable
offset, drift and white jitter.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np

from .camera import CameraIntrinsics, Pose, look_rotation, project_points
from .plant_model import PlantModel, model_from_dict, module_cell_corners
from .structure import OrientedBBox

LOG_VERSION = 1

# Working resolution of the edge detector (max dimension 800 px) for a
# 1920x1080 sensor with f = 1164 px.
DEFAULT_INTRINSICS = CameraIntrinsics(485.0, 485.0, 400.0, 225.0, 800, 450)


@dataclass(frozen=True)
class LayoutSpec:
    benches: int = 3
    rows: int = 2
    columns: int | tuple = 26
    module_width: float = 1.0
    module_height: float = 1.7
    pitch: float = 1.05
    gap_pitch: float = 2.5
    tilt_deg: float = 20.0
    base_height: float = 1.5
    origin: tuple = (0.0, 0.0, 0.0)
    jitter: float = 0.0
    seed: int = 0


PPA_LIKE = LayoutSpec(benches=3, rows=2, columns=(26, 26, 25))
PPB_LIKE = LayoutSpec(benches=2, rows=5, columns=35, module_width=1.7, module_height=1.0,
                      pitch=1.75, gap_pitch=4.0, tilt_deg=25.0)


def generate_layout(spec: LayoutSpec = LayoutSpec(), **overrides) -> PlantModel:
    """Build a single line of benches along world +x, modules facing -y.

    ``pitch`` is the centre-to-centre distance of neighbouring modules inside
    a bench, ``gap_pitch`` the centre distance across a bench gap. Bench-end
    anchors are emitted for both ends of every row, gap anchors for every row
    of every gap.
    """
    if overrides:
        spec = LayoutSpec(**{**asdict(spec), **overrides})
    cols = spec.columns
    cols = tuple(cols) if isinstance(cols, (tuple, list)) else (int(cols),) * spec.benches
    if len(cols) != spec.benches:
        raise ValueError("columns list length must equal the bench count")
    dims = [spec.benches, spec.rows, min(cols), spec.module_width, spec.module_height, spec.pitch]
    if any(d <= 0 for d in dims):
        raise ValueError("layout dimensions must be positive")
    if spec.pitch < spec.module_width:
        raise ValueError("module pitch smaller than module width")
    if spec.benches > 1 and not spec.gap_pitch > spec.pitch:
        raise ValueError("gap pitch must exceed module pitch")

    rng = np.random.default_rng(spec.seed)
    tilt = np.radians(spec.tilt_deg)
    u = np.array([1.0, 0.0, 0.0])
    v = np.array([0.0, np.cos(tilt), np.sin(tilt)])
    n = np.cross(u, v)
    row_pitch = spec.module_height + (spec.pitch - spec.module_width)
    origin = np.asarray(spec.origin, dtype=float) + np.array([0.0, 0.0, spec.base_height])

    modules, benches, anchors = [], [], []
    x0 = 0.0
    for b in range(spec.benches):
        grid = []
        for r in range(spec.rows):
            row = []
            voff = ((spec.rows - 1) / 2 - r) * row_pitch
            for c in range(cols[b]):
                mid = f"b{b}r{r}c{c}"
                center = origin + (x0 + c * spec.pitch) * u + voff * v
                if spec.jitter:
                    center = center + rng.normal(0.0, spec.jitter, 2) @ np.vstack([u, v])
                modules.append({"id": mid, "center": center.tolist(), "normal": n.tolist(),
                                "axis_u": u.tolist(), "width": spec.module_width,
                                "height": spec.module_height})
                row.append(mid)
            grid.append(row)
            anchors.append({"id": f"end-b{b}r{r}-start", "kind": "bench_end", "bench": f"b{b}",
                            "row": r, "module": row[0], "side": "start"})
            anchors.append({"id": f"end-b{b}r{r}-end", "kind": "bench_end", "bench": f"b{b}",
                            "row": r, "module": row[-1], "side": "end"})
            if b > 0:
                prev = benches[-1]["grid"][r]
                anchors.append({"id": f"gap-b{b - 1}b{b}r{r}", "kind": "bench_gap",
                                "bench": f"b{b - 1}", "row": r, "between": [prev[-1], row[0]]})
        benches.append({"id": f"b{b}", "grid": grid})
        x0 += (cols[b] - 1) * spec.pitch + spec.gap_pitch
    return model_from_dict({"version": 1, "frame": "local-enu-meters", "modules": modules,
                            "benches": benches, "anchors": anchors,
                            "coplanarity_tolerance": max(0.05, 4 * spec.jitter)})


@dataclass(frozen=True)
class RenderOptions:
    cell: int = 60
    frame: int = 220
    ground: int = 35
    frame_px: float = 1.5  # frame border width at ref_distance
    ref_distance: float = 12.0
    noise_sigma: float = 0.0
    blur_length: int = 0
    blur_angle_deg: float = 0.0
    # (x_c, y_c, semi-axis a, semi-axis b, angle_deg, peak added intensity)
    glare: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        for lv in (self.cell, self.frame, self.ground):
            if not 0 <= lv <= 255:
                raise ValueError("brightness levels must lie in [0, 255]")
        if self.noise_sigma < 0 or self.blur_length < 0:
            raise ValueError("noise sigma and blur length must be non-negative")


def _to_fixed(pts):
    return np.round(np.asarray(pts) * 16).astype(np.int32).reshape(-1, 1, 2)


@lru_cache(maxsize=8)
def _distortion_maps(K: CameraIntrinsics):
    from .camera import undistort_pixels

    ys, xs = np.mgrid[0:K.height, 0:K.width].astype(float)
    src = undistort_pixels(np.column_stack([xs.ravel(), ys.ravel()]), K)
    return (src[:, 0].reshape(K.shape).astype(np.float32),
            src[:, 1].reshape(K.shape).astype(np.float32))


def motion_kernel(length: int, angle_deg: float = 0.0) -> np.ndarray:
    length = max(1, int(length))
    k = np.zeros((length, length), dtype=np.float32)
    k[length // 2, :] = 1.0
    rot = cv2.getRotationMatrix2D(((length - 1) / 2, (length - 1) / 2), angle_deg, 1.0)
    k = cv2.warpAffine(k, rot, (length, length))
    return k / k.sum()


def render_frame(model: PlantModel, pose: Pose, K: CameraIntrinsics,
                 opts: RenderOptions = RenderOptions(), rng=None) -> np.ndarray:
    """Render an 8-bit grayscale view of the plant."""
    img = np.full(K.shape, float(opts.ground), dtype=np.float32)
    inset = opts.frame_px * opts.ref_distance / K.fx
    order = []
    for m in model.modules:
        depth = pose.transform(m.center)[0, 2]
        if depth > 0:
            order.append((depth, m))
    order.sort(key=lambda item: -item[0])
    w, h = K.width, K.height
    for _, m in order:
        outer = m.corners()
        uv, vis = project_points(outer, pose, K)
        if not vis.all():
            continue
        if uv[:, 0].max() < -2 or uv[:, 0].min() > w + 2 or uv[:, 1].max() < -2 or uv[:, 1].min() > h + 2:
            continue
        cv2.fillConvexPoly(img, _to_fixed(uv), float(opts.frame), cv2.LINE_AA, 4)
        inner = m.corners((-inset, -inset, -inset, -inset))
        uv_in, _ = project_points(inner, pose, K)
        cv2.fillConvexPoly(img, _to_fixed(uv_in), float(opts.cell), cv2.LINE_AA, 4)
    if K.has_distortion:
        mx, my = _distortion_maps(K)
        img = cv2.remap(img, mx, my, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    if opts.glare is not None:
        gx, gy, a, b, ang, peak = opts.glare
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
        c, s = np.cos(np.radians(ang)), np.sin(np.radians(ang))
        dx, dy = xs - gx, ys - gy
        r2 = ((c * dx + s * dy) / a) ** 2 + ((-s * dx + c * dy) / b) ** 2
        img += np.float32(peak) * np.exp(-r2).astype(np.float32)
    if opts.blur_length > 1:
        img = cv2.filter2D(img, -1, motion_kernel(opts.blur_length, opts.blur_angle_deg),
                           borderType=cv2.BORDER_REPLICATE)
    if opts.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(opts.seed)
        img = img + rng.normal(0.0, opts.noise_sigma, img.shape).astype(np.float32)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def visible_modules(model: PlantModel, pose: Pose, K: CameraIntrinsics, margin: float = 2.0,
                    distort: bool = False, cells: bool = False) -> list[str]:
    """Ids of modules whose four corners project inside the image with ``margin``.

    With ``cells`` the test uses the grid-cell corners that the edge detector
    localises instead of the physical module corners.
    """
    out = []
    for m in model.modules:
        pts = module_cell_corners(model, m.id) if cells else m.corners()
        uv, vis = project_points(pts, pose, K, distort=distort)
        if not vis.all():
            continue
        if (uv[:, 0].min() >= margin and uv[:, 1].min() >= margin
                and uv[:, 0].max() <= K.width - 1 - margin and uv[:, 1].max() <= K.height - 1 - margin):
            out.append(m.id)
    return out


def synthetic_boxes(model: PlantModel, pose: Pose, K: CameraIntrinsics, pixel_sigma: float = 0.0,
                    drop_prob: float = 0.0, rng=None, margin: float = 2.0):
    """Oriented boxes a perfect instance segmenter would report, plus their module ids."""
    rng = rng if rng is not None else np.random.default_rng(0)
    boxes, ids = [], []
    for mid in visible_modules(model, pose, K, margin):
        if drop_prob and rng.random() < drop_prob:
            continue
        uv, _ = project_points(model.module(mid).corners(), pose, K)
        if pixel_sigma:
            uv = uv + rng.normal(0.0, pixel_sigma, uv.shape)
        (xc, yc), (bw, bh), ang = cv2.minAreaRect(uv.astype(np.float32))
        boxes.append(OrientedBBox(xc, yc, bw, bh, np.radians(ang), 1.0 - 0.1 * rng.random()))
        ids.append(mid)
    return boxes, ids


@dataclass
class Trajectory:
    """Piecewise-linear camera path flown at constant speed with fixed attitude."""

    waypoints: np.ndarray
    speed: float
    rotation: np.ndarray

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        self.rotation = np.asarray(self.rotation, dtype=float)
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if len(self.waypoints) < 2:
            raise ValueError("trajectory needs at least two waypoints")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    def position_at(self, s: float) -> np.ndarray:
        """Point at arc length ``s`` along the polyline."""
        seg = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = float(np.clip(s, 0.0, cum[-1]))
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        f = (s - cum[i]) / seg[i] if seg[i] > 0 else 0.0
        return self.waypoints[i] + f * (self.waypoints[i + 1] - self.waypoints[i])

    def to_dict(self) -> dict:
        return {"waypoints": self.waypoints.tolist(), "speed": self.speed,
                "rotation": self.rotation.tolist()}


def inspection_trajectory(model: PlantModel, standoff: float = 12.0, speed: float = 0.8,
                          lead: float = 3.0, height_offset: float = 0.0,
                          yaw_deg: float = 0.0) -> Trajectory:
    """Pass along the bench line at ``standoff`` metres in front of the modules.

    The camera looks along the (negated) module normal with image up along
    the module's up-slope axis, i.e. fronto-parallel to the benches.
    """
    m0 = model.modules[0]
    n, v, u = m0.normal, m0.axis_v, m0.axis_u
    centers = np.array([m.center for m in model.modules])
    along = centers @ u
    mid = centers.mean(axis=0)
    base = mid - (mid @ u) * u + standoff * n + height_offset * v
    start = base + (along.min() - lead) * u
    end = base + (along.max() + lead) * u
    fwd = -n
    if yaw_deg:
        c, s = np.cos(np.radians(yaw_deg)), np.sin(np.radians(yaw_deg))
        fwd = c * fwd + s * u
    return Trajectory(np.vstack([start, end]), speed, look_rotation(fwd, v))


@dataclass
class FlightLog:
    timestamps: np.ndarray
    images: list
    gnss_positions: np.ndarray
    gnss_velocities: np.ndarray
    truth: list
    intrinsics: CameraIntrinsics
    gnss_params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.timestamps)

    def image(self, i: int) -> np.ndarray:
        img = self.images[i]
        if isinstance(img, (str, Path)):
            img = cv2.imread(str(img), cv2.IMREAD_GRAYSCALE)
            if img is None:
                raise OSError(f"cannot read frame {self.images[i]}")
        return img


def _segment_hits_module(p, q, m, clearance=0.1) -> bool:
    a, b = np.dot(p - m.center, m.normal), np.dot(q - m.center, m.normal)
    if (a > clearance and b > clearance) or (a < -clearance and b < -clearance):
        return False
    f = 0.5 if abs(a - b) < 1e-12 else np.clip(a / (a - b), 0.0, 1.0)
    x = p + f * (q - p) - m.center
    return (abs(np.dot(x, m.axis_u)) <= m.width / 2 + clearance
            and abs(np.dot(x, m.axis_v)) <= m.height / 2 + clearance)


def simulate_flight(model: PlantModel, trajectory: Trajectory, fps: float,
                    K: CameraIntrinsics = DEFAULT_INTRINSICS,
                    gnss_offset=(0.0, 0.0, 0.0), gnss_drift=(0.0, 0.0, 0.0),
                    gnss_jitter: float = 0.0, render: RenderOptions | None = RenderOptions(),
                    seed: int = 0) -> FlightLog:
    """Fly ``trajectory`` and record frames, truth poses and GNSS.

    GNSS position = truth + offset + drift * t + N(0, jitter^2); velocity is
    derived from the GNSS positions by central differences.
    """
    from .state_filter import derive_velocity

    if fps <= 0:
        raise ValueError("fps must be positive")
    wps = trajectory.waypoints
    for p, q in zip(wps, wps[1:]):
        for m in model.modules:
            if _segment_hits_module(p, q, m):
                raise ValueError(f"trajectory intersects module {m.id}")
    rng = np.random.default_rng(seed)
    duration = trajectory.length / trajectory.speed
    n = int(np.floor(duration * fps + 1e-9)) + 1
    ts = np.arange(n) / fps
    R = trajectory.rotation
    truth = [Pose.from_center(R, trajectory.position_at(t * trajectory.speed)) for t in ts]
    pos = np.array([p.center for p in truth])
    offset = np.asarray(gnss_offset, dtype=float)
    drift = np.asarray(gnss_drift, dtype=float)
    gnss = pos + offset + ts[:, None] * drift
    if gnss_jitter > 0:
        gnss = gnss + rng.normal(0.0, gnss_jitter, gnss.shape)
    vel = derive_velocity(gnss, ts) if n >= 2 else np.zeros_like(gnss)
    images = []
    if render is not None:
        for i, pose in enumerate(truth):
            opts = render if render.noise_sigma == 0 else RenderOptions(**{**asdict(render), "seed": seed * 100003 + i})
            images.append(render_frame(model, pose, K, opts))
    params = {"offset": offset.tolist(), "drift": drift.tolist(), "jitter": float(gnss_jitter)}
    return FlightLog(ts, images, gnss, vel, truth, K, params,
                     {"fps": fps, "seed": seed, "trajectory": trajectory.to_dict()})


def save_flight_log(log: FlightLog, out_dir, model: PlantModel | None = None):
    """Write ``frame_%06d.pgm`` files plus ``log.json`` (and ``model.json`` if given)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, t in enumerate(log.timestamps):
        name = f"frame_{i:06d}.pgm"
        if i < len(log.images):
            img = log.image(i)
            if not cv2.imwrite(str(out / name), img):
                raise OSError(f"cannot write {out / name}")
        frames.append({"index": i, "timestamp": float(t), "file": name})
    doc = {
        "version": LOG_VERSION,
        "intrinsics": log.intrinsics.to_dict(),
        "frames": frames,
        "gnss": [{"t": float(t), "position": p.tolist(), "velocity": v.tolist()}
                 for t, p, v in zip(log.timestamps, log.gnss_positions, log.gnss_velocities)],
        "truth": [{"t": float(t), "R": p.R.tolist(), "t_vec": p.t.tolist()}
                  for t, p in zip(log.timestamps, log.truth)],
        "gnss_noise": log.gnss_params,
        "meta": log.meta,
    }
    (out / "log.json").write_text(json.dumps(doc, indent=1))
    if model is not None:
        (out / "model.json").write_text(json.dumps(model.to_dict(), indent=1))


def load_flight_log(path) -> FlightLog:
    root = Path(path)
    doc = json.loads((root / "log.json").read_text())
    if doc.get("version") != LOG_VERSION:
        raise ValueError(f"unsupported flight log version {doc.get('version')!r}")
    ts = np.array([f["timestamp"] for f in doc["frames"]], dtype=float)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("frame timestamps must be strictly increasing")
    images = [root / f["file"] for f in doc["frames"]]
    gnss = np.array([g["position"] for g in doc["gnss"]], dtype=float).reshape(-1, 3)
    vel = np.array([g.get("velocity", [0.0, 0.0, 0.0]) for g in doc["gnss"]], dtype=float).reshape(-1, 3)
    truth = [Pose(np.array(p["R"]), np.array(p["t_vec"])) for p in doc.get("truth", [])]
    if truth and len(truth) != len(ts):
        raise ValueError("flight log needs one truth pose per frame")
    return FlightLog(ts, images, gnss, vel, truth, CameraIntrinsics.from_dict(doc["intrinsics"]),
                     doc.get("gnss_noise", {}), doc.get("meta", {}))
