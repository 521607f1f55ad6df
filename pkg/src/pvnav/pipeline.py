"""End-to-end replay of a flight: detection, structure, anchors and tracking,
model association, EPnP and the gated Kalman filter, plus the run report."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .anchors import (FlowParams, GapParams, TrackSet, detect_bench_ends, detect_bench_gaps,
                      estimate_flow, track_modules, track_shifts)
from .bbox_structure import load_detections, structure_from_boxes, structure_from_modules
from .camera import (CameraIntrinsics, Pose, angular_distance, project_points, rotation_to_ypr,
                     undistort_pixels, ypr_to_rotation)
from .edge_detector import EdgeParams, detect_modules, undistort
from .plant_model import (AmbiguousAnchorError, ExtentOverflowError, PlantModel, associate_structure,
                          extend_association, load_plant_model, module_cell_corners,
                          module_world_corners)
from .pose import CorrespondenceSet, PnPError, solve_epnp
from .state_filter import (FilterState, GateConfig, Measurement, compute_th_r, deviation,
                           initial_state, pnp_weight, predict, update)
from .synthetic import (PPA_LIKE, PPB_LIKE, DEFAULT_INTRINSICS, FlightLog, LayoutSpec, RenderOptions,
                        generate_layout, inspection_trajectory, load_flight_log, save_flight_log,
                        simulate_flight, synthetic_boxes)


log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid run or simulation configuration."""


class InitializationError(RuntimeError):
    """The hinted anchor was never confirmed, so no association could start."""


# -- configuration ----------------------------------------------------------------

PRESETS = {"ppa": PPA_LIKE, "ppb": PPB_LIKE}


def _build(cls, data, what):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{what} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


@dataclass(frozen=True)
class SimulationSpec:
    """Everything needed to synthesise a flight log."""

    layout: LayoutSpec = PPA_LIKE
    standoff: float = 12.0
    speed: float = 3.0
    lead: float = 3.0
    height_offset: float = 0.0
    yaw_deg: float = 0.0
    fps: float = 10.0
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    gnss_offset: tuple = (0.0, 0.0, 0.0)
    gnss_drift: tuple = (0.0, 0.0, 0.0)
    gnss_jitter: float = 0.0
    render: RenderOptions = RenderOptions()
    box_sigma: float = 0.0  # pixel noise of the synthetic oriented boxes
    box_drop: float = 0.0
    seed: int = 0


def simulation_from_dict(data: dict) -> SimulationSpec:
    if not isinstance(data, dict):
        raise ConfigError("simulation spec must be an object")
    data = dict(data)
    layout = data.pop("layout", None)
    if isinstance(layout, str):
        if layout not in PRESETS:
            raise ConfigError(f"unknown layout preset {layout!r}")
        layout = PRESETS[layout]
    elif isinstance(layout, dict):
        layout = dict(layout)
        base = PRESETS.get(layout.pop("preset", "ppa"))
        if base is None:
            raise ConfigError("unknown layout preset")
        merged = {**asdict(base), **layout}
        layout = _build(LayoutSpec, merged, "layout")
    elif layout is None:
        layout = PPA_LIKE
    else:
        raise ConfigError("layout must be a preset name or an object")
    render = _build(RenderOptions, data.pop("render", None), "render")
    intr = data.pop("intrinsics", None)
    try:
        K = DEFAULT_INTRINSICS if intr is None else CameraIntrinsics.from_dict(intr)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid intrinsics: {exc}") from exc
    spec = _build(SimulationSpec, data, "simulation")
    spec = replace(spec, layout=layout, render=render, intrinsics=K)
    if spec.fps <= 0 or spec.speed <= 0 or spec.standoff <= 0:
        raise ConfigError("fps, speed and standoff must be positive")
    return spec


def simulate(spec: SimulationSpec):
    """Model, flight log and (possibly empty) synthetic box detections for ``spec``."""
    try:
        model = generate_layout(spec.layout)
        traj = inspection_trajectory(model, spec.standoff, spec.speed, spec.lead, spec.height_offset,
                                     spec.yaw_deg)
        log = simulate_flight(model, traj, spec.fps, spec.intrinsics, spec.gnss_offset, spec.gnss_drift,
                              spec.gnss_jitter, spec.render, spec.seed)
    except ValueError as exc:
        raise ConfigError(f"cannot simulate: {exc}") from exc
    rng = np.random.default_rng(spec.seed + 7919)
    boxes = {}
    for i, pose in enumerate(log.truth):
        b, _ = synthetic_boxes(model, pose, spec.intrinsics, spec.box_sigma, spec.box_drop, rng)
        boxes[i] = b
    return model, log, boxes


def write_simulation(spec: SimulationSpec, out_dir) -> Path:
    """Simulate and save a flight log directory with ``model.json`` and ``detections.json``."""
    from .bbox_structure import save_detections

    model, log, boxes = simulate(spec)
    out = Path(out_dir)
    save_flight_log(log, out, model)
    save_detections(out / "detections.json", boxes)
    return out


@dataclass(frozen=True)
class FilterConfig:
    sigma: float = 0.16
    th_d: float = 10.0
    w_vel: float = 1.0
    th_r: float | None = None  # fixed reprojection threshold; calibrated when None
    calibration_frames: int = 10
    per_axis: bool = False


@dataclass(frozen=True)
class TrackingConfig:
    match_fraction: float = 0.25  # of the representative module short side
    max_missing: int = 5


@dataclass(frozen=True)
class AnchorConfig:
    confirm_frames: int = 3
    max_init_frames: int = 200
    end_margin: float | None = None
    reacquire_after: int = 10  # frames without association before searching anchors again


@dataclass
class RunConfig:
    """Replay configuration (one JSON file)."""

    flight: Path | None = None
    synthetic: SimulationSpec | None = None
    model: Path | None = None
    detector: str = "edge"
    edge: EdgeParams = field(default_factory=EdgeParams)
    bbox_file: Path | None = None
    expected_distance: float = 12.0
    fps: float | None = None
    anchor_hint: str | None = None
    direction: int = 1
    min_modules: int = 2
    filter: FilterConfig = FilterConfig()
    tracking: TrackingConfig = TrackingConfig()
    anchors: AnchorConfig = AnchorConfig()
    gaps: GapParams = GapParams()
    flow: FlowParams = FlowParams()
    output: Path | None = None
    seed: int = 0

    def validate(self):
        if (self.flight is None) == (self.synthetic is None):
            raise ConfigError("exactly one input (flight or synthetic) is required")
        if self.detector not in ("edge", "bbox"):
            raise ConfigError(f"unknown detector {self.detector!r}")
        if self.fps is not None and not self.fps > 0:
            raise ConfigError("fps must be positive")
        if self.direction not in (1, -1):
            raise ConfigError("direction must be +1 or -1")
        if not self.expected_distance > 0:
            raise ConfigError("expected_distance must be positive")
        if self.min_modules < 1:
            raise ConfigError("min_modules must be at least 1")
        try:
            GateConfig(self.filter.sigma, 1.0, self.filter.th_d, self.filter.w_vel)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.filter.th_r is not None and not self.filter.th_r > 0:
            raise ConfigError("th_r must be positive")
        return self


RUN_KEYS = {"flight", "synthetic", "model", "detector", "expected_distance", "fps", "anchor_hint",
            "direction", "min_modules", "filter", "tracking", "anchors", "gaps", "flow", "output", "seed"}


def config_from_dict(data: dict, base_dir=".") -> RunConfig:
    """Parse a run configuration; relative paths are resolved against ``base_dir``."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    base = Path(base_dir)

    def path(v):
        if v is None:
            return None
        if not isinstance(v, str):
            raise ConfigError("paths must be strings")
        p = Path(v)
        return p if p.is_absolute() else base / p

    det = data.get("detector", {"edge": {}})
    if isinstance(det, str):
        det = {det: {}}
    if not isinstance(det, dict):
        raise ConfigError("detector must be an object")
    sources = [k for k in ("edge", "bbox_file") if k in det]
    if sorted(det) != sorted(sources):
        raise ConfigError(f"unknown detector keys: {sorted(set(det) - set(sources))}")
    if len(sources) != 1:
        raise ConfigError("exactly one detector source (edge or bbox_file) is required")
    cfg = RunConfig()
    if "edge" in det:
        edge = det["edge"] or {}
        cfg.detector = "edge"
        cfg.edge = _build(EdgeParams, edge, "edge detector")
    else:
        cfg.detector = "bbox"
        cfg.bbox_file = path(det["bbox_file"])
    cfg.flight = path(data.get("flight"))
    if "synthetic" in data:
        cfg.synthetic = simulation_from_dict(data["synthetic"])
    cfg.model = path(data.get("model"))
    cfg.output = path(data.get("output"))
    for key in ("expected_distance", "fps", "anchor_hint", "direction", "min_modules", "seed"):
        if key in data:
            setattr(cfg, key, data[key])
    cfg.filter = _build(FilterConfig, data.get("filter"), "filter")
    cfg.tracking = _build(TrackingConfig, data.get("tracking"), "tracking")
    cfg.anchors = _build(AnchorConfig, data.get("anchors"), "anchors")
    cfg.gaps = _build(GapParams, data.get("gaps"), "gaps")
    cfg.flow = _build(FlowParams, data.get("flow"), "flow")
    return cfg.validate()


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data, p.parent)


# -- replay -----------------------------------------------------------------------

def select_frames(timestamps, fps: float | None) -> list[int]:
    """Indices of the frames kept when the stream is limited to ``fps``."""
    ts = np.asarray(timestamps, dtype=float)
    if fps is None or len(ts) == 0:
        return list(range(len(ts)))
    keep, last = [0], ts[0]
    step = 1.0 / fps
    for i in range(1, len(ts)):
        if ts[i] - last >= step - 1e-9:
            keep.append(i)
            last = ts[i]
    return keep


def pose_from_state(state: FilterState) -> Pose:
    return Pose.from_center(ypr_to_rotation(state.orientation), state.position)


def associate_by_projection(structure, model: PlantModel, pose: Pose, K: CameraIntrinsics,
                            threshold: float, cell_corners: bool = True) -> dict:
    """``(row, seq) -> module id`` for detections lying close to a projected module center."""
    ids = [m.id for m in model.modules]
    pts = []
    for mid in ids:
        c = module_cell_corners(model, mid) if cell_corners else module_world_corners(model, mid)
        pts.append(c.mean(axis=0))
    uv, vis = project_points(np.array(pts), pose, K)
    out = {}
    for det in structure.detections:
        if det.row < 0:
            continue
        d = np.linalg.norm(uv - np.asarray(det.center, float), axis=1)
        d[~vis] = np.inf
        j = int(np.argmin(d))
        if d[j] < threshold:
            out[(det.row, det.seq)] = ids[j]
    return out


@dataclass
class RunReport:
    rows: list
    aggregates: dict
    timings: list = field(default_factory=list)


REPORT_COLUMNS = [
    "frame", "timestamp", "status", "n_detections", "n_associated", "anchor",
    "pnp_x", "pnp_y", "pnp_z", "pnp_yaw", "pnp_pitch", "pnp_roll", "eps_r", "eps_d", "w_pnp", "gated",
    "kf_x", "kf_y", "kf_z", "kf_vx", "kf_vy", "kf_vz", "kf_yaw", "kf_pitch", "kf_roll",
    "gnss_x", "gnss_y", "gnss_z", "truth_x", "truth_y", "truth_z",
    "err_pnp", "err_kf", "err_gnss", "ang_kf_deg",
]

STAGES = ("detection", "tracking", "association", "pnp", "filter")


class _Stopwatch:
    def __init__(self):
        self.t = {s: 0.0 for s in STAGES}

    def add(self, stage, since):
        now = time.perf_counter()
        self.t[stage] += (now - since) * 1e3
        return now


class Replay:
    """Sequential per-flight state: tracks, association, th_r calibration and the filter."""

    def __init__(self, cfg: RunConfig, model: PlantModel, log: FlightLog, boxes=None):
        self.cfg, self.model, self.log = cfg, model, log
        self.K = log.intrinsics
        self.K0 = self.K.without_distortion()
        self.boxes = boxes or {}
        W = float(np.median([m.width for m in model.modules]))
        H = float(np.median([m.height for m in model.modules]))
        # expected module size in pixels at the planned distance
        self.expected_px = (self.K.fx * W / cfg.expected_distance, self.K.fy * H / cfg.expected_distance)
        self.edge = replace(cfg.edge, expected_size=cfg.edge.expected_size or self.expected_px)
        self.tracks = TrackSet()
        self.prev_img = None
        self.initialized = False
        self.anchor_id = None
        self.confirm = []
        self.lost = 0
        self.init_frame = None
        self.eps_samples = []
        self.th_r = cfg.filter.th_r
        self.state: FilterState | None = None
        self.corner_cache = {}

    # structure ------------------------------------------------------------
    def detect(self, i, img):
        if self.cfg.detector == "edge":
            res = detect_modules(img, self.K, self.edge)
            work = undistort(img, self.K)
            st = structure_from_modules(res.modules, self.cfg.direction, img.shape[:2])
        else:
            work = img
            boxes = self.boxes.get(i, [])
            exp = (max(self.expected_px), min(self.expected_px))
            st = structure_from_boxes(boxes, img.shape[:2], exp, self.cfg.direction, seed=self.cfg.seed)
        gaps = detect_bench_gaps(st, work, self.cfg.gaps) if st.detections else []
        st = st.with_gaps([(g.seq_before, g.seq_after) for g in gaps])
        return st, work, gaps

    def world_corners(self, mid):
        if mid not in self.corner_cache:
            if self.cfg.detector == "edge":
                self.corner_cache[mid] = module_cell_corners(self.model, mid)
            else:
                self.corner_cache[mid] = module_world_corners(self.model, mid)
        return self.corner_cache[mid]

    # tracking -------------------------------------------------------------
    def track(self, st, work):
        if self.prev_img is not None and self.tracks.tracks:
            disp, valid = estimate_flow(self.prev_img, work, self.tracks.all_points(), self.cfg.flow)
            shifts = track_shifts(self.tracks, disp, valid)
        else:
            shifts = [None] * len(self.tracks.tracks)
        short = min(st.rep_dims) if st.rep_dims else min(self.expected_px)
        self.tracks = track_modules(self.tracks, shifts, st.detections,
                                    self.cfg.tracking.match_fraction * short, self.cfg.tracking.max_missing)
        self.prev_img = work

    # association ----------------------------------------------------------
    def _try_anchor(self, st, gaps):
        ends = detect_bench_ends(st, self.cfg.anchors.end_margin)
        for obs in list(gaps) + list(ends):
            try:
                amap = associate_structure(st, obs, self.model, self.cfg.anchor_hint)
            except (AmbiguousAnchorError, ExtentOverflowError, ValueError):
                continue
            if amap.valid:
                return amap
        return None

    def associate(self, st, gaps):
        by_track = self.tracks.by_id()
        if not self.initialized:
            amap = self._try_anchor(st, gaps)
            if amap is None:
                self.confirm = []
                return None, None
            self.confirm = (self.confirm + [amap.anchor])[-self.cfg.anchors.confirm_frames:]
            if len(self.confirm) < self.cfg.anchors.confirm_frames or len(set(self.confirm)) != 1:
                return None, None
            self.initialized = True
            self.anchor_id = amap.anchor
            log.info("anchor %s confirmed, %d detections associated", amap.anchor, len(amap.mapping))
            mapping = amap.mapping
            label = amap.anchor
        else:
            known = {}
            for det in st.detections:
                t = by_track.get(det.track_id)
                if t is not None and t.module_id is not None:
                    known[(det.row, det.seq)] = t.module_id
            if not known and self.state is not None:
                short = min(st.rep_dims) if st.rep_dims else min(self.expected_px)
                known = associate_by_projection(st, self.model, pose_from_state(self.state), self.K0,
                                                0.5 * short, self.cfg.detector == "edge")
            amap = extend_association(st, known, self.model) if known else None
            if amap is None or not amap.valid:
                self.lost += 1
                if self.lost > self.cfg.anchors.reacquire_after and self.state is None:
                    log.info("association lost for %d frames, searching anchors again", self.lost)
                    self.initialized = False
                    self.confirm = []
                return None, None
            mapping, label = amap.mapping, "tracked"
        self.lost = 0
        for det in st.detections:
            mid = mapping.get((det.row, det.seq))
            t = by_track.get(det.track_id)
            if mid is not None and t is not None:
                t.module_id = mid
        return mapping, label

    # pose -----------------------------------------------------------------
    def solve(self, st, mapping):
        img_pts, world = [], []
        for det in st.detections:
            mid = mapping.get((det.row, det.seq))
            if mid is None or det.corners is None:
                continue
            img_pts.append(np.asarray(det.corners, float))
            world.append(self.world_corners(mid))
        if len(img_pts) < self.cfg.min_modules:
            return None
        ip = np.vstack(img_pts)
        if self.cfg.detector == "bbox" and self.K.has_distortion:
            ip = undistort_pixels(ip, self.K)
        try:
            return solve_epnp(CorrespondenceSet(ip, np.vstack(world)), self.K0)
        except PnPError:
            return None

    def gate(self) -> GateConfig:
        f = self.cfg.filter
        th_r = self.th_r if self.th_r is not None else (compute_th_r(self.eps_samples) if self.eps_samples else np.inf)
        th_r = th_r if np.isfinite(th_r) and th_r > 0 else 1e12
        return GateConfig(f.sigma, th_r, f.th_d, f.w_vel, f.per_axis)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if not np.isfinite(v):
            return ""
        return f"{float(v):.6f}"
    return str(v)


def run_replay(cfg: RunConfig, model: PlantModel | None = None, log: FlightLog | None = None,
               boxes: dict | None = None) -> RunReport:
    """Replay a flight; ``model``/``log``/``boxes`` override what ``cfg`` points to."""
    cfg.validate()
    if log is None:
        if cfg.synthetic is not None:
            model_s, log, boxes_s = simulate(cfg.synthetic)
            model = model or model_s
            boxes = boxes if boxes is not None else boxes_s
        else:
            try:
                log = load_flight_log(cfg.flight)
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"cannot load flight log: {exc}") from exc
    if model is None:
        mpath = cfg.model or (Path(cfg.flight) / "model.json" if cfg.flight else None)
        if mpath is None:
            raise ConfigError("no plant model given")
        try:
            model = load_plant_model(mpath)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load plant model: {exc}") from exc
    if cfg.anchor_hint is not None:
        try:
            model.anchor(cfg.anchor_hint)
        except KeyError as exc:
            raise ConfigError(f"anchor hint {cfg.anchor_hint!r} not in the model") from exc
    if cfg.detector == "bbox" and boxes is None:
        if cfg.bbox_file is None:
            raise ConfigError("bbox detector needs a detection file")
        try:
            boxes = load_detections(cfg.bbox_file)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    rp = Replay(cfg, model, log, boxes)
    rows, timings = [], []
    frames = select_frames(log.timestamps, cfg.fps)
    for k, i in enumerate(frames):
        sw = _Stopwatch()
        t0 = time.perf_counter()
        t = float(log.timestamps[i])
        img = log.image(i)
        st, work, gaps = rp.detect(i, img)
        t0 = sw.add("detection", t0)
        rp.track(st, work)
        t0 = sw.add("tracking", t0)
        mapping, label = rp.associate(st, gaps)
        if mapping is not None and rp.init_frame is None:
            rp.init_frame = i
        if rp.init_frame is None and k + 1 >= cfg.anchors.max_init_frames:
            raise InitializationError(
                f"anchor {cfg.anchor_hint or '(any)'} not confirmed within {k + 1} processed frames "
                f"(last frame: {len(st.detections)} detections, {len(gaps)} gaps)")
        t0 = sw.add("association", t0)
        est = rp.solve(st, mapping) if mapping else None
        t0 = sw.add("pnp", t0)

        status = "ok"
        if not st.detections:
            status = "no_structure"
        elif not rp.initialized:
            status = "waiting_anchor"
        elif mapping is None:
            status = "no_association"
        elif est is None:
            status = "no_pnp"

        ypr = None
        if est is not None:
            try:
                ypr = rotation_to_ypr(est.pose.R)
            except ValueError:
                est, status = None, "no_pnp"
        if est is not None and rp.th_r is None:
            if len(rp.eps_samples) < cfg.filter.calibration_frames:
                rp.eps_samples.append(est.reprojection_error)
            if len(rp.eps_samples) >= cfg.filter.calibration_frames:
                rp.th_r = compute_th_r(rp.eps_samples)
        gate = rp.gate()

        eps_d = w = None
        gated = None
        vel = log.gnss_velocities[i]
        if rp.state is None:
            if est is not None:
                rp.state = initial_state(est.position, vel, ypr, t)
                eps_d, w, gated = 0.0, 1.0, False
        else:
            prev = rp.state
            pred = predict(prev, t - prev.timestamp) if t > prev.timestamp else prev
            if est is not None:
                Z = np.concatenate([est.position, vel, ypr])
                meas = Measurement(Z, t, est.reprojection_error, 0.0, True)
                eps_d = float(np.linalg.norm(est.position - prev.position))
                w = pnp_weight(est.reprojection_error, deviation(Z, prev, cfg.filter.per_axis), gate)
                gated = w == 0.0
            else:
                Z = np.concatenate([pred.position, vel, pred.orientation])
                meas = Measurement(Z, t, np.inf, np.inf, False)
            rp.state = update(pred, meas, gate, previous=prev)
        sw.add("filter", t0)

        truth = log.truth[i] if log.truth else None
        row = {"frame": i, "timestamp": t, "status": status, "n_detections": len(st.detections),
               "n_associated": len(mapping) if mapping else 0, "anchor": label or ""}
        if est is not None:
            row.update(zip(["pnp_x", "pnp_y", "pnp_z"], est.position))
            row.update(zip(["pnp_yaw", "pnp_pitch", "pnp_roll"], ypr))
            row.update(eps_r=est.reprojection_error, eps_d=eps_d, w_pnp=w, gated=gated)
        if rp.state is not None:
            row.update(zip(["kf_x", "kf_y", "kf_z"], rp.state.position))
            row.update(zip(["kf_vx", "kf_vy", "kf_vz"], rp.state.velocity))
            row.update(zip(["kf_yaw", "kf_pitch", "kf_roll"], rp.state.orientation))
        row.update(zip(["gnss_x", "gnss_y", "gnss_z"], log.gnss_positions[i]))
        if truth is not None:
            c = truth.center
            row.update(zip(["truth_x", "truth_y", "truth_z"], c))
            row["err_gnss"] = float(np.linalg.norm(log.gnss_positions[i] - c))
            if est is not None:
                row["err_pnp"] = float(np.linalg.norm(est.position - c))
            if rp.state is not None:
                row["err_kf"] = float(np.linalg.norm(rp.state.position - c))
                row["ang_kf_deg"] = float(np.degrees(angular_distance(ypr_to_rotation(rp.state.orientation),
                                                                      truth.R)))
        rows.append({c: row.get(c) for c in REPORT_COLUMNS})
        timings.append({"frame": i, **{s: round(v, 3) for s, v in sw.t.items()},
                        "total": round(sum(sw.t.values()), 3)})

    if rp.init_frame is None:
        raise InitializationError(
            f"anchor {cfg.anchor_hint or '(any)'} not confirmed in {len(frames)} processed frames")
    aggregates = aggregate(rows, cfg.filter.th_d)
    aggregates.update({"th_r": rp.th_r, "th_d": cfg.filter.th_d, "anchor": rp.anchor_id, "init_frame": rp.init_frame,
                       "detector": cfg.detector, "fps_limit": cfg.fps, "n_tracks": rp.tracks.next_id})
    return RunReport(rows, aggregates, timings)


# -- report -----------------------------------------------------------------------

def _num(rows, key):
    return np.array([float(r[key]) for r in rows if r.get(key) not in (None, "")], dtype=float)


def aggregate(rows, th_d: float = 10.0) -> dict:
    """Run-level statistics recomputable from the per-frame rows."""
    n = len(rows)
    pnp = [r for r in rows if r.get("eps_r") not in (None, "")]
    gated = [r for r in pnp if str(r.get("gated")) in ("1", "True")]
    eps_d = _num(rows, "eps_d")
    out = {
        "n_frames": n,
        "n_structure": sum(1 for r in rows if int(r["n_detections"]) > 0),
        "n_pnp": len(pnp),
        "n_gated": len(gated),
        "valid_pnp_pct": 100.0 * len(pnp) / n if n else 0.0,
        "under_th_r_pct": 100.0 * (len(pnp) - len(gated)) / len(pnp) if pnp else 0.0,
        "under_th_d_pct": 100.0 * float(np.mean(eps_d <= th_d)) if eps_d.size else 0.0,
        "median_eps_r": float(np.median(_num(rows, "eps_r"))) if pnp else None,
    }
    for key in ("err_kf", "err_pnp", "err_gnss"):
        v = _num(rows, key)
        out[f"mean_{key}"] = float(v.mean()) if v.size else None
        out[f"p90_{key}"] = float(np.percentile(v, 90)) if v.size else None
    return out


def five_point(values) -> dict:
    """Exact min, quartiles (linear interpolation), median and max."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


def summarize(report: RunReport) -> dict:
    """Five-point statistics of the position errors, reprojection error and orientation error."""
    if not report.rows:
        raise ValueError("empty report")
    out = {}
    for key in ("err_kf", "err_pnp", "err_gnss", "eps_r", "ang_kf_deg"):
        v = _num(report.rows, key)
        if v.size:
            out[key] = five_point(v)
    return out


def time_stages(report: RunReport) -> dict:
    """Mean milliseconds per frame for every stage."""
    if not report.timings:
        return {}
    return {s: float(np.mean([t[s] for t in report.timings])) for s in (*STAGES, "total")}


def report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.rows:
        w.writerow([_fmt(r.get(c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def write_report(report: RunReport, out_dir) -> Path:
    """Write ``report.csv``, ``summary.json``, ``trajectory.dat`` and ``timings.json``.

    Everything except ``timings.json`` is a deterministic function of the inputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(report))
    summary = {"aggregates": report.aggregates, "statistics": summarize(report) if report.rows else {}}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=_json_default))
    cols = ["timestamp", "truth_x", "truth_y", "truth_z", "pnp_x", "pnp_y", "pnp_z",
            "kf_x", "kf_y", "kf_z", "gnss_x", "gnss_y", "gnss_z"]
    lines = ["# " + " ".join(cols)]
    for r in report.rows:
        lines.append(" ".join(_fmt(r.get(c)) or "NaN" for c in cols))
    (out / "trajectory.dat").write_text("\n".join(lines) + "\n")
    (out / "timings.json").write_text(json.dumps({"per_frame": report.timings,
                                                   "mean_ms": time_stages(report)}, indent=1))
    return out


def _parse_cell(col, v):
    if v == "":
        return None
    if col in ("status", "anchor"):
        return v
    if col in ("frame", "n_detections", "n_associated"):
        return int(v)
    if col == "gated":
        return v == "1"
    return float(v)


def load_report(in_dir) -> RunReport:
    """Read a report directory and check its aggregates against the rows."""
    root = Path(in_dir)
    try:
        text = (root / "report.csv").read_text()
        summary = json.loads((root / "summary.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read report: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != REPORT_COLUMNS:
        raise ValueError("unexpected report columns")
    rows = [{c: _parse_cell(c, r[c]) for c in REPORT_COLUMNS} for r in reader]
    aggregates = summary.get("aggregates", {})
    recomputed = aggregate(rows, float(aggregates.get("th_d", 10.0)))
    for key, val in recomputed.items():
        stored = aggregates.get(key)
        if (val is None) != (stored is None) or (val is not None and not np.isclose(val, stored, rtol=1e-6, atol=1e-5)):
            raise ValueError(f"aggregate {key!r} does not match the per-frame rows")
    timings = []
    tpath = root / "timings.json"
    if tpath.exists():
        timings = json.loads(tpath.read_text()).get("per_frame", [])
    return RunReport(rows, aggregates, timings)
