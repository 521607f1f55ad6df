"""Power plant model: module geometry, bench layout, anchors and association."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODEL_VERSION = 1


class ModelError(ValueError):
    """Invalid plant model file or invariant violation."""


class AmbiguousAnchorError(ValueError):
    pass


class ExtentOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class PvModule:
    id: str
    center: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    width: float
    height: float

    @property
    def axis_v(self) -> np.ndarray:
        return np.cross(self.normal, self.axis_u)

    def corners(self, grow=(0.0, 0.0, 0.0, 0.0)) -> np.ndarray:
        """TL, TR, BR, BL corners; ``grow`` extends the (left, right, top, bottom) sides."""
        gl, gr, gt, gb = grow
        u, v, c = self.axis_u, self.axis_v, self.center
        left, right = -(self.width / 2 + gl), self.width / 2 + gr
        top, bottom = self.height / 2 + gt, -(self.height / 2 + gb)
        return np.array([c + left * u + top * v, c + right * u + top * v,
                         c + right * u + bottom * v, c + left * u + bottom * v])


@dataclass(frozen=True)
class Bench:
    id: str
    grid: tuple  # tuple of rows, each a tuple of module ids; row 0 is the top row


@dataclass(frozen=True)
class AnchorPoint:
    id: str
    kind: str  # "bench_end" | "bench_gap"
    bench: str
    row: int
    modules: tuple
    position: np.ndarray
    side: str | None = None  # bench_end only: "start" (first column) or "end"


@dataclass(frozen=True)
class PlantModel:
    modules: tuple
    benches: tuple
    anchors: tuple
    frame: str = "local-enu-meters"
    coplanarity_tol: float = 0.05
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        _validate(self)
        self._index.clear()
        self._index["module"] = {m.id: m for m in self.modules}
        self._index["corners"] = {m.id: m.corners() for m in self.modules}
        self._index["cell"] = _grid_cells(self)
        self._index["rows"] = _row_sequences(self)

    def module(self, module_id) -> PvModule:
        try:
            return self._index["module"][str(module_id)]
        except KeyError:
            raise KeyError(f"unknown module id {module_id!r}") from None

    def grid_position(self, module_id) -> tuple[str, int, int]:
        """(bench id, row, column) of a module."""
        return self._index["cell"][str(module_id)]

    def row_sequence(self, row: int) -> list[str]:
        """Module ids of one logical row across all benches, ordered along ``axis_u``."""
        return list(self._index["rows"].get(row, []))

    @property
    def n_rows(self) -> int:
        return max((len(b.grid) for b in self.benches), default=0)

    def bench(self, bench_id) -> Bench:
        for b in self.benches:
            if b.id == str(bench_id):
                return b
        raise KeyError(f"unknown bench id {bench_id!r}")

    def anchor(self, anchor_id) -> AnchorPoint:
        for a in self.anchors:
            if a.id == str(anchor_id):
                return a
        raise KeyError(f"unknown anchor id {anchor_id!r}")

    def to_dict(self) -> dict:
        anchors = []
        for a in self.anchors:
            d = {"id": a.id, "kind": a.kind, "bench": a.bench, "row": a.row}
            if a.kind == "bench_gap":
                d["between"] = list(a.modules)
            else:
                d["module"] = a.modules[0]
                d["side"] = a.side
            anchors.append(d)
        return {
            "version": MODEL_VERSION,
            "frame": self.frame,
            "coplanarity_tolerance": self.coplanarity_tol,
            "modules": [{"id": m.id, "center": m.center.tolist(), "normal": m.normal.tolist(),
                         "axis_u": m.axis_u.tolist(), "width": m.width, "height": m.height}
                        for m in self.modules],
            "benches": [{"id": b.id, "grid": [list(r) for r in b.grid]} for b in self.benches],
            "anchors": anchors,
        }


def _unit(v, what, mid):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if v.shape != (3,) or n < 1e-12:
        raise ModelError(f"module {mid}: invalid {what} vector")
    if abs(n - 1.0) > 1e-6:
        raise ModelError(f"module {mid}: {what} is not a unit vector")
    return v / n


def _validate(model: PlantModel):
    seen = set()
    for m in model.modules:
        if m.id in seen:
            raise ModelError(f"duplicate id {m.id!r}")
        seen.add(m.id)
        if not (m.width > 0 and m.height > 0):
            raise ModelError(f"module {m.id}: width and height must be positive")
        if abs(float(np.dot(m.normal, m.axis_u))) > 1e-6:
            raise ModelError(f"module {m.id}: axis_u not orthogonal to normal")
    placed = set()
    for b in model.benches:
        for row in b.grid:
            for mid in row:
                if mid not in seen:
                    raise ModelError(f"bench {b.id} references unknown module {mid!r}")
                if mid in placed:
                    raise ModelError(f"module {mid!r} placed twice in bench grids")
                placed.add(mid)
    mods = {m.id: m for m in model.modules}
    for b in model.benches:
        for r, row in enumerate(b.grid):
            ref = mods[row[0]]
            for mid in row[1:]:
                off = abs(float(np.dot(mods[mid].center - ref.center, ref.normal)))
                if off > model.coplanarity_tol:
                    raise ModelError(f"module {mid}: bench {b.id} row {r} not coplanar "
                                     f"({off:.3f} m > {model.coplanarity_tol} m)")
    for a in model.anchors:
        for mid in a.modules:
            if mid not in seen:
                raise ModelError(f"anchor {a.id} references unknown module {mid!r}")
        if a.kind == "bench_gap":
            _check_gap(model, a, mods)
        elif a.kind != "bench_end":
            raise ModelError(f"anchor {a.id}: unknown kind {a.kind!r}")


def _intra_bench_pitch(model, row, mods) -> float:
    steps = []
    for b in model.benches:
        if row < len(b.grid):
            ids = b.grid[row]
            steps += [np.linalg.norm(mods[q].center - mods[p].center) for p, q in zip(ids, ids[1:])]
    return float(np.median(steps)) if steps else 0.0


def _check_gap(model, a, mods):
    if len(a.modules) != 2:
        raise ModelError(f"anchor {a.id}: bench_gap needs two modules")
    rows = []
    for mid in a.modules:
        for b in model.benches:
            for r, row in enumerate(b.grid):
                if mid in row:
                    rows.append(r)
    if len(rows) != 2 or rows[0] != rows[1] or rows[0] != a.row:
        raise ModelError(f"anchor {a.id}: gap modules must lie in row {a.row}")
    spacing = np.linalg.norm(mods[a.modules[1]].center - mods[a.modules[0]].center)
    pitch = _intra_bench_pitch(model, a.row, mods)
    if not spacing > pitch:
        raise ModelError(f"anchor {a.id}: gap spacing {spacing:.3f} m not larger than "
                         f"module pitch {pitch:.3f} m")


def _grid_cells(model):
    cells = {}
    for b in model.benches:
        for r, row in enumerate(b.grid):
            for c, mid in enumerate(row):
                cells[mid] = (b.id, r, c)
    return cells


def _bench_order(model):
    if not model.modules:
        return []
    mods = {m.id: m for m in model.modules}
    u = model.modules[0].axis_u

    def key(b):
        return float(np.dot(mods[b.grid[0][0]].center, u)) if b.grid and b.grid[0] else 0.0

    return sorted(model.benches, key=key)


def _row_sequences(model):
    rows: dict[int, list[str]] = {}
    for b in _bench_order(model):
        for r, row in enumerate(b.grid):
            rows.setdefault(r, []).extend(row)
    return rows


def _anchor_position(kind, mods, ids, side):
    if kind == "bench_gap":
        return (mods[ids[0]].center + mods[ids[1]].center) / 2
    m = mods[ids[0]]
    sign = -1.0 if side == "start" else 1.0
    return m.center + sign * m.width / 2 * m.axis_u


def model_from_dict(data: dict) -> PlantModel:
    if data.get("version") != MODEL_VERSION:
        raise ModelError(f"unsupported model version {data.get('version')!r}")
    modules = []
    for d in data["modules"]:
        mid = str(d["id"])
        modules.append(PvModule(
            mid, np.asarray(d["center"], dtype=float).reshape(3),
            _unit(d["normal"], "normal", mid), _unit(d["axis_u"], "axis_u", mid),
            float(d["width"]), float(d["height"])))
    benches = [Bench(str(b["id"]), tuple(tuple(str(m) for m in row) for row in b["grid"]))
               for b in data.get("benches", [])]
    mods = {m.id: m for m in modules}
    first_last = {}
    for b in benches:
        for row in b.grid:
            if row:
                first_last.setdefault(row[0], set()).add("start")
                first_last.setdefault(row[-1], set()).add("end")
    anchors = []
    for d in data.get("anchors", []):
        kind = d["kind"]
        if kind == "bench_gap":
            ids = tuple(str(m) for m in d["between"])
            side = None
        else:
            ids = (str(d["module"]),)
            side = d.get("side")
            if side is None:
                sides = first_last.get(ids[0], set())
                if len(sides) != 1:
                    raise ModelError(f"anchor {d['id']}: cannot infer bench end side")
                side = sides.pop()
        missing = [m for m in ids if m not in mods]
        if missing:
            raise ModelError(f"anchor {d['id']} references unknown module {missing[0]!r}")
        anchors.append(AnchorPoint(str(d["id"]), kind, str(d["bench"]), int(d["row"]), ids,
                                   _anchor_position(kind, mods, ids, side), side))
    return PlantModel(tuple(modules), tuple(benches), tuple(anchors),
                      data.get("frame", "local-enu-meters"),
                      float(data.get("coplanarity_tolerance", 0.05)))


def load_plant_model(path) -> PlantModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"cannot parse plant model {path}: {exc}") from exc
    try:
        return model_from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed plant model {path}: {exc!r}") from exc


def save_plant_model(model: PlantModel, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=1))


def module_world_corners(model: PlantModel, module_id) -> np.ndarray:
    """Corners TL, TR, BR, BL of a module in world coordinates [m]."""
    model.module(module_id)
    return model._index["corners"][str(module_id)].copy()


def module_cell_corners(model: PlantModel, module_id) -> np.ndarray:
    """Module corners pushed halfway into the gaps towards grid neighbours.

    Edge-based detection localises the lines between adjacent modules at the
    middle of the gap separating them, so these are the world points that
    correspond to detected grid vertices. Sides on the bench boundary keep
    the true module corner.
    """
    m = model.module(module_id)
    bench_id, r, c = model.grid_position(m.id)
    grid = model.bench(bench_id).grid

    def half_gap(other_id, axis, extent):
        if other_id is None:
            return 0.0
        o = model.module(other_id)
        d = abs(float(np.dot(o.center - m.center, axis)))
        return max(0.0, (d - extent(m) / 2 - extent(o) / 2) / 2)

    def at(rr, cc):
        if 0 <= rr < len(grid) and 0 <= cc < len(grid[rr]):
            return grid[rr][cc]
        return None

    w = lambda mod: mod.width  # noqa: E731
    h = lambda mod: mod.height  # noqa: E731
    grow = (half_gap(at(r, c - 1), m.axis_u, w), half_gap(at(r, c + 1), m.axis_u, w),
            half_gap(at(r - 1, c), m.axis_v, h), half_gap(at(r + 1, c), m.axis_v, h))
    return m.corners(grow)


def transform_model(model: PlantModel, R, t) -> PlantModel:
    """Apply the rigid transform ``x -> R x + t`` to every module."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    data = model.to_dict()
    for d in data["modules"]:
        d["center"] = (R @ np.asarray(d["center"]) + t).tolist()
        d["normal"] = (R @ np.asarray(d["normal"])).tolist()
        d["axis_u"] = (R @ np.asarray(d["axis_u"])).tolist()
    return model_from_dict(data)


@dataclass
class AssociationMap:
    """Detection logical coordinates ``(row, seq)`` to model module ids."""

    mapping: dict
    anchor: str | None
    valid: bool
    out_of_extent: list = field(default_factory=list)

    def __len__(self):
        return len(self.mapping)


def _model_side(side, direction):
    if direction > 0:
        return side
    return "end" if side == "start" else "start"


def _anchor_index(model, anchor, direction):
    """Global row-sequence index of the module the observation is aligned to."""
    seq = model.row_sequence(anchor.row)
    if anchor.kind == "bench_end":
        return seq.index(anchor.modules[0])
    a, b = seq.index(anchor.modules[0]), seq.index(anchor.modules[1])
    before, after = min(a, b), max(a, b)
    return before if direction > 0 else after


def associate_structure(structure, anchor_obs, model: PlantModel, hint=None) -> AssociationMap:
    """Align the detected structure with the model through one observed anchor.

    ``hint`` optionally names the model anchor the observation is expected to
    be (the flight plan's initial anchor); without it, more than one candidate
    raises :class:`AmbiguousAnchorError`.
    """
    d = structure.direction
    if anchor_obs.kind == "bench_end":
        side = _model_side(anchor_obs.side, d)
        cands = [a for a in model.anchors if a.kind == "bench_end" and a.row == anchor_obs.row
                 and a.side == side]
    elif anchor_obs.kind == "bench_gap":
        cands = [a for a in model.anchors if a.kind == "bench_gap" and a.row == anchor_obs.row]
    else:
        raise ValueError(f"unknown anchor observation kind {anchor_obs.kind!r}")
    if hint is not None:
        cands = [a for a in cands if a.id == str(hint)]
    if not cands:
        raise ValueError("observed anchor does not match any model anchor")
    if len(cands) > 1:
        raise AmbiguousAnchorError(
            f"{len(cands)} model anchors match the observation: {[a.id for a in cands][:5]}")
    anchor = cands[0]
    rows_in_bench = len(model.bench(anchor.bench).grid)
    if structure.n_rows > rows_in_bench:
        raise ExtentOverflowError(
            f"structure has {structure.n_rows} rows, bench {anchor.bench} has {rows_in_bench}")
    if anchor_obs.kind == "bench_end":
        ref_cs = structure.compact_seq(anchor_obs.seq)
    else:
        ref_cs = structure.compact_seq(anchor_obs.seq_before if d > 0 else anchor_obs.seq_after)
    g0 = _anchor_index(model, anchor, d)
    mapping, flagged = _map_with_offset(structure, model, g0 - d * ref_cs, 0)
    return AssociationMap(mapping, anchor.id, valid=len(mapping) > 0, out_of_extent=flagged)


def _map_with_offset(structure, model, offset, row_offset):
    d = structure.direction
    mapping, flagged, used = {}, [], set()
    for det in structure.detections:
        if det.row < 0:
            continue
        row_ids = model.row_sequence(det.row + row_offset)
        g = offset + d * structure.compact_seq(det.seq)
        key = (det.row, det.seq)
        if 0 <= g < len(row_ids) and row_ids[g] not in used:
            mapping[key] = row_ids[g]
            used.add(row_ids[g])
        else:
            flagged.append(key)
    return mapping, flagged


def propagate_association(structure, known: dict, model: PlantModel) -> AssociationMap | None:
    """Extend known ``(row, seq) -> module id`` pairs to the whole structure.

    The row and sequence offsets are the majority vote over the known pairs,
    so a single mis-tracked detection does not shift the alignment.
    """
    d = structure.direction
    votes = Counter()
    for (row, seq), mid in known.items():
        try:
            _, mrow, _ = model.grid_position(mid)
        except KeyError:
            continue
        row_ids = model.row_sequence(mrow)
        g = row_ids.index(mid)
        votes[(g - d * structure.compact_seq(seq), mrow - row)] += 1
    if not votes:
        return None
    (offset, row_offset), _ = max(votes.items(), key=lambda kv: (kv[1], -abs(kv[0][1]), -kv[0][0]))
    mapping, flagged = _map_with_offset(structure, model, offset, row_offset)
    return AssociationMap(mapping, None, valid=len(mapping) > 0, out_of_extent=flagged)


def extend_association(structure, known: dict, model: PlantModel) -> AssociationMap | None:
    """Keep the known ``(row, seq) -> id`` pairs and place every other detection
    relative to its nearest known neighbour.

    Unlike :func:`propagate_association` the offset is local, so a bench gap
    that was not confirmed in this frame only affects detections beyond it
    that have no tracked neighbour on their own side.
    """
    d = structure.direction
    anchors = []
    for (row, seq), mid in known.items():
        try:
            _, mrow, _ = model.grid_position(mid)
        except KeyError:
            continue
        g = model.row_sequence(mrow).index(mid)
        anchors.append((row, structure.compact_seq(seq), mrow, g))
    if not anchors:
        return None
    mapping, flagged, used = {}, [], set()
    keys = sorted({(det.row, det.seq) for det in structure.detections if det.row >= 0})
    for key in keys:
        mid = known.get(key)
        if mid is not None and mid not in used and mid in model._index["module"]:
            mapping[key] = mid
            used.add(mid)
    for key in keys:
        if key in mapping:
            continue
        row, cs = key[0], structure.compact_seq(key[1])
        ref = min(anchors, key=lambda a: (a[0] != row, abs(a[0] - row), abs(a[1] - cs), a[1], a[0]))
        mrow = ref[2] + (row - ref[0])
        g = ref[3] + d * (cs - ref[1])
        row_ids = model.row_sequence(mrow)
        if 0 <= g < len(row_ids) and row_ids[g] not in used:
            mapping[key] = row_ids[g]
            used.add(row_ids[g])
        else:
            flagged.append(key)
    return AssociationMap(mapping, None, valid=len(mapping) > 0, out_of_extent=flagged)
