import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import grid_structure, rot_x
from pvnav.plant_model import (AmbiguousAnchorError, ExtentOverflowError, ModelError, associate_structure,
                               extend_association, load_plant_model, model_from_dict, module_cell_corners,
                               module_world_corners, propagate_association, save_plant_model, transform_model)
from pvnav.structure import BenchEndObservation, GapObservation
from pvnav.synthetic import LayoutSpec, generate_layout


def _module(mid, center, w=1.0, h=2.0, normal=(0, -1, 0), axis_u=(1, 0, 0)):
    return {"id": mid, "center": list(center), "normal": list(normal), "axis_u": list(axis_u),
            "width": w, "height": h}


def minimal_model_dict():
    mods, grid = [], []
    for r in range(2):
        row = []
        for c in range(3):
            mid = f"m{r}{c}"
            mods.append(_module(mid, (1.05 * c, 0.0, -2.05 * r)))
            row.append(mid)
        grid.append(row)
    return {"version": 1, "modules": mods, "benches": [{"id": "B", "grid": grid}], "anchors": []}


def test_minimal_model_counts(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps(minimal_model_dict()))
    model = load_plant_model(path)
    assert len(model.modules) == 6
    corners = np.vstack([module_world_corners(model, m.id) for m in model.modules])
    assert corners.shape == (24, 3)


def test_duplicate_id_rejected():
    d = minimal_model_dict()
    d["modules"][1]["id"] = d["modules"][0]["id"]
    with pytest.raises(ModelError, match="duplicate id"):
        model_from_dict(d)


def test_unknown_module_in_grid_reports_id():
    d = minimal_model_dict()
    d["benches"][0]["grid"][0][0] = "ghost"
    with pytest.raises(ModelError, match="ghost"):
        model_from_dict(d)


def test_unparseable_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ModelError):
        load_plant_model(path)


def test_non_coplanar_row_rejected():
    d = minimal_model_dict()
    d["modules"][2]["center"][1] = 0.5
    with pytest.raises(ModelError, match="coplanar"):
        model_from_dict(d)


def _two_bench_dict(gap_pitch):
    mods, grids = [], []
    x = 0.0
    for b, n in enumerate((4, 3)):
        row = []
        for c in range(n):
            mid = f"b{b}c{c}"
            mods.append(_module(mid, (x, 0.0, 0.0)))
            row.append(mid)
            if c < n - 1:
                x += 1.05
        grids.append({"id": f"b{b}", "grid": [row]})
        x += gap_pitch
    anchors = [{"id": "g", "kind": "bench_gap", "bench": "b0", "row": 0, "between": ["b0c3", "b1c0"]}]
    return {"version": 1, "modules": mods, "benches": grids, "anchors": anchors}


def test_gap_anchor_spacing_rule():
    # the anchor is accepted iff the spacing across it exceeds the stored intra-bench pitch
    model = model_from_dict(_two_bench_dict(2.5))
    a = model.anchor("g")
    c0, c1 = model.module("b0c3").center, model.module("b1c0").center
    pitches = [np.linalg.norm(model.module(f"b0c{i + 1}").center - model.module(f"b0c{i}").center)
               for i in range(3)]
    assert np.linalg.norm(c1 - c0) > max(pitches)
    assert np.allclose(a.position, (c0 + c1) / 2)
    with pytest.raises(ModelError, match="gap spacing"):
        model_from_dict(_two_bench_dict(1.0))


def test_axis_aligned_corners():
    d = {"version": 1, "modules": [_module("a", (0, 0, 0), w=2.0, h=1.0, normal=(0, -1, 0), axis_u=(1, 0, 0))],
         "benches": [{"id": "B", "grid": [["a"]]}], "anchors": []}
    model = model_from_dict(d)
    # axis_v = normal x axis_u = (0,-1,0) x (1,0,0) = (0,0,1)
    expected = np.array([(-1, 0, 0.5), (1, 0, 0.5), (1, 0, -0.5), (-1, 0, -0.5)], dtype=float)
    assert np.allclose(module_world_corners(model, "a"), expected)


def test_tilted_corners_follow_rotation_oracle():
    R = rot_x(np.radians(30))
    flat = model_from_dict({"version": 1, "modules": [_module("a", (0, 0, 0), w=2.0, h=1.0)],
                            "benches": [{"id": "B", "grid": [["a"]]}], "anchors": []})
    tilted = transform_model(flat, R, np.zeros(3))
    assert np.allclose(module_world_corners(tilted, "a"), module_world_corners(flat, "a") @ R.T)


def test_corner_invariants_on_generated_layout():
    model = generate_layout(LayoutSpec(benches=2, rows=3, columns=4, tilt_deg=17.0))
    for m in model.modules:
        assert abs(m.normal @ m.axis_u) < 1e-12
        c = module_world_corners(model, m.id)
        assert np.allclose(c.mean(axis=0), m.center)
        assert np.isclose(np.linalg.norm(c[1] - c[0]), m.width)
        assert np.isclose(np.linalg.norm(c[3] - c[0]), m.height)


def test_cell_corners_split_the_gaps():
    model = generate_layout(LayoutSpec(benches=1, rows=2, columns=3, pitch=1.1, module_width=1.0))
    inner = module_cell_corners(model, "b0r0c1")
    left = module_cell_corners(model, "b0r0c0")
    # neighbouring cells share their common edge in the middle of the 0.1 m gap
    assert np.allclose(inner[0], left[1])
    # the bench boundary keeps the physical corner
    assert np.allclose(left[0][0], module_world_corners(model, "b0r0c0")[0][0])


def test_save_and_load_round_trip(tmp_path):
    model = generate_layout(LayoutSpec(benches=2, rows=2, columns=3))
    save_plant_model(model, tmp_path / "m.json")
    again = load_plant_model(tmp_path / "m.json")
    assert [m.id for m in again.modules] == [m.id for m in model.modules]
    assert [a.id for a in again.anchors] == [a.id for a in model.anchors]


# -- association --------------------------------------------------------------

def _layout():
    return generate_layout(LayoutSpec(benches=2, rows=2, columns=(21, 10)))


def test_bench_end_at_seq_zero_is_offset_free():
    model = _layout()
    st_ = grid_structure(2, 6)
    obs = BenchEndObservation(0, "start", 0, (100.0, 100.0))
    amap = associate_structure(st_, obs, model, hint="end-b0r0-start")
    for r in range(2):
        for k in range(6):
            assert amap.mapping[(r, k)] == f"b0r{r}c{k}"


def test_gap_between_seq_5_and_6_maps_to_column_20():
    model = _layout()
    st_ = grid_structure(1, 10, skip={(0, 6)})
    st_ = st_.with_gaps([(5, 7)])
    obs = GapObservation(0, 5, 7, (0.0, 0.0), 0.2, 0.5)
    amap = associate_structure(st_, obs, model)
    # oracle: walk the model column sequence; the gap follows column 20 of bench 0
    row = model.row_sequence(0)
    g = row.index("b0r0c20")
    assert amap.mapping[(0, 5)] == row[g]
    assert amap.mapping[(0, 7)] == row[g + 1] == "b1r0c0"
    assert amap.mapping[(0, 0)] == row[g - 5]


def test_extent_overflow():
    model = _layout()
    st_ = grid_structure(4, 3)
    with pytest.raises(ExtentOverflowError):
        associate_structure(st_, BenchEndObservation(0, "start", 0, (0.0, 0.0)), model, hint="end-b0r0-start")


def test_ambiguous_without_hint():
    model = _layout()
    with pytest.raises(AmbiguousAnchorError):
        associate_structure(grid_structure(2, 3), BenchEndObservation(0, "start", 0, (0.0, 0.0)), model)


def test_propagation_and_extension_agree_on_clean_structure():
    model = _layout()
    st_ = grid_structure(2, 5)
    known = {(0, 2): "b0r0c7"}
    p = propagate_association(st_, known, model)
    e = extend_association(st_, known, model)
    assert p.mapping == e.mapping
    assert e.mapping[(1, 4)] == "b0r1c9"


@given(st.integers(2, 4), st.integers(1, 3), st.integers(3, 12), st.integers(1, 8), st.data())
def test_association_injective_and_existing(benches, rows, cols, width, data):
    model = generate_layout(LayoutSpec(benches=benches, rows=rows, columns=cols))
    st_ = grid_structure(data.draw(st.integers(1, rows)), width)
    ends = [a for a in model.anchors if a.kind == "bench_end" and a.row == 0]
    anchor = data.draw(st.sampled_from(ends))
    seq = 0 if anchor.side == "start" else width - 1
    try:
        amap = associate_structure(st_, BenchEndObservation(0, anchor.side, seq, (0.0, 0.0)), model,
                                   hint=anchor.id)
    except ExtentOverflowError:
        return
    ids = list(amap.mapping.values())
    assert len(ids) == len(set(ids))
    for mid in ids:
        model.module(mid)
