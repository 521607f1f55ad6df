import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pvnav.pipeline import (ConfigError, InitializationError, RunConfig, SimulationSpec, config_from_dict,
                            five_point, load_report, report_csv, run_replay, select_frames, simulate,
                            simulation_from_dict, summarize, time_stages, write_report)
from pvnav.synthetic import LayoutSpec

SMALL = SimulationSpec(layout=LayoutSpec(benches=2, rows=2, columns=8), speed=3.0, fps=10.0,
                       gnss_offset=(3.0, 0.0, 0.0))


@pytest.fixture(scope="module")
def small_sim():
    return simulate(SMALL)


def _run(sim, **kw):
    model, log, boxes = sim
    cfg = RunConfig(synthetic=SMALL, anchor_hint="end-b0r0-start", **kw)
    return run_replay(cfg, model, log, boxes)


# -- configuration ------------------------------------------------------------------------

def test_both_detector_sources_is_a_config_error():
    with pytest.raises(ConfigError, match="exactly one detector"):
        config_from_dict({"synthetic": {}, "detector": {"edge": {}, "bbox_file": "d.json"}})


def test_exactly_one_input():
    with pytest.raises(ConfigError):
        config_from_dict({"detector": "edge"})
    with pytest.raises(ConfigError):
        config_from_dict({"flight": "a", "synthetic": {}})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_dict({"synthetic": {}, "speling": 1})
    with pytest.raises(ConfigError, match="filter"):
        config_from_dict({"synthetic": {}, "filter": {"sigmaa": 0.1}})


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"synthetic": {}, "fps": 0})
    with pytest.raises(ConfigError):
        config_from_dict({"synthetic": {}, "filter": {"sigma": -1}})
    with pytest.raises(ConfigError):
        config_from_dict({"synthetic": {"layout": "nowhere"}})


def test_relative_paths_resolve_against_config_dir(tmp_path):
    cfg = config_from_dict({"flight": "fl", "detector": {"bbox_file": "fl/d.json"}, "output": "out"}, tmp_path)
    assert cfg.flight == tmp_path / "fl" and cfg.bbox_file == tmp_path / "fl" / "d.json"
    assert cfg.detector == "bbox" and cfg.output == tmp_path / "out"


def test_defaults():
    cfg = config_from_dict({"synthetic": {"layout": "ppb"}})
    assert cfg.detector == "edge" and cfg.filter.sigma == 0.16 and cfg.filter.th_d == 10.0
    assert cfg.filter.w_vel == 1.0 and cfg.synthetic.layout.rows == 5


def test_simulation_layout_override():
    spec = simulation_from_dict({"layout": {"preset": "ppa", "columns": 5, "benches": 2}, "fps": 5})
    assert spec.layout.columns == 5 and spec.layout.rows == 2 and spec.fps == 5


# -- frame selection ------------------------------------------------------------------------

@given(st.lists(st.floats(0.001, 0.5), min_size=1, max_size=80), st.floats(0.5, 30))
def test_fps_limiting(steps, fps):
    ts = np.concatenate([[0.0], np.cumsum(steps)])
    keep = select_frames(ts, fps)
    assert keep[0] == 0 and keep == sorted(set(keep))
    assert np.all(np.diff(ts[keep]) >= 1.0 / fps - 1e-9)
    assert select_frames(ts, None) == list(range(len(ts)))


def test_five_fps_from_ten():
    assert select_frames(np.arange(10) / 10.0, 5.0) == [0, 2, 4, 6, 8]


# -- replay -----------------------------------------------------------------------------------

def test_bbox_replay_follows_truth_not_gnss(small_sim):
    rep = _run(small_sim, detector="bbox")
    agg = rep.aggregates
    assert agg["valid_pnp_pct"] >= 95.0
    assert agg["mean_err_kf"] < 0.05 and agg["mean_err_gnss"] == pytest.approx(3.0)
    assert agg["anchor"] == "end-b0r0-start"


def test_edge_replay(small_sim):
    rep = _run(small_sim)
    agg = rep.aggregates
    assert agg["valid_pnp_pct"] >= 95.0 and agg["mean_err_kf"] < 0.5
    stages = time_stages(rep)
    assert stages["tracking"] <= 10.0 and stages["pnp"] <= 15.0


def test_determinism_and_report_round_trip(small_sim, tmp_path):
    a = _run(small_sim, detector="bbox")
    b = _run(small_sim, detector="bbox")
    assert report_csv(a) == report_csv(b)
    write_report(a, tmp_path / "a")
    write_report(b, tmp_path / "b")
    for name in ("report.csv", "summary.json", "trajectory.dat"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = load_report(tmp_path / "a")
    assert back.aggregates["n_frames"] == len(back.rows) == len(a.rows)
    assert summarize(back)["err_kf"]["median"] == pytest.approx(summarize(a)["err_kf"]["median"], abs=1e-6)


def test_tampered_summary_detected(small_sim, tmp_path):
    write_report(_run(small_sim, detector="bbox"), tmp_path)
    doc = json.loads((tmp_path / "summary.json").read_text())
    doc["aggregates"]["n_pnp"] += 1
    (tmp_path / "summary.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="n_pnp"):
        load_report(tmp_path)


def test_fps_limit_applies_to_replay(small_sim):
    rep = _run(small_sim, detector="bbox", fps=5.0)
    ts = np.array([r["timestamp"] for r in rep.rows])
    assert np.all(np.diff(ts) >= 0.2 - 1e-9) and rep.aggregates["fps_limit"] == 5.0


def test_initialization_failure(small_sim):
    model, log, boxes = small_sim
    cfg = RunConfig(synthetic=SMALL, detector="bbox", anchor_hint="end-b1r0-end")
    cfg.anchors = type(cfg.anchors)(max_init_frames=5)
    with pytest.raises(InitializationError, match="end-b1r0-end"):
        run_replay(cfg, model, log, boxes)


def test_unknown_anchor_hint(small_sim):
    model, log, boxes = small_sim
    with pytest.raises(ConfigError):
        run_replay(RunConfig(synthetic=SMALL, anchor_hint="nope"), model, log, boxes)


def test_five_point_example():
    assert five_point([1, 2, 3, 4, 5]) == {"min": 1, "q1": 2, "median": 3, "q3": 4, "max": 5}
    with pytest.raises(ValueError):
        five_point([])
