import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvcs.traffic.estimation import (TravelTimeTable, build_table, cv_tt, ground_truth_tt,
                                     loop_detector_tt, mape)
from cvcs.traffic.scenarios import run_grid, rows_to_csv, scenario_grid
from cvcs.traffic.sim import Arrival, SimConfig, TrajectoryLog, simulate

FREE = dict(zone_start_miles=None, zone_end_miles=None)
SMALL = SimConfig(road_length_miles=1.0, num_segments=4, interval_s=60.0, horizon_intervals=5,
                  arrival_rate_vph=900.0)


def constant_speed_rows(t0, v_mph, miles, dt=0.1):
    """10 Hz rows of a vehicle at constant speed from x=0 to just past ``miles``."""
    dur = miles / v_mph * 3600.0
    t = t0 + np.arange(0.0, dur + dt, dt)
    return np.column_stack([t, (t - t0) * v_mph / 3600.0, np.full(t.size, v_mph)])


def replay_traversal(t, x, lo, hi):
    """Reference traversal time of [lo, hi) by scanning the log row by row."""
    def cross(mark):
        for i in range(1, len(x)):
            if x[i - 1] < mark <= x[i]:
                return t[i - 1] + (mark - x[i - 1]) / (x[i] - x[i - 1]) * (t[i] - t[i - 1])
        return None
    enter = t[0] if x[0] >= lo else cross(lo)
    return enter, cross(hi) - enter


# ---- simulator ----------------------------------------------------------------

def test_single_vehicle_free_flow_kinematics():
    cfg = SimConfig(horizon_intervals=4, **FREE)
    log_ = simulate(cfg, [Arrival(3.0, 0, 60.0, True)])
    t, x, v = log_.vehicle(0)
    assert t[-1] - t[0] == pytest.approx(5 * 3600 / 60, abs=cfg.dt)
    assert x[-1] >= 5.0 and np.all(v == pytest.approx(60.0))
    assert log_.exited.tolist() == [True]


def test_zero_arrival_rate_gives_empty_log():
    log_ = simulate(SMALL.with_(arrival_rate_vph=0.0))
    assert log_.n_vehicles == 0 and log_.n_rows == 0


@pytest.mark.invariant
def test_simulation_is_deterministic():
    a, b = simulate(SMALL.with_(seed=5)), simulate(SMALL.with_(seed=5))
    assert a.to_csv() == b.to_csv()
    assert a.to_csv() != simulate(SMALL.with_(seed=6)).to_csv()


def test_config_validation():
    for bad in (dict(num_segments=1), dict(horizon_intervals=3), dict(mpr=1.5),
                dict(capture_rate_hz=3.0), dict(obu_capacity=0), dict(compression_ratio=0.0),
                dict(zone_start_miles=1.0, zone_end_miles=None)):
        with pytest.raises(ValueError):
            SimConfig(**bad)


@pytest.mark.invariant
@settings(max_examples=4)
@given(st.integers(0, 10 ** 6))
def test_trajectory_invariants_and_conservation(seed):
    cfg = SMALL.with_(seed=seed, arrival_rate_vph=1500.0)
    log_ = simulate(cfg)
    assert log_.meta["n_spawned"] + log_.n_queued == log_.meta["n_arrivals"]
    assert log_.n_vehicles == log_.meta["n_spawned"]
    assert np.all(log_.speed_mph >= 0)
    for k in range(log_.n_vehicles):
        t, x, _ = log_.vehicle(k)
        assert t.size >= 1 and np.all(np.diff(t) > 0) and np.all(np.diff(x) >= 0)
        if log_.exited[k]:
            assert x[-1] >= cfg.road_length_miles
        else:
            assert t[-1] == pytest.approx(cfg.horizon_s) and x[-1] < cfg.road_length_miles


# ---- ground truth and loop detectors ------------------------------------------

def test_ground_truth_constant_speed():
    cfg = SimConfig(road_length_miles=1.0, num_segments=2, interval_s=60.0, horizon_intervals=4)
    log_ = TrajectoryLog.from_records([constant_speed_rows(0.0, 60.0, 1.0)], [True])
    gr = ground_truth_tt(log_, cfg)
    assert gr[0, 0] == pytest.approx(30.0, abs=1e-6)
    assert gr[1, 0] == pytest.approx(30.0, abs=1e-6)
    assert np.isnan(gr[:, 1:]).all()


def test_ground_truth_mean_of_two_entering_vehicles():
    cfg = SimConfig(road_length_miles=1.0, num_segments=2, interval_s=60.0, horizon_intervals=4)
    log_ = TrajectoryLog.from_records(
        [constant_speed_rows(0.0, 60.0, 1.0), constant_speed_rows(10.0, 30.0, 1.0)], [True, True])
    gr = ground_truth_tt(log_, cfg)
    assert gr[0, 0] == pytest.approx((30.0 + 60.0) / 2, abs=1e-6)


def test_ground_truth_stop_and_go_matches_replay():
    # accelerate, stop for 20 s inside segment 2, then move on
    t = np.arange(0, 200.0, 0.1)
    v = np.where(t < 40, 50.0, np.where(t < 60, 0.0, 25.0))
    x = np.concatenate([[0.0], np.cumsum(v[:-1] * 0.1 / 3600.0)])
    cfg = SimConfig(road_length_miles=1.0, num_segments=3, interval_s=60.0, horizon_intervals=4)
    gr = ground_truth_tt(TrajectoryLog.from_records([np.column_stack([t, x, v])], [False]), cfg)
    seg = 1.0 / 3
    for s in range(3):
        if x[-1] < (s + 1) * seg:
            assert np.isnan(gr[s]).all()
            continue
        enter, tt = replay_traversal(t, x, s * seg, (s + 1) * seg)
        assert gr[s, int(enter // 60)] == pytest.approx(tt, abs=1e-9)


def test_loop_detector_harmonic_mean():
    cfg = SimConfig(road_length_miles=2.0, num_segments=2, interval_s=300.0, horizon_intervals=4)
    log_ = TrajectoryLog.from_records(
        [constant_speed_rows(0.0, 30.0, 2.0), constant_speed_rows(20.0, 60.0, 2.0)], [False, False])
    lp = loop_detector_tt(log_, cfg)
    assert lp[0, 0] == pytest.approx(90.0, rel=1e-9)


def test_loop_detector_uniform_speed():
    cfg = SimConfig(road_length_miles=1.0, num_segments=2, interval_s=60.0, horizon_intervals=4)
    log_ = TrajectoryLog.from_records([constant_speed_rows(0.0, 45.0, 1.0)], [False])
    lp = loop_detector_tt(log_, cfg)
    assert lp[0, 0] == pytest.approx(0.5 / 45 * 3600, rel=1e-9)


# ---- connected-vehicle sources ------------------------------------------------

def test_full_observation_cv_tracks_ground_truth():
    cfg = SimConfig(mpr=1.0, capture_rate_hz=10.0, obu_capacity=10 ** 7, compression_ratio=1.0,
                    arrival_rate_vph=600.0, horizon_intervals=8, seed=2, **FREE)
    log_ = simulate(cfg)
    gr, cv = ground_truth_tt(log_, cfg), cv_tt(log_, cfg, "raw")
    both = ~np.isnan(gr) & ~np.isnan(cv)
    assert both.sum() >= 40
    assert np.max(np.abs(cv[both] / gr[both] - 1)) < 0.05


def test_cs_at_full_ratio_equals_raw():
    cfg = SMALL.with_(mpr=1.0, compression_ratio=1.0, obu_capacity=50, seed=1)
    log_ = simulate(cfg)
    np.testing.assert_array_equal(cv_tt(log_, cfg, "cs"), cv_tt(log_, cfg, "raw"))


def test_no_connected_vehicles_all_missing(caplog):
    cfg = SMALL.with_(mpr=0.0)
    log_ = simulate(cfg)
    with caplog.at_level(logging.WARNING):
        table = build_table(log_, cfg)
    assert table.missing("CV").all() and table.missing("CS").all()
    assert not table.missing("GR").all() and not table.missing("LP").all()
    assert mape(table, "CV") == 1.0 and mape(table, "CS") == 1.0
    assert "no connected vehicles" in caplog.text


def test_cs_cache_reuse_is_exact():
    cfg = SMALL.with_(seed=3, obu_capacity=20)
    log_ = simulate(cfg)
    cache = {}
    first = cv_tt(log_, cfg, "cs", cache=cache)
    again = cv_tt(log_, cfg, "cs", cache=cache)
    fresh = cv_tt(log_, cfg, "cs")
    np.testing.assert_array_equal(first, again)
    np.testing.assert_array_equal(first, fresh)


def test_cv_rejects_unknown_mode():
    with pytest.raises(ValueError):
        cv_tt(simulate(SMALL.with_(arrival_rate_vph=0.0)), SMALL, "fancy")


# ---- MAPE ----------------------------------------------------------------------

def _table(gr, **others):
    gr = np.asarray(gr, dtype=float)
    t = TravelTimeTable(*gr.shape)
    t.set("GR", gr)
    for k, v in others.items():
        t.set(k, v)
    return t


def test_mape_hand_table():
    nan = np.nan
    gr = [[10, 10, 10, 10, 10, 10],
          [100, 100, 100, 50, 40, 80],
          [100, 100, 100, 60, 200, 25]]
    cv = [[99, 99, 99, 99, 99, 99],
          [1, 1, 1, 55, 30, nan],
          [1, 1, 1, 60, 150, 30]]
    # scored cells: 0.10, 0.25, 1 (missing), 0, 0.25, 0.20 -> 1.8 / 6
    assert mape(_table(gr, CV=cv), "CV") == pytest.approx(0.3, abs=1e-15)


def test_mape_single_cell_and_identity():
    gr = np.full((2, 4), np.nan)
    gr[1, 3] = 40.0
    est = gr.copy()
    est[1, 3] = 48.0
    assert mape(_table(gr, LP=est), "LP") == pytest.approx(0.2)
    full = np.full((3, 5), 7.0)
    assert mape(_table(full, CV=full), "CV") == 0.0
    assert mape(_table(full), "GR") == 0.0


def test_mape_empty_range_and_missing_ground_truth():
    small = TravelTimeTable(1, 6)
    small.tt["GR"] = np.ones((1, 6))
    with pytest.raises(ValueError, match="MAPE index range empty"):
        mape(small, "GR")
    short = TravelTimeTable(3, 3)
    short.tt["GR"] = np.ones((3, 3))
    with pytest.raises(ValueError, match="MAPE index range empty"):
        mape(short, "GR")
    t = TravelTimeTable(2, 4)
    t.set("LP", np.ones((2, 4)))
    with pytest.raises(KeyError):
        mape(t, "LP")


def test_table_validation_and_csv():
    t = TravelTimeTable(2, 4)
    with pytest.raises(ValueError):
        t.set("GR", np.zeros((2, 4)))
    with pytest.raises(ValueError):
        t.set("GR", np.ones((3, 4)))
    with pytest.raises(KeyError):
        t.set("XX", np.ones((2, 4)))
    t.set("GR", np.full((2, 4), 30.0))
    lines = t.to_csv().strip().split("\n")
    assert lines[0] == "source,segment,interval,tt_s" and lines[1] == "GR,1,1,30.000000"
    assert len(lines) == 1 + 8


tables = st.tuples(st.integers(2, 6), st.integers(4, 9), st.integers(0, 10 ** 6))


def _random_tables(shape_seed):
    s, t, seed = shape_seed
    rng = np.random.default_rng(seed)
    gr = rng.uniform(20, 200, (s, t))
    est = gr * rng.uniform(0.5, 1.5, (s, t))
    est[rng.random((s, t)) < 0.2] = np.nan
    return gr, est


@pytest.mark.invariant
@given(tables, st.floats(1e-3, 1e3))
def test_mape_scale_invariance(shape_seed, c):
    gr, est = _random_tables(shape_seed)
    assert mape(_table(gr * c, CV=est * c), "CV") == pytest.approx(
        mape(_table(gr, CV=est), "CV"), rel=1e-12)


@pytest.mark.invariant
@given(tables, st.integers(0, 10 ** 6))
def test_mape_index_exclusion(shape_seed, seed):
    gr, est = _random_tables(shape_seed)
    base = mape(_table(gr, CV=est), "CV")
    rng = np.random.default_rng(seed)
    gr2, est2 = gr.copy(), est.copy()
    for arr in (gr2, est2):
        arr[0, :] = rng.uniform(1, 1e4, arr.shape[1])
        arr[:, :3] = rng.uniform(1, 1e4, (arr.shape[0], 3))
    est2[0, 0] = np.nan
    assert mape(_table(gr2, CV=est2), "CV") == base


@pytest.mark.invariant
@given(tables)
def test_mape_of_ground_truth_is_zero(shape_seed):
    gr, _ = _random_tables(shape_seed)
    assert mape(_table(gr), "GR") == 0.0


# ---- scenario grids ------------------------------------------------------------

def test_grid_validates_before_running():
    with pytest.raises(ValueError):
        scenario_grid(SMALL, obu_capacity=[50, 0])
    with pytest.raises(ValueError):
        scenario_grid(SMALL, capture_rate_hz=[10.0, 3.0])
    with pytest.raises(ValueError):
        scenario_grid(SMALL, lanes=[2])
    names = [sc.name for sc in scenario_grid(SMALL, obu_capacity=[50, 100],
                                             capture_rate_hz=[10.0, 1.0])]
    assert names == ["obu_capacity=50;capture_rate_hz=10", "obu_capacity=50;capture_rate_hz=1",
                     "obu_capacity=100;capture_rate_hz=10", "obu_capacity=100;capture_rate_hz=1"]


def test_grid_rows_are_ordered_and_reproducible():
    grid = scenario_grid(SMALL, obu_capacity=[20, 200], capture_rate_hz=[10.0, 1.0])
    rows = run_grid(grid, [0, 1], workers=1)
    assert len(rows) == 4 * 4 * 2
    assert [r.scenario for r in rows[:8]] == [grid[0].name] * 8
    assert [r.source for r in rows[:4]] == ["GR", "GR", "LP", "LP"]
    assert all(r.mape == 0.0 for r in rows if r.source == "GR")
    assert rows_to_csv(rows) == rows_to_csv(run_grid(grid, [0, 1], workers=1))


def test_overloaded_entry_queues_and_warns(caplog):
    cfg = SMALL.with_(arrival_rate_vph=9000.0, horizon_intervals=4)
    with caplog.at_level(logging.WARNING):
        log_ = simulate(cfg)
    assert log_.n_queued > 0
    assert log_.meta["n_spawned"] + log_.n_queued == log_.meta["n_arrivals"]
    assert "demand exceeds entry capacity" in caplog.text


def test_normal_demand_does_not_warn(caplog):
    with caplog.at_level(logging.WARNING):
        simulate(SMALL.with_(seed=4))
    assert "entry capacity" not in caplog.text
