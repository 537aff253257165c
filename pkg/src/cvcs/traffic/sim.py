"""Time-stepped multi-lane freeway simulator.

Longitudinal control is the Intelligent Driver Model (Treiber, Hennecke and
Helbing, 2000).  Lateral moves use a minimal gap-acceptance rule: a vehicle
moves to the adjacent lane when the IDM acceleration it would have there
beats its current one by a threshold and the new follower would not have to
brake harder than ``b_safe``.  An optional reduced-speed zone (a work zone
or curve) lowers every driver's desired speed over a stretch of road; it is
the source of within-segment speed variation.

Vehicles arrive by a Poisson process, are assigned a lane uniformly, and
wait in a per-lane entry queue until there is room to enter at ``x = 0``.
State is logged for every vehicle at every step (10 Hz); a vehicle's final
record lies at or beyond the road end, after which it is removed.

Internal units are metres and metres per second; the log is reported in
miles and mph.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, fields, replace

import numpy as np

log = logging.getLogger(__name__)

MPH = 0.44704  # m/s
MILE = 1609.344  # m

STUCK_WAIT_S = 30.0

__all__ = ["SimConfig", "Arrival", "TrajectoryLog", "simulate", "poisson_arrivals"]


@dataclass(frozen=True)
class SimConfig:
    road_length_miles: float = 5.0
    lanes: int = 2
    num_segments: int = 10
    interval_s: float = 300.0
    horizon_intervals: int = 24
    arrival_rate_vph: float = 1200.0
    mpr: float = 0.6
    capture_rate_hz: float = 10.0
    obu_capacity: int = 100
    compression_ratio: float = 0.2
    seed: int = 0

    # traffic
    dt: float = 0.1
    desired_speed_mph: float = 65.0
    desired_speed_sd_mph: float = 4.0
    zone_start_miles: float | None = 2.3
    zone_end_miles: float | None = 2.8
    zone_speed_mph: float = 35.0
    accel: float = 1.0
    decel: float = 2.0
    headway_s: float = 1.5
    min_gap_m: float = 2.0
    vehicle_len_m: float = 5.0
    delta: float = 4.0
    lane_change_every_s: float = 1.0
    lane_change_gain: float = 0.3
    b_safe: float = 4.0

    # estimation
    cs_block_len: int = 100
    cs_max_iters: int = 30
    cs_rel_tol: float = 1e-2
    missing_penalty: float = 1.0

    def __post_init__(self):
        if self.num_segments < 2:
            raise ValueError("num_segments must be >= 2")
        if self.horizon_intervals < 4:
            raise ValueError("horizon_intervals must be >= 4")
        if self.lanes < 1:
            raise ValueError("lanes must be >= 1")
        if not self.road_length_miles > 0 or not self.interval_s > 0:
            raise ValueError("road length and interval must be positive")
        if self.arrival_rate_vph < 0:
            raise ValueError("arrival rate must be non-negative")
        if not 0.0 <= self.mpr <= 1.0:
            raise ValueError("mpr must lie in [0, 1]")
        if not self.capture_rate_hz > 0:
            raise ValueError("capture rate must be positive")
        stride = (1.0 / self.dt) / self.capture_rate_hz
        if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
            raise ValueError("capture rate must divide the 1/dt log rate")
        if self.obu_capacity < 1:
            raise ValueError("obu_capacity must be >= 1")
        if not 0.0 < self.compression_ratio <= 1.0:
            raise ValueError("compression_ratio must lie in (0, 1]")
        if (self.zone_start_miles is None) != (self.zone_end_miles is None):
            raise ValueError("zone start and end must both be set or both be None")

    @property
    def segment_miles(self) -> float:
        return self.road_length_miles / self.num_segments

    @property
    def horizon_s(self) -> float:
        return self.interval_s * self.horizon_intervals

    @property
    def log_hz(self) -> float:
        return 1.0 / self.dt

    @property
    def capture_stride(self) -> int:
        return int(round(self.log_hz / self.capture_rate_hz))

    def traffic_key(self) -> tuple:
        """Fields that influence the trajectories (not the estimators)."""
        skip = {"capture_rate_hz", "obu_capacity", "compression_ratio", "cs_block_len",
                "cs_max_iters", "cs_rel_tol", "missing_penalty"}
        return tuple((f.name, getattr(self, f.name)) for f in fields(self) if f.name not in skip)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class Arrival:
    time_s: float
    lane: int
    desired_speed_mph: float
    is_cv: bool


def poisson_arrivals(cfg: SimConfig, rng: np.random.Generator) -> list[Arrival]:
    rate = cfg.arrival_rate_vph / 3600.0
    if rate <= 0:
        return []
    n_max = int(rate * cfg.horizon_s + 10 * np.sqrt(rate * cfg.horizon_s) + 10)
    times = np.cumsum(rng.exponential(1.0 / rate, size=n_max))
    times = times[times < cfg.horizon_s]
    n = times.size
    lanes = rng.integers(0, cfg.lanes, size=n)
    v0 = cfg.desired_speed_mph + cfg.desired_speed_sd_mph * rng.standard_normal(n)
    v0 = np.clip(v0, cfg.desired_speed_mph - 3 * cfg.desired_speed_sd_mph,
                 cfg.desired_speed_mph + 3 * cfg.desired_speed_sd_mph)
    cv = rng.random(n) < cfg.mpr
    return [Arrival(float(t), int(l), float(v), bool(c)) for t, l, v, c in zip(times, lanes, v0, cv)]


@dataclass
class TrajectoryLog:
    """Per-vehicle trajectories, rows sorted by (vehicle, time).

    ``offsets[k]:offsets[k+1]`` are the rows of vehicle ``k``; vehicle ids
    are ``0..n_vehicles-1`` in spawn order.
    """

    time_s: np.ndarray
    position_miles: np.ndarray
    speed_mph: np.ndarray
    lane: np.ndarray
    offsets: np.ndarray
    is_cv: np.ndarray
    spawn_time_s: np.ndarray
    exited: np.ndarray
    n_queued: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_vehicles(self) -> int:
        return self.is_cv.size

    @property
    def n_rows(self) -> int:
        return self.time_s.size

    def vehicle(self, k: int):
        sl = slice(self.offsets[k], self.offsets[k + 1])
        return self.time_s[sl], self.position_miles[sl], self.speed_mph[sl]

    def vehicle_slice(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    @classmethod
    def from_records(cls, records, is_cv, spawn_time_s=None, exited=None):
        """Build a log from ``{vehicle_id: [(t, x_miles, v_mph), ...]}``-style input.

        ``records`` is a list (indexed by vehicle) of row sequences; used for
        hand-made logs in tests.
        """
        rows = [np.asarray(r, dtype=float).reshape(-1, 3) for r in records]
        lens = np.array([len(r) for r in rows], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lens)])
        allr = np.concatenate(rows) if rows else np.zeros((0, 3))
        n = len(rows)
        return cls(
            time_s=allr[:, 0], position_miles=allr[:, 1], speed_mph=allr[:, 2],
            lane=np.zeros(allr.shape[0], dtype=np.int8), offsets=offsets,
            is_cv=np.asarray(is_cv, dtype=bool),
            spawn_time_s=(np.asarray(spawn_time_s, dtype=float) if spawn_time_s is not None
                          else np.array([r[0, 0] if len(r) else np.nan for r in rows])),
            exited=(np.asarray(exited, dtype=bool) if exited is not None
                    else np.zeros(n, dtype=bool)))

    def to_csv(self) -> str:
        import io
        buf = io.StringIO()
        buf.write("vehicle_id,time_s,position_miles,speed_mph,lane,is_cv\n")
        for k in range(self.n_vehicles):
            sl = self.vehicle_slice(k)
            cv = int(self.is_cv[k])
            for t, x, v, ln in zip(self.time_s[sl], self.position_miles[sl],
                                   self.speed_mph[sl], self.lane[sl]):
                buf.write(f"{k},{t:.1f},{x:.6f},{v:.4f},{int(ln)},{cv}\n")
        return buf.getvalue()


def _idm(v, v0, gap, dv, cfg: SimConfig):
    free = cfg.accel * (1.0 - (v / v0) ** cfg.delta)
    # a lowered limit is approached at comfortable deceleration, not an emergency stop
    free = np.maximum(free, -cfg.decel)
    s_star = cfg.min_gap_m + np.maximum(
        0.0, v * cfg.headway_s + v * dv / (2.0 * np.sqrt(cfg.accel * cfg.decel)))
    inter = cfg.accel * (s_star / np.maximum(gap, 0.1)) ** 2
    return np.minimum(np.maximum(free - inter, -9.0), cfg.accel)


def simulate(cfg: SimConfig, arrivals: list[Arrival] | None = None) -> TrajectoryLog:
    """Run the simulator for ``cfg.horizon_s`` seconds.

    ``arrivals`` overrides the Poisson demand (used for controlled tests).
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x51]))
    if arrivals is None:
        arrivals = poisson_arrivals(cfg, rng)
    arrivals = sorted(arrivals, key=lambda a: a.time_s)

    dt = cfg.dt
    road = cfg.road_length_miles * MILE
    length = cfg.vehicle_len_m
    n_steps = int(round(cfg.horizon_s / dt))
    zone = None
    if cfg.zone_start_miles is not None:
        zone = (cfg.zone_start_miles * MILE, cfg.zone_end_miles * MILE, cfg.zone_speed_mph * MPH)
    lc_every = max(int(round(cfg.lane_change_every_s / dt)), 1)

    n_arr = len(arrivals)
    is_cv = np.array([a.is_cv for a in arrivals], dtype=bool)
    spawn_time = np.full(n_arr, np.nan)
    exited = np.zeros(n_arr, dtype=bool)
    queues = [deque() for _ in range(cfg.lanes)]

    vid = np.zeros(0, dtype=np.int64)
    x = np.zeros(0)
    v = np.zeros(0)
    lane = np.zeros(0, dtype=np.int64)
    v0 = np.zeros(0)

    chunks_id, chunks_step, chunks_x, chunks_v, chunks_lane = [], [], [], [], []
    next_arr = 0
    n_spawned = 0
    max_queue = 0

    for step in range(n_steps + 1):
        t = step * dt
        while next_arr < n_arr and arrivals[next_arr].time_s <= t + 1e-9:
            queues[arrivals[next_arr].lane].append(next_arr)
            next_arr += 1

        # entry
        for ln in range(cfg.lanes):
            q = queues[ln]
            if not q:
                continue
            in_lane = lane == ln
            a = arrivals[q[0]]
            want = a.desired_speed_mph * MPH
            if in_lane.any():
                j = np.argmin(np.where(in_lane, x, np.inf))
                gap = x[j] - length
                if gap >= cfg.min_gap_m + cfg.headway_s * want:
                    speed = want
                elif gap >= cfg.min_gap_m + cfg.headway_s * min(v[j], want):
                    speed = min(v[j], want)
                else:
                    continue
            else:
                speed = want
            k = q.popleft()
            vid = np.append(vid, k)
            x = np.append(x, 0.0)
            v = np.append(v, speed)
            lane = np.append(lane, ln)
            v0 = np.append(v0, want)
            spawn_time[k] = t
            n_spawned += 1
        max_queue = max(max_queue, sum(len(q) for q in queues))

        if vid.size:
            chunks_id.append(vid.copy())
            chunks_step.append(np.full(vid.size, step, dtype=np.int64))
            chunks_x.append(x.copy())
            chunks_v.append(v.copy())
            chunks_lane.append(lane.astype(np.int8))
            gone = x >= road
            if gone.any():
                exited[vid[gone]] = True
                keep = ~gone
                vid, x, v, lane, v0 = vid[keep], x[keep], v[keep], lane[keep], v0[keep]
        if step == n_steps or vid.size == 0:
            continue

        v0_eff = v0
        if zone is not None:
            inside = (x >= zone[0]) & (x < zone[1])
            v0_eff = np.where(inside, np.minimum(v0, zone[2]), v0)

        order = np.lexsort((x, lane))
        acc = _follow_acc(x, v, lane, v0_eff, order, cfg)
        if cfg.lanes > 1 and step % lc_every == 0:
            moves = (-1, 1) if cfg.lanes == 2 else ((-1,) if step // lc_every % 2 else (1,))
            if _lane_changes(x, v, lane, v0_eff, acc, order, moves, cfg):
                order = np.lexsort((x, lane))
                acc = _follow_acc(x, v, lane, v0_eff, order, cfg)

        v_new = np.maximum(v + acc * dt, 0.0)
        x_new = x + 0.5 * (v + v_new) * dt
        # never pass through the leader in the same lane
        xs_old = x[order]
        xs_new = x_new[order]
        same = lane[order][1:] == lane[order][:-1]
        for _ in range(3):
            limit = xs_new[1:] - length - 0.1
            over = same & (xs_new[:-1] > limit)
            if not over.any():
                break
            xs_new[:-1] = np.where(over, np.maximum(limit, xs_old[:-1]), xs_new[:-1])
        x_fixed = np.empty_like(x_new)
        x_fixed[order] = xs_new
        held = x_fixed < x_new
        if held.any():
            v_new = np.where(held, np.maximum(2.0 * (x_fixed - x) / dt - v, 0.0), v_new)
        x, v = x_fixed, v_new

    unspawned = int(np.isnan(spawn_time).sum())
    arrived = np.array([a.time_s for a in arrivals])
    stuck = int(np.sum(np.isnan(spawn_time) & (arrived < cfg.horizon_s - STUCK_WAIT_S)))
    if stuck:
        log.warning("%d vehicles waited more than %g s at entry and never entered; "
                    "demand exceeds entry capacity", stuck, STUCK_WAIT_S)
    elif max_queue:
        log.debug("entry queue peaked at %d vehicles", max_queue)

    if chunks_id:
        ids = np.concatenate(chunks_id)
        steps = np.concatenate(chunks_step)
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        time_s = steps[order] * dt
        pos = np.concatenate(chunks_x)[order] / MILE
        spd = np.concatenate(chunks_v)[order] / MPH
        lanes = np.concatenate(chunks_lane)[order]
    else:
        ids = np.zeros(0, dtype=np.int64)
        time_s = pos = spd = np.zeros(0)
        lanes = np.zeros(0, dtype=np.int8)

    spawned = ~np.isnan(spawn_time)
    # vehicle index = spawn-order position among spawned arrivals
    arr_ids = np.flatnonzero(spawned)
    arr_ids = arr_ids[np.argsort(spawn_time[arr_ids], kind="stable")]
    remap = np.full(n_arr, -1, dtype=np.int64)
    remap[arr_ids] = np.arange(arr_ids.size)
    new_ids = remap[ids]
    order = np.argsort(new_ids, kind="stable")
    new_ids = new_ids[order]
    counts = np.bincount(new_ids, minlength=arr_ids.size)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return TrajectoryLog(
        time_s=time_s[order], position_miles=pos[order], speed_mph=spd[order],
        lane=lanes[order], offsets=offsets, is_cv=is_cv[arr_ids],
        spawn_time_s=spawn_time[arr_ids], exited=exited[arr_ids], n_queued=unspawned,
        meta={"n_arrivals": n_arr, "n_spawned": n_spawned, "max_queue": max_queue})


def _follow_acc(x, v, lane, v0_eff, order, cfg: SimConfig):
    """IDM acceleration of every vehicle given its same-lane leader."""
    xs, vs, ls = x[order], v[order], lane[order]
    same = ls[1:] == ls[:-1]
    gap = np.full(order.size, np.inf)
    dv = np.zeros(order.size)
    gap[:-1] = np.where(same, xs[1:] - xs[:-1] - cfg.vehicle_len_m, np.inf)
    dv[:-1] = np.where(same, vs[:-1] - vs[1:], 0.0)
    acc = np.empty(order.size)
    acc[order] = _idm(vs, v0_eff[order], gap, dv, cfg)
    return acc


def _lane_changes(x, v, lane, v0_eff, acc, order, moves, cfg: SimConfig) -> bool:
    """Gap-acceptance lane changes, applied in place to ``lane``.

    Returns whether any vehicle moved.
    """
    length = cfg.vehicle_len_m
    free = np.minimum(cfg.accel * (1.0 - (v / v0_eff) ** cfg.delta), cfg.accel)
    cand = np.flatnonzero(acc < free - cfg.lane_change_gain)
    if cand.size == 0:
        return False
    span = 4.0 * cfg.road_length_miles * MILE + 1.0
    keys = lane[order] * span + x[order]
    n = order.size
    best_gain = np.full(cand.size, -np.inf)
    best_lane = lane[cand].copy()
    for d in moves:
        target = lane[cand] + d
        ok = (target >= 0) & (target < cfg.lanes)
        pos = np.searchsorted(keys, target * span + x[cand], side="left")
        lead_ok = ok & (pos < n)
        lead = order[np.minimum(pos, n - 1)]
        lead_ok &= lane[lead] == target
        fol_ok = ok & (pos > 0)
        fol = order[np.maximum(pos - 1, 0)]
        fol_ok &= lane[fol] == target

        g_lead = np.where(lead_ok, x[lead] - x[cand] - length, np.inf)
        dv_lead = np.where(lead_ok, v[cand] - v[lead], 0.0)
        a_new = _idm(v[cand], v0_eff[cand], g_lead, dv_lead, cfg)
        g_fol = np.where(fol_ok, x[cand] - x[fol] - length, np.inf)
        a_fol = _idm(v[fol], v0_eff[fol], g_fol, np.where(fol_ok, v[fol] - v[cand], 0.0), cfg)
        safe = ok & (g_lead >= cfg.min_gap_m) & (g_fol >= cfg.min_gap_m)
        safe &= ~fol_ok | (a_fol >= -cfg.b_safe)
        gain = np.where(safe, a_new - acc[cand], -np.inf)
        better = (gain > cfg.lane_change_gain) & (gain > best_gain)
        best_gain = np.where(better, gain, best_gain)
        best_lane = np.where(better, target, best_lane)
    movers = best_gain > -np.inf
    if not movers.any():
        return False
    lane[cand[movers]] = best_lane[movers]
    return True
