"""Travel-time tables from a trajectory log.

Four sources fill a table indexed by segment ``s`` and interval ``j``
(both 1-based in the CSV, 0-based in arrays):

``GR``
    ground truth, mean traversal time of vehicles entering ``s`` during ``j``.
``LP``
    a point detector at each segment midpoint; length over the harmonic
    mean of crossing speeds.
``CV``
    raw connected-vehicle snapshots that survived the OBU buffer.
``CS``
    the same fleet, but each OBU stores a random subset of snapshots and
    the speed stream is recovered blockwise at upload time.

For ``CV``/``CS`` the estimate is segment length over the mean snapshot
speed in the cell.  The OBU is a FIFO of ``obu_capacity`` snapshots that
uploads and clears whenever the vehicle crosses a segment boundary, so only
the last ``capacity`` snapshots of each segment pass reach the server.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from ..evaluation import derive_seed
from ..recovery import SolverConfig, solve_stacked
from ..sampler import SensingOperator, block_rng, keep_mask
from ..signal_core import idct
from .sim import SimConfig, TrajectoryLog

log = logging.getLogger(__name__)

SOURCES = ("GR", "LP", "CV", "CS")
SPEED_FLOOR_MPH = 1.0

__all__ = ["SOURCES", "TravelTimeTable", "ground_truth_tt", "loop_detector_tt", "cv_tt",
           "mape", "build_table"]


@dataclass
class TravelTimeTable:
    """``tt[source]`` is an ``(S, T)`` array of seconds; NaN marks a missing cell."""

    num_segments: int
    horizon_intervals: int
    tt: dict[str, np.ndarray] = field(default_factory=dict)

    def empty(self) -> np.ndarray:
        return np.full((self.num_segments, self.horizon_intervals), np.nan)

    def set(self, source: str, values: np.ndarray) -> None:
        if source not in SOURCES:
            raise KeyError(f"unknown source {source!r}")
        values = np.asarray(values, dtype=float)
        if values.shape != (self.num_segments, self.horizon_intervals):
            raise ValueError(f"{source} table has shape {values.shape}")
        if np.any(values[~np.isnan(values)] <= 0):
            raise ValueError(f"{source} table has non-positive travel times")
        self.tt[source] = values

    def missing(self, source: str) -> np.ndarray:
        return np.isnan(self.tt[source])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "segment", "interval", "tt_s"])
        for d in SOURCES:
            if d not in self.tt:
                continue
            arr = self.tt[d]
            for s in range(self.num_segments):
                for j in range(self.horizon_intervals):
                    v = arr[s, j]
                    w.writerow([d, s + 1, j + 1, "" if np.isnan(v) else f"{v:.6f}"])
        return buf.getvalue()


def _cell_mean(seg, interval, values, shape) -> np.ndarray:
    """Mean of ``values`` per ``(seg, interval)`` cell, NaN where empty."""
    ok = (seg >= 0) & (seg < shape[0]) & (interval >= 0) & (interval < shape[1])
    flat = seg[ok] * shape[1] + interval[ok]
    size = shape[0] * shape[1]
    total = np.bincount(flat, weights=values[ok], minlength=size)
    count = np.bincount(flat, minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / count
    out[count == 0] = np.nan
    return out.reshape(shape)


def _crossing_times(t, x, marks):
    """First time each position in ``marks`` is reached, linearly
    interpolated; NaN if never reached.  ``x`` is nondecreasing."""
    k = np.searchsorted(x, marks, side="left")
    out = np.full(len(marks), np.nan)
    hit = k < x.size
    at_start = hit & (k == 0)
    out[at_start] = t[0]
    mid = hit & (k > 0)
    km = k[mid]
    x0, x1 = x[km - 1], x[km]
    frac = np.where(x1 > x0, (marks[mid] - x0) / np.where(x1 > x0, x1 - x0, 1.0), 1.0)
    out[mid] = t[km - 1] + frac * (t[km] - t[km - 1])
    return out, k


def ground_truth_tt(log_: TrajectoryLog, cfg: SimConfig) -> np.ndarray:
    S, T = cfg.num_segments, cfg.horizon_intervals
    marks = np.arange(S + 1) * cfg.segment_miles
    segs, ivs, trav = [], [], []
    for k in range(log_.n_vehicles):
        sl = log_.vehicle_slice(k)
        if sl.stop - sl.start < 2:
            continue
        cross, _ = _crossing_times(log_.time_s[sl], log_.position_miles[sl], marks)
        enter, leave = cross[:-1], cross[1:]
        done = ~np.isnan(enter) & ~np.isnan(leave)
        s = np.flatnonzero(done)
        segs.append(s)
        ivs.append(np.floor(enter[s] / cfg.interval_s).astype(np.int64))
        trav.append(leave[s] - enter[s])
    if not segs:
        return np.full((S, T), np.nan)
    return _cell_mean(np.concatenate(segs), np.concatenate(ivs), np.concatenate(trav), (S, T))


def loop_detector_tt(log_: TrajectoryLog, cfg: SimConfig) -> np.ndarray:
    S, T = cfg.num_segments, cfg.horizon_intervals
    mids = (np.arange(S) + 0.5) * cfg.segment_miles
    segs, ivs, inv = [], [], []
    for k in range(log_.n_vehicles):
        sl = log_.vehicle_slice(k)
        t, x, v = log_.time_s[sl], log_.position_miles[sl], log_.speed_mph[sl]
        if t.size < 2:
            continue
        when, idx = _crossing_times(t, x, mids)
        s = np.flatnonzero(~np.isnan(when) & (idx > 0))
        i = idx[s]
        frac = np.clip((mids[s] - x[i - 1]) / np.maximum(x[i] - x[i - 1], 1e-12), 0.0, 1.0)
        speed = v[i - 1] + frac * (v[i] - v[i - 1])
        segs.append(s)
        ivs.append(np.floor(when[s] / cfg.interval_s).astype(np.int64))
        inv.append(1.0 / np.maximum(speed, SPEED_FLOOR_MPH))
    if not segs:
        return np.full((S, T), np.nan)
    mean_inv = _cell_mean(np.concatenate(segs), np.concatenate(ivs), np.concatenate(inv), (S, T))
    # length / harmonic mean = length * mean(1/v)
    return cfg.segment_miles * mean_inv * 3600.0


@dataclass
class _Stream:
    """Captured snapshots of every CV, concatenated vehicle by vehicle."""

    vehicle: np.ndarray
    t: np.ndarray
    v: np.ndarray
    seg: np.ndarray
    kept: np.ndarray


def _capture(log_: TrajectoryLog, cfg: SimConfig, mode: str, cache) -> _Stream | None:
    stride = cfg.capture_stride
    parts_k, parts_t, parts_x, parts_v, parts_m = [], [], [], [], []
    for k in np.flatnonzero(log_.is_cv):
        sl = log_.vehicle_slice(int(k))
        t = log_.time_s[sl][::stride]
        if t.size == 0:
            continue
        parts_k.append(np.full(t.size, k, dtype=np.int64))
        parts_t.append(t)
        parts_x.append(log_.position_miles[sl][::stride])
        parts_v.append(log_.speed_mph[sl][::stride])
        if mode == "cs":
            key = ("mask", cfg.seed, cfg.capture_rate_hz, cfg.cs_block_len,
                   cfg.compression_ratio, int(k))
            mask = cache.get(key)
            if mask is None:
                mask = cache[key] = _vehicle_mask(t.size, cfg, int(k))
            parts_m.append(mask)
    if not parts_k:
        return None
    x = np.concatenate(parts_x)
    kept = np.concatenate(parts_m) if mode == "cs" else np.ones(x.size, dtype=bool)
    return _Stream(np.concatenate(parts_k), np.concatenate(parts_t), np.concatenate(parts_v),
                   np.floor(x / cfg.segment_miles).astype(np.int64), kept)


def _windows(st: _Stream, capacity: int):
    """Uploaded stretch ``[start, stop)`` of every segment pass.

    A pass is a run of equal ``(vehicle, seg)``; it is uploaded only if the
    same vehicle has a later run (it crossed the boundary).  The buffer
    holds the newest ``capacity`` kept snapshots, so the stretch begins just
    after the newest evicted one, or at the pass start if nothing was
    evicted.  Passes without any kept snapshot are dropped.
    """
    n = st.seg.size
    change = np.flatnonzero((np.diff(st.seg) != 0) | (np.diff(st.vehicle) != 0)) + 1
    a = np.concatenate([[0], change])
    b = np.concatenate([change, [n]])
    crossed = np.zeros(a.size, dtype=bool)
    crossed[:-1] = st.vehicle[a[1:]] == st.vehicle[a[:-1]]
    a, b = a[crossed], b[crossed]
    ck = np.concatenate([[0], np.cumsum(st.kept)])
    first, count = ck[a], ck[b] - ck[a]
    pos = np.flatnonzero(st.kept)
    evicted = count > capacity
    start = a.copy()
    start[evicted] = pos[first[evicted] + count[evicted] - capacity - 1] + 1
    has = count > 0
    return start[has], b[has]


def cv_tt(log_: TrajectoryLog, cfg: SimConfig, mode: str = "raw",
          solver: SolverConfig | None = None, cache: dict | None = None) -> np.ndarray:
    """CV (``mode="raw"``) or CS (``mode="cs"``) travel-time slice.

    In CS mode vehicle ``k`` draws its keep decisions with seed
    ``derive_seed(cfg.seed, k)`` on blocks of ``cfg.cs_block_len`` captured
    snapshots, so the stored subset does not depend on the OBU capacity.
    ``cache`` (any dict) memoises masks and recoveries across calls on the
    same log.
    """
    if mode not in ("raw", "cs"):
        raise ValueError(f"mode must be 'raw' or 'cs', got {mode!r}")
    S, T = cfg.num_segments, cfg.horizon_intervals
    cache = {} if cache is None else cache
    st = _capture(log_, cfg, mode, cache)
    if st is None:
        log.warning("no connected vehicles in the log; every %s cell is missing", mode.upper())
        return np.full((S, T), np.nan)
    start, stop = _windows(st, cfg.obu_capacity)
    if start.size == 0:
        return np.full((S, T), np.nan)
    lens = stop - start
    idx = np.repeat(start - np.cumsum(np.concatenate([[0], lens[:-1]])), lens) + np.arange(lens.sum())
    if mode == "raw":
        speed = st.v[idx]
    else:
        speed = np.empty(idx.size)
        _recover_windows(st, start, stop, cfg, solver, cache, speed)
    mean_v = _cell_mean(st.seg[idx], np.floor(st.t[idx] / cfg.interval_s).astype(np.int64),
                        speed, (S, T))
    return cfg.segment_miles / np.maximum(mean_v, SPEED_FLOOR_MPH) * 3600.0


def _vehicle_mask(n: int, cfg: SimConfig, k: int) -> np.ndarray:
    seed = derive_seed(cfg.seed, k)
    n_blk = cfg.cs_block_len
    parts = [keep_mask(min(n_blk, n - lo), cfg.compression_ratio, block_rng(seed, o))
             for o, lo in enumerate(range(0, n, n_blk))]
    return np.concatenate(parts)


def _recover_windows(st: _Stream, start, stop, cfg: SimConfig, solver, cache, out) -> None:
    """Fill ``out`` (the windows laid end to end) with recovered speeds.

    Each window is cut into near-equal pieces of at most ``cs_block_len``
    snapshots.  A piece is solved as a signal of its own length, observed at
    the kept snapshots it contains, after centring on their mean.  A piece
    with no kept snapshot takes the mean of its window.
    """
    solver = solver or SolverConfig(max_iters=cfg.cs_max_iters, rel_tol=cfg.cs_rel_tol,
                                   polish=False)
    memo = cache.setdefault(("pieces", cfg.seed, cfg.capture_rate_hz, cfg.cs_block_len,
                             cfg.compression_ratio, solver), {})
    lens = stop - start
    n_pieces = -(-lens // cfg.cs_block_len)
    w = np.repeat(np.arange(start.size), n_pieces)
    k = np.arange(w.size) - np.repeat(np.cumsum(n_pieces) - n_pieces, n_pieces)
    pa = start[w] + np.round(k * lens[w] / n_pieces[w]).astype(np.int64)
    pb = start[w] + np.round((k + 1) * lens[w] / n_pieces[w]).astype(np.int64)
    # offset of each piece inside ``out``
    off = pa - start[w] + np.repeat(np.cumsum(lens) - lens, n_pieces)

    ck = np.concatenate([[0], np.cumsum(st.kept)])
    cv = np.concatenate([[0.0], np.cumsum(np.where(st.kept, st.v, 0.0))])
    level = (cv[stop] - cv[start]) / (ck[stop] - ck[start])
    empty = ck[pb] == ck[pa]

    todo: dict[int, list[int]] = {}
    for i in range(pa.size):
        if empty[i]:
            out[off[i]:off[i] + pb[i] - pa[i]] = level[w[i]]
            continue
        hit = memo.get((pa[i], pb[i]))
        if hit is None:
            todo.setdefault(int(pb[i] - pa[i]), []).append(i)
        else:
            out[off[i]:off[i] + hit.size] = hit
    for length in sorted(todo):
        rows = np.array(todo[length])
        gather = pa[rows][:, None] + np.arange(length)
        mask = st.kept[gather]
        y = np.where(mask, st.v[gather], 0.0)
        # centre on the stored mean: the l1 objective would otherwise pull the
        # unobserved stretch toward zero speed
        mean = y.sum(axis=1, keepdims=True) / mask.sum(axis=1, keepdims=True)
        if length == 1:
            x_hat = y
        else:
            alpha, _ = solve_stacked(SensingOperator(mask), np.where(mask, y - mean, 0.0), solver)
            x_hat = np.maximum(np.where(mask, y, idct(alpha) + mean), 0.0)
        scatter = off[rows][:, None] + np.arange(length)
        out[scatter] = x_hat
        for r, i in enumerate(rows):
            memo[(pa[i], pb[i])] = x_hat[r]


def mape(table: TravelTimeTable, source: str, penalty: float = 1.0) -> float:
    """Mean absolute percentage error of ``source`` against ``GR``.

    Cells ``s >= 2`` and ``j >= 4`` (1-based) are scored.  A cell where the
    source is missing scores ``penalty``; a cell with no ground truth is
    skipped.
    """
    S, T = table.num_segments, table.horizon_intervals
    if S < 2 or T < 4:
        raise ValueError("MAPE index range empty")
    if "GR" not in table.tt:
        raise KeyError("ground truth slice GR is required")
    gr = table.tt["GR"][1:, 3:]
    est = table.tt[source][1:, 3:]
    scored = ~np.isnan(gr)
    if not scored.any():
        raise ValueError("no ground-truth cells in the MAPE range")
    err = np.where(np.isnan(est), penalty, np.abs(est - gr) / np.where(scored, gr, 1.0))
    return float(err[scored].sum() / scored.sum())


def build_table(log_: TrajectoryLog, cfg: SimConfig, sources=SOURCES,
                cache: dict | None = None) -> TravelTimeTable:
    table = TravelTimeTable(cfg.num_segments, cfg.horizon_intervals)
    for d in sources:
        if d == "GR":
            table.set(d, ground_truth_tt(log_, cfg))
        elif d == "LP":
            table.set(d, loop_detector_tt(log_, cfg))
        elif d == "CV":
            table.set(d, cv_tt(log_, cfg, "raw"))
        elif d == "CS":
            table.set(d, cv_tt(log_, cfg, "cs", cache=cache))
        else:
            raise KeyError(f"unknown source {d!r}")
    return table
