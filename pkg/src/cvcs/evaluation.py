"""Recovery accuracy and cost metrics: RMSE, category-binned RMSE, sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .recovery import SolverConfig, assemble_blocks, recover_blocks
from .sampler import CaptureConfig, capture_stream
from .signal_core import Signal, Unit

__all__ = [
    "rmse",
    "BinSpec",
    "BinStat",
    "BinnedResult",
    "speed_bins",
    "yaw_bins",
    "binned_rmse",
    "SweepRow",
    "SweepResult",
    "derive_seed",
    "ratio_sweep",
]


def rmse(x, x_hat) -> float:
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {x_hat.shape}")
    if x.size == 0:
        raise ValueError("rmse of empty vectors")
    diff = np.abs(x - x_hat)
    # scale by the largest error so tiny differences do not square to zero
    top = diff.max()
    if top == 0:
        return 0.0
    return float(top * np.sqrt(np.mean((diff / top) ** 2)))


@dataclass(frozen=True)
class BinSpec:
    """Half-open bins ``[edges[k], edges[k+1])``."""

    edges: tuple[float, ...]
    unit: Unit = Unit.MPH

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("bin edges must be strictly increasing with at least 2 entries")
        object.__setattr__(self, "edges", edges)

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def labels(self) -> list[str]:
        return [f"[{_fmt(a)}, {_fmt(b)})" for a, b in zip(self.edges, self.edges[1:])]


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(v)


def speed_bins(width: float = 10.0, top: float = 80.0) -> BinSpec:
    """Eight 10 MPH bins ``[0,10) ... [70,80)``.

    A label such as "11-20" on an integer speed axis corresponds to the real
    bin ``[10, 20)`` here.
    """
    return BinSpec(tuple(np.arange(0.0, top + width / 2, width)), Unit.MPH)


def yaw_bins(width: float = 60.0, limit: float = 360.0) -> BinSpec:
    """Twelve 60 deg/s bins covering ``[-360, 360)``."""
    return BinSpec(tuple(np.arange(-limit, limit + width / 2, width)), Unit.DEG_PER_SEC)


@dataclass
class BinStat:
    lo: float
    hi: float
    count: int
    rmse: float | None
    sse: float = field(default=0.0, repr=False)


@dataclass
class BinnedResult:
    spec: BinSpec
    bins: list[BinStat]
    overflow: BinStat

    @property
    def total_count(self) -> int:
        return sum(b.count for b in self.bins) + self.overflow.count

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "lo", "hi", "count", "rmse"])
        for label, b in zip(self.spec.labels(), self.bins):
            w.writerow([label, _fmt(b.lo), _fmt(b.hi), b.count,
                        "" if b.rmse is None else f"{b.rmse:.10g}"])
        o = self.overflow
        w.writerow(["overflow", "", "", o.count, "" if o.rmse is None else f"{o.rmse:.10g}"])
        return buf.getvalue()


def binned_rmse(truth, recovered, bins: BinSpec) -> BinnedResult:
    """RMSE per category of the *true* value.

    Samples outside ``[edges[0], edges[-1])`` go to a separate overflow
    bucket.  Empty bins report ``rmse=None``.
    """
    truth = np.asarray(truth, dtype=float)
    recovered = np.asarray(recovered, dtype=float)
    if truth.shape != recovered.shape:
        raise ValueError(f"length mismatch: {truth.shape} vs {recovered.shape}")
    edges = np.asarray(bins.edges)
    idx = np.searchsorted(edges, truth, side="right") - 1
    outside = (idx < 0) | (idx >= bins.n_bins)
    sq = (truth - recovered) ** 2

    def stat(lo, hi, sel):
        count = int(sel.sum())
        sse = float(sq[sel].sum())
        return BinStat(lo, hi, count, math.sqrt(sse / count) if count else None, sse)

    stats = [stat(edges[k], edges[k + 1], (idx == k) & ~outside) for k in range(bins.n_bins)]
    return BinnedResult(bins, stats, stat(float("nan"), float("nan"), outside))


@dataclass(frozen=True)
class SweepRow:
    block_len: int
    compression_ratio: float
    mean_rmse: float
    mean_time_per_recovery_s: float
    n_blocks: int
    n_fallback: int = 0
    n_unconverged: int = 0


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def row(self, block_len: int, ratio: float) -> SweepRow:
        for r in self.rows:
            if r.block_len == block_len and math.isclose(r.compression_ratio, ratio):
                return r
        raise KeyError((block_len, ratio))

    def to_csv(self, timing: bool = True) -> str:
        """Serialise rows.  ``timing=False`` drops the wall-clock column,
        leaving only fields that are reproducible bit-for-bit."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["block_len", "compression_ratio", "mean_rmse", "n_blocks",
                "n_fallback", "n_unconverged"]
        if timing:
            head.append("mean_time_per_recovery_s")
        w.writerow(head)
        for r in self.rows:
            vals = [r.block_len, repr(r.compression_ratio), repr(r.mean_rmse), r.n_blocks,
                    r.n_fallback, r.n_unconverged]
            if timing:
                vals.append(f"{r.mean_time_per_recovery_s:.6g}")
            w.writerow(vals)
        return buf.getvalue()


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def ratio_sweep(signals, block_lens, ratios, solver: SolverConfig = SolverConfig(),
                seed: int = 0, keep_recovered: tuple[int, float] | None = None):
    """Capture and recover every signal for each ``(N, ratio)`` pair.

    ``mean_rmse`` pools squared errors over all samples of all signals;
    ``mean_time_per_recovery_s`` averages the per-block solver time.
    Signal ``i`` is captured with seed ``derive_seed(seed, i)`` in every
    cell.

    If ``keep_recovered=(N, r)`` is given, the recovered signals of that cell
    are returned as a second value (for binned analysis).
    """
    signals = list(signals)
    block_lens = list(block_lens)
    ratios = list(ratios)
    if not signals or not block_lens or not ratios:
        raise ValueError("signals, block lengths and ratios must all be non-empty")
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"ratio {r} outside (0, 1]")

    rows = []
    kept = None
    truth = np.concatenate([s.samples for s in signals])
    for n in block_lens:
        for r in ratios:
            try:
                trips = [capture_stream(s, CaptureConfig(n, r, derive_seed(seed, i)))
                         for i, s in enumerate(signals)]
                blocks = [b for t in trips for b in t.blocks]
                results = recover_blocks(blocks, solver)
            except ValueError as exc:
                raise ValueError(f"sweep cell N={n}, ratio={r}: {exc}") from exc
            recovered = []
            diags = []
            pos = 0
            for t in trips:
                nb = len(t.blocks)
                x, d = assemble_blocks(t.blocks, results[pos:pos + nb])
                pos += nb
                recovered.append(x)
                diags.extend(d.blocks)
            times = [d.wall_time_s for d in diags if not d.fallback]
            n_fallback = sum(d.fallback for d in diags)
            n_unconv = sum(not (d.converged or d.fallback) for d in diags)
            rec = np.concatenate(recovered)
            rows.append(SweepRow(n, r, rmse(truth, rec),
                                 float(np.mean(times)) if times else 0.0,
                                 len(blocks), n_fallback, n_unconv))
            if keep_recovered is not None and keep_recovered[0] == n and math.isclose(
                    keep_recovered[1], r):
                kept = [Signal(x, s.rate_hz, s.unit) for x, s in zip(recovered, signals)]
    result = SweepResult(rows)
    if keep_recovered is not None:
        return result, kept
    return result
