"""Trip record CSV: ``trip_id,t,speed_mph,yaw_deg_s``.

Rows must be grouped by ``trip_id`` and time-increasing inside a trip.  Each
trip's nominal sampling rate is ``1 / median(diff(t))``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import write_atomic
from .signal_core import Signal, Unit

COLUMNS = ("trip_id", "t", "speed_mph", "yaw_deg_s")
CHANNELS = ("speed_mph", "yaw_deg_s")
CHANNEL_UNITS = {"speed_mph": Unit.MPH, "yaw_deg_s": Unit.DEG_PER_SEC}
DEFAULT_RATE_HZ = 10.0


class TripCsvError(ValueError):
    pass


@dataclass
class Trip:
    trip_id: str
    t: np.ndarray
    speed_mph: np.ndarray
    yaw_deg_s: np.ndarray

    def __len__(self) -> int:
        return self.t.size

    @property
    def rate_hz(self) -> float:
        if self.t.size < 2:
            return DEFAULT_RATE_HZ
        return float(1.0 / np.median(np.diff(self.t)))

    def channel(self, name: str) -> np.ndarray:
        if name not in CHANNELS:
            raise KeyError(f"unknown channel {name!r}; expected one of {CHANNELS}")
        return getattr(self, name)

    def signal(self, name: str) -> Signal:
        return Signal(self.channel(name), self.rate_hz, CHANNEL_UNITS[name])


def read_trips(path) -> list[Trip]:
    with open(path, newline="") as fh:
        return parse_trips(fh, str(path))


def parse_trips(fh, source: str = "<csv>") -> list[Trip]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != COLUMNS:
        raise TripCsvError(f"{source}:1: expected header {','.join(COLUMNS)}")

    trips: list[Trip] = []
    seen: set[str] = set()
    cur_id = None
    rows: list[tuple[float, float, float]] = []

    def flush():
        if cur_id is None:
            return
        arr = np.array(rows, dtype=float).reshape(-1, 3)
        trips.append(Trip(cur_id, arr[:, 0], arr[:, 1], arr[:, 2]))

    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise TripCsvError(f"{source}:{lineno}: expected 4 fields, got {len(row)}")
        trip_id = row[0]
        try:
            t, speed, yaw = (float(v) for v in row[1:])
        except ValueError:
            raise TripCsvError(f"{source}:{lineno}: non-numeric field in {row!r}") from None
        if not (np.isfinite(t) and np.isfinite(speed) and np.isfinite(yaw)):
            raise TripCsvError(f"{source}:{lineno}: non-finite value")
        if speed < 0:
            raise TripCsvError(f"{source}:{lineno}: negative speed {speed}")
        if not -360.0 <= yaw <= 360.0:
            raise TripCsvError(f"{source}:{lineno}: yaw rate {yaw} outside [-360, 360]")
        if trip_id != cur_id:
            if trip_id in seen:
                raise TripCsvError(f"{source}:{lineno}: rows of trip {trip_id!r} are not grouped")
            flush()
            seen.add(trip_id)
            cur_id, rows = trip_id, []
        elif t <= rows[-1][0]:
            raise TripCsvError(f"{source}:{lineno}: time not increasing in trip {trip_id!r}")
        rows.append((t, speed, yaw))
    flush()
    return trips


def fmt_time(t: float) -> str:
    return f"{t:.3f}"


def fmt_value(v: float) -> str:
    """Shortest decimal that round-trips through float32 storage."""
    return np.format_float_positional(np.float32(v), unique=True, trim="-")


def format_trips(trips, value_fmt=fmt_value) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for trip in trips:
        for t, s, y in zip(trip.t, trip.speed_mph, trip.yaw_deg_s):
            w.writerow([trip.trip_id, fmt_time(t), value_fmt(s), value_fmt(y)])
    return buf.getvalue()


def write_trips(path, trips, value_fmt=fmt_value) -> None:
    write_atomic(Path(path), format_trips(trips, value_fmt))
