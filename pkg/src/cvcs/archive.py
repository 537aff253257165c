"""CZT1 compressed-trip archive.

Layout (all integers little-endian)::

    header
      magic      4s   b"CZT1"
      version    u8   1
      block_len  u32
      ratio      f64
      seed       u64
      flags      u8   bit 0: exact-M selection
      rate_hz    f64  nominal rate (first trip)
      n_chan     u8
      per channel: unit code u8, name length u8, name utf-8
      n_trips    u32
    body, per trip
      id length u16, id utf-8
      t0         f64
      rate_hz    f64
      n_samples  u32
      per block (ceil(n_samples / block_len) blocks, last one may be short)
        m        varint
        indices  m varints: first index, then gaps minus one
        values   n_chan x m float32, channel-major
    footer
      crc32      u32 over every preceding byte

Every channel of a trip shares one keep mask: a sample (snapshot) is either
stored with all its fields or dropped.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .sampler import CaptureConfig, CompressedBlock, CompressedTrip, block_bounds, block_rng, keep_mask
from .signal_core import Unit

MAGIC = b"CZT1"
VERSION = 1
_UNIT_CODES = {Unit.MPH: 1, Unit.DEG_PER_SEC: 2, Unit.DIMENSIONLESS: 0}
_CODE_UNITS = {v: k for k, v in _UNIT_CODES.items()}


class ArchiveError(ValueError):
    pass


@dataclass
class ArchivedTrip:
    trip_id: str
    t0: float
    rate_hz: float
    n_samples: int
    indices: list[np.ndarray]
    values: list[np.ndarray]
    """Per block: kept indices (m,) and kept values (n_chan, m) as float32."""

    @property
    def n_kept(self) -> int:
        return int(sum(i.size for i in self.indices))

    def compressed(self, channel: int, block_len: int, unit: Unit) -> CompressedTrip:
        blocks = []
        for k, ((lo, hi), idx, vals) in enumerate(
                zip(block_bounds(self.n_samples, block_len), self.indices, self.values)):
            blocks.append(CompressedBlock(vals[channel].astype(float), idx, hi - lo, k))
        return CompressedTrip(blocks, self.n_samples % block_len, self.rate_hz, unit)


@dataclass
class Archive:
    config: CaptureConfig
    channels: list[tuple[str, Unit]]
    rate_hz: float
    trips: list[ArchivedTrip] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return sum(t.n_samples for t in self.trips)

    @property
    def n_kept(self) -> int:
        return sum(t.n_kept for t in self.trips)

    @property
    def stored_fraction(self) -> float:
        return self.n_kept / self.n_samples if self.n_samples else 0.0


def capture_trip(trip_id: str, t0: float, rate_hz: float, values, cfg: CaptureConfig) -> ArchivedTrip:
    """Capture a multi-channel trip, ``values`` shaped ``(n_chan, n_samples)``.

    The mask of block ``k`` is the one :func:`cvcs.sampler.capture_stream`
    would draw for the same config, so each channel's blocks equal a
    single-channel capture.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n = values.shape[1]
    if n == 0:
        raise ValueError(f"trip {trip_id!r} is empty")
    indices, kept = [], []
    for k, (lo, hi) in enumerate(block_bounds(n, cfg.block_len)):
        mask = keep_mask(hi - lo, cfg.compression_ratio, block_rng(cfg.seed, k), cfg.exact_m)
        idx = np.flatnonzero(mask)
        indices.append(idx)
        kept.append(values[:, lo:hi][:, idx].astype(np.float32))
    return ArchivedTrip(trip_id, float(t0), float(rate_hz), n, indices, kept)


def _put_varint(out: bytearray, value: int) -> None:
    if value < 0:
        raise ValueError("varint must be non-negative")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _get_varint(buf: bytes, pos: int) -> tuple[int, int]:
    shift = result = 0
    while True:
        if pos >= len(buf):
            raise ArchiveError("truncated archive (varint)")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise ArchiveError("corrupt varint")


def encode(archive: Archive) -> bytes:
    cfg = archive.config
    out = bytearray()
    out += MAGIC
    out += struct.pack("<BIdQBdB", VERSION, cfg.block_len, cfg.compression_ratio, cfg.seed,
                       int(cfg.exact_m), archive.rate_hz, len(archive.channels))
    for name, unit in archive.channels:
        raw = name.encode()
        out += struct.pack("<BB", _UNIT_CODES[unit], len(raw)) + raw
    out += struct.pack("<I", len(archive.trips))
    n_chan = len(archive.channels)
    for trip in archive.trips:
        raw = trip.trip_id.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<ddI", trip.t0, trip.rate_hz, trip.n_samples)
        for idx, vals in zip(trip.indices, trip.values):
            _put_varint(out, idx.size)
            prev = -1
            for i in idx.tolist():
                _put_varint(out, i - prev - 1)
                prev = i
            if vals.shape != (n_chan, idx.size):
                raise ValueError("block values do not match channel count")
            out += np.ascontiguousarray(vals, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def decode(data: bytes) -> Archive:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ArchiveError("bad magic: not a CZT1 archive")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise ArchiveError("CRC mismatch: archive is corrupt")
    body = data[:-4]
    try:
        pos = 4
        version, block_len, ratio, seed, flags, rate, n_chan = struct.unpack_from("<BIdQBdB", body, pos)
        if version != VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        pos += struct.calcsize("<BIdQBdB")
        channels = []
        for _ in range(n_chan):
            code, ln = struct.unpack_from("<BB", body, pos)
            pos += 2
            channels.append((body[pos:pos + ln].decode(), _CODE_UNITS[code]))
            pos += ln
        (n_trips,) = struct.unpack_from("<I", body, pos)
        pos += 4
        cfg = CaptureConfig(block_len, ratio, seed, bool(flags & 1))
        archive = Archive(cfg, channels, rate)
        for _ in range(n_trips):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            trip_id = body[pos:pos + ln].decode()
            pos += ln
            t0, trate, n = struct.unpack_from("<ddI", body, pos)
            pos += 20
            indices, values = [], []
            for lo, hi in block_bounds(n, block_len):
                m, pos = _get_varint(body, pos)
                idx = np.empty(m, dtype=np.int64)
                prev = -1
                for j in range(m):
                    gap, pos = _get_varint(body, pos)
                    prev = prev + gap + 1
                    idx[j] = prev
                if m and idx[-1] >= hi - lo:
                    raise ArchiveError(f"trip {trip_id!r}: index out of block range")
                nbytes = 4 * m * n_chan
                if pos + nbytes > len(body):
                    raise ArchiveError("truncated archive (values)")
                vals = np.frombuffer(body, dtype="<f4", count=m * n_chan, offset=pos)
                pos += nbytes
                indices.append(idx)
                values.append(vals.reshape(n_chan, m).astype(np.float32))
            archive.trips.append(ArchivedTrip(trip_id, t0, trate, n, indices, values))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise ArchiveError(f"corrupt archive: {exc}") from exc
    if pos != len(body):
        raise ArchiveError("trailing bytes after last trip")
    return archive
