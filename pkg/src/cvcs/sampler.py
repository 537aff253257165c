"""Online random capture of a sample stream and the implicit sensing operator.

A trip is cut into contiguous, non-overlapping blocks of ``N`` samples
aligned to its first sample; the final block may be shorter and is treated
as a signal of its own length.  Inside a block every arriving sample draws
``u ~ U(0, 1)`` and is stored iff ``u <= ratio``.  Each block owns an
independent PCG64 stream keyed by ``(seed, block_ordinal)`` so blocks can be
reproduced (and recovered) in isolation.

Because the sensing rows are rows of the identity, measuring ``Theta @ alpha``
with ``Theta = D @ Psi`` is the same as reading the kept raw samples; the
operator below never forms ``Theta`` explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signal_core import Signal, Unit, dct_forward, idct

__all__ = [
    "CaptureConfig",
    "CompressedBlock",
    "CompressedTrip",
    "SensingOperator",
    "block_rng",
    "keep_mask",
    "block_bounds",
    "capture_block",
    "capture_stream",
    "sensing_rows",
]

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class CaptureConfig:
    block_len: int = 500
    compression_ratio: float = 0.2
    seed: int = 0
    exact_m: bool = False
    """Select exactly ``round(ratio * L)`` samples per block instead of the
    per-sample Bernoulli rule (for controlled experiments)."""

    def __post_init__(self):
        if int(self.block_len) != self.block_len or self.block_len < 2:
            raise ValueError(f"block_len must be an integer >= 2, got {self.block_len}")
        if not 0.0 < self.compression_ratio <= 1.0:
            raise ValueError(
                f"compression_ratio must lie in (0, 1], got {self.compression_ratio}")
        if not 0 <= int(self.seed) <= _SEED_MASK:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class CompressedBlock:
    kept_values: np.ndarray
    kept_indices: np.ndarray
    block_len: int
    block_ordinal: int = 0

    def __post_init__(self):
        values = np.asarray(self.kept_values, dtype=float)
        idx = np.asarray(self.kept_indices, dtype=np.int64)
        if values.ndim != 1 or idx.ndim != 1 or values.size != idx.size:
            raise ValueError("kept_values and kept_indices must be 1-D and equal length")
        if self.block_len < 1:
            raise ValueError("block_len must be positive")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.block_len or np.any(np.diff(idx) <= 0)):
            raise ValueError("kept_indices must be strictly increasing within [0, block_len)")
        object.__setattr__(self, "kept_values", values)
        object.__setattr__(self, "kept_indices", idx)

    @property
    def m(self) -> int:
        return int(self.kept_indices.size)

    @property
    def mask(self) -> np.ndarray:
        mask = np.zeros(self.block_len, dtype=bool)
        mask[self.kept_indices] = True
        return mask


@dataclass(frozen=True)
class CompressedTrip:
    blocks: list[CompressedBlock]
    tail_len: int
    rate_hz: float = 10.0
    unit: Unit = Unit.MPH
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for k, blk in enumerate(self.blocks):
            if blk.block_ordinal != k:
                raise ValueError("block ordinals must be consecutive from 0")

    @property
    def n_samples(self) -> int:
        return sum(b.block_len for b in self.blocks)

    @property
    def n_kept(self) -> int:
        return sum(b.m for b in self.blocks)

    @property
    def stored_fraction(self) -> float:
        return self.n_kept / self.n_samples if self.blocks else 0.0


def block_rng(seed: int, block_ordinal: int) -> np.random.Generator:
    """Independent generator for one block of one capture session."""
    ss = np.random.SeedSequence([int(seed) & _SEED_MASK, int(block_ordinal)])
    return np.random.Generator(np.random.PCG64(ss))


def keep_mask(length: int, ratio: float, rng: np.random.Generator,
              exact_m: bool = False) -> np.ndarray:
    """Boolean keep decisions for ``length`` consecutive arrivals.

    The Bernoulli rule consumes one uniform per arrival in order, so the
    decision for sample ``k`` does not depend on how many samples follow it.
    """
    if exact_m:
        m = int(round(ratio * length))
        mask = np.zeros(length, dtype=bool)
        mask[rng.choice(length, size=m, replace=False)] = True
        return mask
    return rng.random(length) <= ratio


def block_bounds(n_samples: int, block_len: int) -> list[tuple[int, int]]:
    return [(start, min(start + block_len, n_samples))
            for start in range(0, n_samples, block_len)]


def capture_block(values, ratio: float, seed: int, block_ordinal: int,
                  exact_m: bool = False) -> CompressedBlock:
    values = np.asarray(values, dtype=float)
    mask = keep_mask(values.size, ratio, block_rng(seed, block_ordinal), exact_m)
    idx = np.flatnonzero(mask)
    return CompressedBlock(values[idx], idx, values.size, block_ordinal)


def capture_stream(x: Signal, cfg: CaptureConfig) -> CompressedTrip:
    """Capture a whole trip blockwise in arrival order."""
    if len(x) == 0:
        raise ValueError("cannot capture an empty signal")
    samples = x.samples
    blocks = [
        capture_block(samples[lo:hi], cfg.compression_ratio, cfg.seed, k, cfg.exact_m)
        for k, (lo, hi) in enumerate(block_bounds(len(x), cfg.block_len))
    ]
    tail = len(x) % cfg.block_len
    return CompressedTrip(blocks, tail, x.rate_hz, x.unit)


class SensingOperator:
    """Implicit ``Theta = D @ Psi`` for one block or a stack of equal-length blocks.

    ``apply``/``apply_transpose`` work on compact vectors (length ``m``) and
    are only defined for a single block.  The ``*_full`` variants work on
    ``(B, N)`` arrays in which unobserved rows are carried as zeros; the
    solver uses those so that blocks with different masks can be batched.
    """

    def __init__(self, mask):
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        if mask.ndim != 2 or mask.shape[1] == 0:
            raise ValueError("mask must be (N,) or (B, N) with N >= 1")
        m = mask.sum(axis=1)
        if np.any(m == 0):
            raise ValueError("empty block: nothing to recover from")
        self.mask = mask
        self.mask.setflags(write=False)
        self.m = m

    @classmethod
    def from_blocks(cls, blocks) -> "SensingOperator":
        lens = {b.block_len for b in blocks}
        if len(lens) != 1:
            raise ValueError("stacked blocks must share one block length")
        return cls(np.stack([b.mask for b in blocks]))

    @property
    def n(self) -> int:
        return self.mask.shape[1]

    @property
    def batch(self) -> int:
        return self.mask.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        self._require_single()
        return int(self.m[0]), self.n

    @property
    def indices(self) -> np.ndarray:
        self._require_single()
        return np.flatnonzero(self.mask[0])

    def _require_single(self):
        if self.batch != 1:
            raise ValueError("compact apply is only defined for a single block")

    def apply(self, alpha) -> np.ndarray:
        """``Theta @ alpha``: inverse transform restricted to the kept rows."""
        self._require_single()
        return idct(np.asarray(alpha, dtype=float))[self.indices]

    def apply_transpose(self, r) -> np.ndarray:
        """``Theta.T @ r``: scatter onto the kept rows, then forward transform."""
        self._require_single()
        r = np.asarray(r, dtype=float)
        if r.shape != (self.m[0],):
            raise ValueError(f"expected a length-{self.m[0]} vector, got {r.shape}")
        full = np.zeros(self.n)
        full[self.indices] = r
        return dct_forward(full)

    def scatter(self, y) -> np.ndarray:
        """Place compact measurements into a zero-filled length-``N`` vector."""
        self._require_single()
        full = np.zeros(self.n)
        full[self.indices] = y
        return full

    def apply_full(self, alpha) -> np.ndarray:
        return np.where(self.mask, idct(alpha), 0.0)

    def apply_transpose_full(self, r_full) -> np.ndarray:
        return dct_forward(np.where(self.mask, r_full, 0.0))


def sensing_rows(block: CompressedBlock) -> SensingOperator:
    if block.m == 0:
        raise ValueError("empty block: nothing to recover from")
    return SensingOperator(block.mask)
