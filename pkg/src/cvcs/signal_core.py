"""Orthonormal DCT-II / IDCT, sparsity helpers and the coherence diagnostic.

Index mapping: the textbook formula numbers samples ``i = 1..N`` and
coefficients ``j = 0..N-1``.  Arrays here are 0-based, so sample ``x[n]``
corresponds to ``i = n + 1`` and the cosine argument becomes
``pi * j * (n + 0.5) / N``.

::

    alpha[j] = K(j) * sum_n x[n] * cos(pi * j * (n + 0.5) / N)
    K(0) = 1/sqrt(N),  K(j) = sqrt(2/N) for j >= 1

The transform matrix is orthonormal, so the inverse is its transpose.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import fft as _fft

__all__ = [
    "Unit",
    "Signal",
    "dct_forward",
    "idct",
    "dct_direct",
    "idct_direct",
    "dct_matrix",
    "idct_matrix",
    "hard_threshold",
    "coherence",
]


class Unit(enum.Enum):
    MPH = "mph"
    DEG_PER_SEC = "deg/s"
    DIMENSIONLESS = "1"


@dataclass(frozen=True)
class Signal:
    """A fixed-rate real-valued sample sequence."""

    samples: np.ndarray
    rate_hz: float = 10.0
    unit: Unit = Unit.MPH

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("signal samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("signal contains non-finite samples")
        if not self.rate_hz > 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "unit", Unit(self.unit))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return len(self) / self.rate_hz


def _as_block(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] == (0,) or x.size == 0:
        raise ValueError("empty block")
    if not np.all(np.isfinite(x)):
        raise ValueError("block contains non-finite values")
    return x


def dct_matrix(n: int) -> np.ndarray:
    """Return the ``n x n`` forward transform matrix (rows are basis vectors)."""
    if n < 1:
        raise ValueError("empty block")
    j = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * j * (i + 0.5) / n)
    k = np.full((n, 1), np.sqrt(2.0 / n))
    k[0] = 1.0 / np.sqrt(n)
    return k * mat


def idct_matrix(n: int) -> np.ndarray:
    """Return the sparsifying basis: column ``j`` is the ``j``-th cosine atom."""
    return dct_matrix(n).T


def dct_direct(x) -> np.ndarray:
    """Evaluate the forward transform by the O(N^2) defining sum."""
    x = _as_block(x)
    return x @ dct_matrix(x.shape[-1]).T


def idct_direct(alpha) -> np.ndarray:
    alpha = _as_block(alpha)
    return alpha @ dct_matrix(alpha.shape[-1])


def dct_forward(x) -> np.ndarray:
    """Forward orthonormal DCT-II along the last axis.

    Uses the O(N log N) FFT-based routine; it agrees with :func:`dct_direct`
    to round-off.  Accepts a single block or a stack of equal-length blocks.
    """
    x = _as_block(x)
    return _fft.dct(x, type=2, norm="ortho", axis=-1)


def idct(alpha) -> np.ndarray:
    """Inverse of :func:`dct_forward` (the transpose of the orthonormal matrix)."""
    alpha = _as_block(alpha)
    return _fft.idct(alpha, type=2, norm="ortho", axis=-1)


def hard_threshold(alpha, k: int) -> np.ndarray:
    """Keep the ``k`` largest-magnitude entries of ``alpha`` and zero the rest.

    Ties are resolved in favour of the lower index.
    """
    alpha = np.asarray(alpha, dtype=float)
    n = alpha.size
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    order = np.argsort(-np.abs(alpha), kind="stable")
    out = np.zeros_like(alpha)
    keep = order[:k]
    out[keep] = alpha[keep]
    return out


def coherence(u, atol: float = 1e-6) -> float:
    """Coherence ``sqrt(N) * max |u_ij|`` of a square orthonormal matrix.

    Ranges from 1 (maximally spread) to ``sqrt(N)`` (contains a unit entry).

    Raises
    ------
    ValueError
        If ``u`` is not square or ``u.T @ u`` deviates from the identity by
        more than ``atol``.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[0] != u.shape[1] or u.shape[0] == 0:
        raise ValueError("not unitary: expected a non-empty square matrix")
    n = u.shape[0]
    if not np.allclose(u.T @ u, np.eye(n), rtol=0.0, atol=atol):
        raise ValueError("not unitary")
    return float(np.sqrt(n) * np.max(np.abs(u)))
