"""Block recovery by l1 minimisation in the DCT domain.

The default solver is ADMM for equality-constrained basis pursuit::

    minimize ||alpha||_1  subject to  Theta @ alpha = y

Rows of ``Theta`` are orthonormal (``Theta @ Theta.T = I``), so projecting
onto the constraint set is ``v - Theta.T @ (Theta @ v - y)`` and costs two
fast transforms.  Each ADMM iteration is::

    a = P(z - u)                        # projection onto {Theta a = y}
    z = soft(a + u, 1 / rho)
    u = u + a - z

with residual balancing of ``rho`` (per block) and the stopping rule of
Boyd et al. (primal ``||a - z||`` and dual ``rho ||z - z_prev||`` below
``sqrt(N) * abs_tol + rel_tol * scale``).  Each block is solved on data
divided by its observed RMS, which makes ``rho`` and the tolerances
scale-free.  The projected iterate ``a`` is returned, so the answer always
satisfies the constraints to round-off.

After ADMM stops, a polishing step refits the observations by least squares
on the support of the sparse iterate ``z``.  The refit replaces ``a`` only
if it is feasible to round-off and its l1 norm is no larger, so polishing
can only improve the objective.  On truly sparse blocks it lands on the
exact solution instead of one within the stopping tolerance.

Block recovery (:func:`recover_blocks`) optionally centres each block on the
mean of its stored samples before solving and adds the mean back after.
Without that, basis pursuit on a signal with a large offset (speeds around
60 mph) trades the constant atom for cosines that peak at the few stored
samples, which drags unobserved stretches toward zero when ``m`` is small.
:func:`solve_basis_pursuit` itself always solves the plain program.

``method="lasso"`` switches to FISTA on ``0.5 ||Theta a - y||^2 + lam ||a||_1``
for noisy data, with ``lam = lasso_lambda * ||Theta.T y||_inf``.

Many blocks of the same length are solved together as one ``(B, N)`` stack;
blocks leave the stack as soon as they meet the stopping rule.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _fft

from .sampler import CompressedBlock, CompressedTrip, SensingOperator, sensing_rows
from .signal_core import Signal, dct_forward, idct

__all__ = [
    "SolverConfig",
    "SolveInfo",
    "RecoveryResult",
    "BlockDiagnostics",
    "TripDiagnostics",
    "RecoveryError",
    "solve_basis_pursuit",
    "solve_stacked",
    "recover_block",
    "recover_blocks",
    "recover_trip",
    "assemble_blocks",
]

log = logging.getLogger(__name__)


class RecoveryError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 2000
    abs_tol: float = 1e-7
    rel_tol: float = 1e-4
    penalty_rho: float = 1.0
    enforce_observed: bool = True
    method: str = "admm"
    adaptive_rho: bool = True
    lasso_lambda: float = 1e-3
    check_every: int = 10
    center: bool = True
    polish: bool = True

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError("max_iters must be a positive integer")
        for name in ("abs_tol", "rel_tol", "penalty_rho", "lasso_lambda"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.method not in ("admm", "lasso"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.check_every < 1:
            raise ValueError("check_every must be >= 1")


@dataclass
class SolveInfo:
    """Per-block solver diagnostics for a stacked solve (arrays of length B)."""

    iterations: np.ndarray
    converged: np.ndarray
    residual_norm: np.ndarray
    wall_time_s: float


@dataclass
class RecoveryResult:
    x_hat: np.ndarray
    alpha_hat: np.ndarray
    iterations: int
    converged: bool
    residual_norm: float
    wall_time_s: float


@dataclass
class BlockDiagnostics:
    block_ordinal: int
    block_len: int
    m: int
    iterations: int
    converged: bool
    residual_norm: float
    wall_time_s: float
    fallback: bool = False


@dataclass
class TripDiagnostics:
    blocks: list[BlockDiagnostics] = field(default_factory=list)

    @property
    def mean_time_per_recovery_s(self) -> float:
        times = [b.wall_time_s for b in self.blocks if not b.fallback]
        return float(np.mean(times)) if times else 0.0

    @property
    def unconverged(self) -> list[int]:
        return [b.block_ordinal for b in self.blocks if not (b.converged or b.fallback)]

    @property
    def fallbacks(self) -> list[int]:
        return [b.block_ordinal for b in self.blocks if b.fallback]


def _soft(w, thresh):
    return w - np.clip(w, -thresh, thresh)


# unchecked transforms for the inner loops; inputs there are finite by construction
def _fwd(x):
    return _fft.dct(x, type=2, norm="ortho", axis=-1, overwrite_x=True)


def _inv(a):
    return _fft.idct(a, type=2, norm="ortho", axis=-1)


def _admm(mask, yf, cfg):
    """ADMM on normalised data.  Returns (alpha, iterations, converged)."""
    b, n = mask.shape
    sqrt_n = np.sqrt(n)
    alpha = np.zeros((b, n))
    sparse = np.zeros((b, n))
    iters = np.full(b, cfg.max_iters, dtype=np.int64)
    conv = np.zeros(b, dtype=bool)

    rows = np.arange(b)
    z = _project(mask, np.zeros((b, n)), yf)
    u = np.zeros((b, n))
    rho = np.full((b, 1), cfg.penalty_rho)
    a = z
    for k in range(1, cfg.max_iters + 1):
        v = z - u
        a = _project(mask, v, yf)
        z_old = z
        w = a + u
        z = _soft(w, 1.0 / rho)
        u = w - z
        if k % cfg.check_every and k != cfg.max_iters:
            continue
        r_pri = np.linalg.norm(a - z, axis=1)
        r_dual = rho[:, 0] * np.linalg.norm(z - z_old, axis=1)
        eps_pri = sqrt_n * cfg.abs_tol + cfg.rel_tol * np.maximum(
            np.linalg.norm(a, axis=1), np.linalg.norm(z, axis=1))
        eps_dual = sqrt_n * cfg.abs_tol + cfg.rel_tol * rho[:, 0] * np.linalg.norm(u, axis=1)
        done = (r_pri <= eps_pri) & (r_dual <= eps_dual)
        if done.any():
            alpha[rows[done]] = a[done]
            sparse[rows[done]] = z[done]
            iters[rows[done]] = k
            conv[rows[done]] = True
            keep = ~done
            rows, mask, yf = rows[keep], mask[keep], yf[keep]
            z, u, rho, a = z[keep], u[keep], rho[keep], a[keep]
            r_pri, r_dual = r_pri[keep], r_dual[keep]
            if rows.size == 0:
                break
        if cfg.adaptive_rho:
            scale = np.where(r_pri > 10 * r_dual, 2.0,
                             np.where(r_dual > 10 * r_pri, 0.5, 1.0))[:, None]
            rho = rho * scale
            u = u / scale
    alpha[rows] = a
    sparse[rows] = z
    return alpha, iters, conv, sparse


def _polish(mask, yf, alpha, sparse):
    """Least-squares refit on the support of ``sparse``, row by row in place."""
    n = mask.shape[1]
    for b in range(mask.shape[0]):
        sup = np.flatnonzero(sparse[b])
        obs = np.flatnonzero(mask[b])
        if not 0 < sup.size <= obs.size // 2:
            continue
        cols = idct(np.eye(n)[sup])[:, obs].T
        y = yf[b, obs]
        coef, *_ = np.linalg.lstsq(cols, y, rcond=None)
        if np.linalg.norm(cols @ coef - y) > 1e-10 * max(np.linalg.norm(y), 1.0):
            continue
        if np.abs(coef).sum() <= np.abs(alpha[b]).sum():
            alpha[b] = 0.0
            alpha[b, sup] = coef


def _project(mask, v, yf):
    """Project ``v`` onto ``{a : Theta a = y}`` for stacked masks."""
    resid = np.where(mask, _inv(v) - yf, 0.0)
    return v - _fwd(resid)


def _fista(mask, yf, cfg):
    b, n = mask.shape
    sqrt_n = np.sqrt(n)
    grad0 = dct_forward(yf)
    lam = cfg.lasso_lambda * np.max(np.abs(grad0), axis=1, keepdims=True)
    alpha = np.zeros((b, n))
    iters = np.full(b, cfg.max_iters, dtype=np.int64)
    conv = np.zeros(b, dtype=bool)
    rows = np.arange(b)
    x = np.zeros((b, n))
    yk = x.copy()
    t = 1.0
    for k in range(1, cfg.max_iters + 1):
        resid = np.where(mask, _inv(yk) - yf, 0.0)
        x_new = _soft(yk - _fwd(resid), lam)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        yk = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if k % cfg.check_every and k != cfg.max_iters:
            continue
        # KKT violation of the lasso optimality conditions at x
        g = _fwd(np.where(mask, _inv(x) - yf, 0.0))
        viol = np.where(x != 0, np.abs(g + lam * np.sign(x)), np.maximum(np.abs(g) - lam, 0.0))
        done = (np.linalg.norm(viol, axis=1)
                <= sqrt_n * cfg.abs_tol + cfg.rel_tol * np.linalg.norm(grad0, axis=1))
        if done.any():
            alpha[rows[done]] = x[done]
            iters[rows[done]] = k
            conv[rows[done]] = True
            keep = ~done
            rows, mask, yf, x, yk, lam, grad0 = (rows[keep], mask[keep], yf[keep], x[keep],
                                                 yk[keep], lam[keep], grad0[keep])
            if rows.size == 0:
                break
    alpha[rows] = x
    return alpha, iters, conv, None


def solve_stacked(op: SensingOperator, y_full, cfg: SolverConfig = SolverConfig()):
    """Solve one l1 program per row of a stacked operator.

    Parameters
    ----------
    op : SensingOperator
        Stack of ``B`` equal-length masks.
    y_full : array, shape (B, N)
        Observations placed at the kept positions; other entries are ignored.

    Returns
    -------
    alpha : array, shape (B, N)
    info : SolveInfo
    """
    mask = op.mask
    y_full = np.where(mask, np.asarray(y_full, dtype=float).reshape(mask.shape), 0.0)
    if not np.all(np.isfinite(y_full)):
        raise RecoveryError("observations contain non-finite values")
    scale = np.sqrt(np.sum(y_full ** 2, axis=1) / op.m)
    zero = scale == 0
    scale = np.where(zero, 1.0, scale)[:, None]

    t0 = time.perf_counter()
    solver = _admm if cfg.method == "admm" else _fista
    yn = y_full / scale
    alpha_n, iters, conv, sparse = solver(mask, yn, cfg)
    if cfg.polish and sparse is not None:
        _polish(mask, yn, alpha_n, sparse)
    wall = time.perf_counter() - t0

    alpha = alpha_n * scale
    alpha[zero] = 0.0
    iters[zero] = 0
    conv[zero] = True
    resid = np.linalg.norm(np.where(mask, idct(alpha) - y_full, 0.0), axis=1)
    return alpha, SolveInfo(iters, conv, resid, wall)


def solve_basis_pursuit(op: SensingOperator, y, cfg: SolverConfig = SolverConfig()):
    """Recover DCT coefficients of a single block from compact observations.

    Returns ``(alpha_hat, info)`` where ``info`` carries scalar diagnostics.
    """
    if op.batch != 1:
        raise ValueError("use solve_stacked for stacked operators")
    y = np.asarray(y, dtype=float)
    m, n = op.shape
    if y.shape != (m,):
        if y.ndim == 1 and y.size > n:
            raise RecoveryError("more samples than block length")
        raise RecoveryError(f"expected {m} observations, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise RecoveryError("observations contain non-finite values")
    alpha, info = solve_stacked(op, op.scatter(y)[None, :], cfg)
    return alpha[0], SolveInfo(int(info.iterations[0]), bool(info.converged[0]),
                               float(info.residual_norm[0]), info.wall_time_s)


def recover_block(block: CompressedBlock, cfg: SolverConfig = SolverConfig()) -> RecoveryResult:
    if block.m == 0:
        raise RecoveryError("empty block: nothing to recover from")
    return recover_blocks([block], cfg)[0]


def recover_blocks(blocks, cfg: SolverConfig = SolverConfig()) -> list[RecoveryResult | None]:
    """Recover many blocks, batching those of equal length.

    Blocks with no kept samples yield ``None``.  With ``cfg.center`` each
    block is solved on its stored samples minus their mean; the mean goes
    back into the DC coefficient.  Wall time of a batched solve
    is shared among its blocks in proportion to their iteration counts.
    """
    blocks = list(blocks)
    out: list[RecoveryResult | None] = [None] * len(blocks)
    groups: dict[int, list[int]] = {}
    for i, blk in enumerate(blocks):
        if blk.m:
            groups.setdefault(blk.block_len, []).append(i)
    for n in sorted(groups):
        idx = groups[n]
        members = [blocks[i] for i in idx]
        op = SensingOperator.from_blocks(members)
        y_full = np.zeros((len(idx), n))
        level = np.zeros(len(idx))
        for row, blk in enumerate(members):
            if cfg.center:
                level[row] = blk.kept_values.mean()
            y_full[row, blk.kept_indices] = blk.kept_values - level[row]
        alpha, info = solve_stacked(op, y_full, cfg)
        alpha[:, 0] += level * np.sqrt(n)
        x_hat = idct(alpha)
        weights = np.maximum(info.iterations, 1).astype(float)
        share = info.wall_time_s * weights / weights.sum()
        for row, (i, blk) in enumerate(zip(idx, members)):
            xh = x_hat[row]
            if cfg.enforce_observed:
                xh[blk.kept_indices] = blk.kept_values
            out[i] = RecoveryResult(xh, alpha[row], int(info.iterations[row]),
                                    bool(info.converged[row]),
                                    float(info.residual_norm[row]), float(share[row]))
    return out


def assemble_blocks(blocks, results):
    """Concatenate per-block recoveries of one trip in block order.

    A block with no kept samples (``result is None``) is filled with the last
    recovered value of the preceding block, or zeros for the first block,
    and flagged as a fallback.
    """
    pieces = []
    diag = TripDiagnostics()
    last = 0.0
    for blk, res in zip(blocks, results):
        if res is None:
            pieces.append(np.full(blk.block_len, last))
            diag.blocks.append(BlockDiagnostics(blk.block_ordinal, blk.block_len, 0, 0,
                                                False, 0.0, 0.0, fallback=True))
            log.debug("block %d has no kept samples; constant fill", blk.block_ordinal)
        else:
            pieces.append(res.x_hat)
            diag.blocks.append(BlockDiagnostics(blk.block_ordinal, blk.block_len, blk.m,
                                                res.iterations, res.converged,
                                                res.residual_norm, res.wall_time_s))
        last = float(pieces[-1][-1])
    samples = np.concatenate(pieces) if pieces else np.zeros(0)
    return samples, diag


def recover_trip(trip: CompressedTrip, cfg: SolverConfig = SolverConfig()):
    """Recover a full-rate signal from a captured trip.

    Returns
    -------
    signal : Signal
    diagnostics : TripDiagnostics
    """
    try:
        results = recover_blocks(trip.blocks, cfg)
    except ValueError as exc:
        bad = next((b.block_ordinal for b in trip.blocks
                    if b.m and not np.all(np.isfinite(b.kept_values))), None)
        where = f"block {bad}: " if bad is not None else ""
        raise RecoveryError(f"{where}{exc}") from exc
    samples, diag = assemble_blocks(trip.blocks, results)
    return Signal(samples, trip.rate_hz, trip.unit), diag
