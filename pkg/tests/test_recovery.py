import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cvcs.evaluation import rmse
from cvcs.recovery import (RecoveryError, SolverConfig, recover_block, recover_blocks,
                           recover_trip, solve_basis_pursuit, solve_stacked)
from cvcs.sampler import (CaptureConfig, CompressedBlock, SensingOperator, capture_block,
                          capture_stream)
from cvcs.signal_core import Signal, dct_forward, idct

from oracles import l0_oracle, planted, speed_like_block

TIGHT = SolverConfig(max_iters=20000, abs_tol=1e-10, rel_tol=1e-9)


def test_full_observation_is_exact(rng):
    y = rng.normal(size=32)
    op = SensingOperator(np.ones(32, bool))
    alpha, info = solve_basis_pursuit(op, y)
    np.testing.assert_allclose(alpha, dct_forward(y), atol=1e-9)
    assert info.residual_norm < 1e-9


def test_single_spike_matches_exhaustive_search():
    rng = np.random.default_rng(11)
    for _ in range(10):
        alpha = planted(rng, 16, 1)
        mask = np.zeros(16, bool)
        mask[rng.choice(16, 8, replace=False)] = True
        y = idct(alpha)[mask]
        sup, ref = l0_oracle(mask, y, 1)
        got, _ = solve_basis_pursuit(SensingOperator(mask), y)
        assert np.max(np.abs(got - alpha)) < 1e-4
        assert np.max(np.abs(got - ref)) < 1e-4


def test_two_spike_support_matches_l0_oracle():
    hits = 0
    for s in range(100):
        rng = np.random.default_rng([7, s])
        alpha = planted(rng, 12, 2)
        mask = np.zeros(12, bool)
        mask[rng.choice(12, 8, replace=False)] = True
        y = idct(alpha)[mask]
        sup, _ = l0_oracle(mask, y, 2)
        got, _ = solve_basis_pursuit(SensingOperator(mask), y)
        top = tuple(sorted(np.argsort(-np.abs(got))[:2]))
        rest = np.delete(got, list(sup))
        hits += top == tuple(sup) and np.all(np.abs(rest) < 1e-3 * np.abs(got).max())
    assert hits >= 95


def test_constant_block_recovered_exactly():
    for seed in range(5):
        blk = capture_block(np.full(200, 42.5), 0.1, seed, 0)
        res = recover_block(blk)
        assert rmse(np.full(200, 42.5), res.x_hat) < 1e-6


def test_single_sample_constant_block():
    blk = CompressedBlock(np.array([7.0]), np.array([3]), 50)
    res = recover_block(blk)
    np.testing.assert_allclose(res.x_hat, 7.0, atol=1e-6)


def test_ratio_one_block_is_exact(rng):
    x = rng.normal(50, 5, size=300)
    res = recover_block(capture_block(x, 1.0, 0, 0))
    np.testing.assert_allclose(res.x_hat, x, atol=1e-9)


def test_speed_block_high_ratio_beats_low_ratio():
    x = speed_like_block(500)
    err = {r: np.mean([rmse(x, recover_block(capture_block(x, r, s, 0)).x_hat)
                       for s in range(5)]) for r in (0.1, 0.6)}
    assert err[0.6] < err[0.1]


def test_trip_ratio_one_identical(rng):
    x = Signal(rng.normal(40, 3, size=1234))
    rec, diag = recover_trip(capture_stream(x, CaptureConfig(500, 1.0, 2)))
    np.testing.assert_allclose(rec.samples, x.samples, atol=1e-9)
    assert len(diag.blocks) == 3 and not diag.unconverged


def test_trip_of_constant_blocks():
    x = np.repeat(np.arange(10, dtype=float) * 3 + 20, 100)
    rec, _ = recover_trip(capture_stream(Signal(x), CaptureConfig(100, 0.2, 4)))
    assert rmse(x, rec.samples) < 1e-6


def test_trip_recovery_is_deterministic():
    x = Signal(speed_like_block(1500))
    trip = capture_stream(x, CaptureConfig(500, 0.2, 8))
    a, _ = recover_trip(trip)
    b, _ = recover_trip(trip)
    assert a.samples.tobytes() == b.samples.tobytes()


def test_empty_block_falls_back_to_previous_value():
    full = CompressedBlock(np.full(4, 9.0), np.arange(4), 4, 0)
    empty = CompressedBlock(np.zeros(0), np.zeros(0, int), 4, 1)
    from cvcs.sampler import CompressedTrip
    rec, diag = recover_trip(CompressedTrip([full, empty], 0))
    np.testing.assert_allclose(rec.samples, 9.0)
    assert diag.fallbacks == [1] and diag.unconverged == []
    first, d0 = recover_trip(CompressedTrip([CompressedBlock(np.zeros(0), np.zeros(0, int), 3, 0)], 0))
    np.testing.assert_array_equal(first.samples, 0.0)
    assert d0.fallbacks == [0]


def test_bad_observations_rejected():
    op = SensingOperator(np.array([1, 1, 0, 0], bool))
    with pytest.raises(RecoveryError):
        solve_basis_pursuit(op, np.array([1.0, np.nan]))
    with pytest.raises(RecoveryError):
        solve_basis_pursuit(op, np.ones(3))


def test_solver_config_validation():
    for bad in (dict(max_iters=0), dict(abs_tol=0.0), dict(rel_tol=-1.0), dict(method="omp")):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_lasso_mode_recovers_sparse_signal():
    rng = np.random.default_rng(5)
    alpha = planted(rng, 128, 4)
    mask = rng.random(128) < 0.5
    x = idct(alpha)
    got, info = solve_basis_pursuit(SensingOperator(mask), x[mask],
                                    SolverConfig(method="lasso", lasso_lambda=1e-4,
                                                 max_iters=5000))
    assert rmse(x, idct(got)) < 1e-2 * np.sqrt(np.mean(x ** 2))


def test_stacked_matches_single():
    rng = np.random.default_rng(2)
    masks = rng.random((3, 64)) < 0.4
    xs = np.stack([idct(planted(rng, 64, 3)) for _ in range(3)])
    alpha, _ = solve_stacked(SensingOperator(masks), xs, TIGHT)
    for i in range(3):
        one, _ = solve_basis_pursuit(SensingOperator(masks[i]), xs[i][masks[i]], TIGHT)
        np.testing.assert_allclose(alpha[i], one, atol=1e-6)


@pytest.mark.invariant
def test_recovery_time_grows_with_block_length():
    x = speed_like_block(6000)

    def mean_time(n):
        blocks = [capture_block(x[lo:lo + n], 0.4, 1, k)
                  for k, lo in enumerate(range(0, 6000, n))]
        res = recover_blocks(blocks)
        return np.mean([r.wall_time_s for r in res])

    mean_time(100)  # warm the transform plans
    assert mean_time(1000) > mean_time(100)


# ---- properties ---------------------------------------------------------------

@pytest.mark.invariant
@given(st.integers(8, 256), st.floats(0.1, 1.0), st.integers(0, 10 ** 6))
def test_feasibility_and_observed_exactness(n, ratio, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(30, 10, size=n)
    blk = capture_block(x, ratio, seed, 0)
    if blk.m == 0:
        return
    cfg = SolverConfig()
    res = recover_block(blk, cfg)
    resid = np.linalg.norm(idct(res.alpha_hat)[blk.kept_indices] - blk.kept_values)
    assert res.residual_norm == pytest.approx(resid, abs=1e-9 * (1 + resid))
    if res.converged:
        assert res.residual_norm <= 10 * cfg.abs_tol * np.sqrt(blk.m)
    assert res.x_hat[blk.kept_indices].tobytes() == blk.kept_values.tobytes()


@pytest.mark.invariant
@given(st.integers(8, 32), st.integers(1, 2), st.integers(0, 10 ** 6))
def test_l1_no_worse_than_l0_oracle(n, k, seed):
    rng = np.random.default_rng(seed)
    alpha = planted(rng, n, k)
    m = rng.integers(4 * k, n + 1)
    mask = np.zeros(n, bool)
    mask[rng.choice(n, m, replace=False)] = True
    y = idct(alpha)[mask]
    _, oracle = l0_oracle(mask, y, k)
    got, _ = solve_basis_pursuit(SensingOperator(mask), y, TIGHT)
    assert np.abs(got).sum() <= np.abs(oracle).sum() + 1e-4


@pytest.mark.invariant
def test_mean_error_decreases_with_ratio():
    x = speed_like_block(200)
    ratios = (0.1, 0.2, 0.4, 0.6, 0.8)
    violations = pairs = 0
    for rep in range(5):
        means = []
        for r in ratios:
            blocks = [capture_block(x, r, 1000 * rep + s, 0) for s in range(50)]
            res = recover_blocks(blocks)
            means.append(np.mean([rmse(x, rr.x_hat) if rr is not None else rmse(x, 0 * x)
                                  for rr in res]))
        violations += sum(b > a for a, b in zip(means, means[1:]))
        pairs += len(ratios) - 1
    assert violations <= 0.05 * pairs
