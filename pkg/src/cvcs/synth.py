"""Synthetic 10 Hz speed and yaw-rate trips.

Speed: a cruise target is held for exponentially distributed periods and
occasionally drops to zero (stops).  The target passes through a first-order
lag and the speed tracks it with a critically damped second-order response,
plus a small Ornstein-Uhlenbeck jitter.  The result is smooth (continuous
acceleration) and bounded to [0, 80] MPH.

Yaw rate: an OU process around zero with turn events superimposed as
raised-cosine pulses, clipped to [-360, 360] deg/s.  Most mass lies in
[-60, 60).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SpeedParams", "YawParams", "speed_profile", "yaw_profile", "generate_corpus"]

SPEED_MAX_MPH = 80.0
YAW_MAX_DEG_S = 360.0


@dataclass(frozen=True)
class SpeedParams:
    hold_s: float = 45.0
    natural_freq: float = 0.25
    target_lag_s: float = 5.0
    p_stop: float = 0.1
    cruise_range: tuple[float, float] = (10.0, 75.0)
    jitter_mph: float = 0.2
    jitter_tau_s: float = 8.0


@dataclass(frozen=True)
class YawParams:
    wander_deg_s: float = 8.0
    wander_tau_s: float = 2.0
    turn_every_s: float = 90.0
    turn_peak: tuple[float, float] = (40.0, 300.0)
    turn_len_s: tuple[float, float] = (2.0, 8.0)


def speed_profile(rng: np.random.Generator, n: int, rate_hz: float = 10.0,
                  params: SpeedParams = SpeedParams()) -> np.ndarray:
    dt = 1.0 / rate_hz
    p = params
    switch = rng.random(n) < dt / p.hold_s
    targets = np.where(rng.random(n) < p.p_stop, 0.0, rng.uniform(*p.cruise_range, size=n))
    eps = rng.standard_normal(n)
    phi = np.exp(-dt / p.jitter_tau_s)
    kick = p.jitter_mph * np.sqrt(1.0 - phi * phi)
    gain = dt / p.target_lag_s
    wn = p.natural_freq

    target = rng.uniform(*p.cruise_range)
    lagged = cur = target
    acc = jit = 0.0
    out = np.empty(n)
    for i in range(n):
        if switch[i]:
            target = targets[i]
        lagged += gain * (target - lagged)
        acc += dt * (wn * wn * (lagged - cur) - 2.0 * wn * acc)
        cur += dt * acc
        jit = phi * jit + kick * eps[i]
        # jitter fades out near standstill so stops stay at zero
        out[i] = cur + jit * min(cur / 10.0, 1.0)
    return np.clip(out, 0.0, SPEED_MAX_MPH)


def yaw_profile(rng: np.random.Generator, n: int, rate_hz: float = 10.0,
                params: YawParams = YawParams()) -> np.ndarray:
    dt = 1.0 / rate_hz
    p = params
    phi = np.exp(-dt / p.wander_tau_s)
    eps = rng.standard_normal(n) * p.wander_deg_s * np.sqrt(1.0 - phi * phi)
    wander = np.empty(n)
    w = rng.standard_normal() * p.wander_deg_s
    for i in range(n):
        w = phi * w + eps[i]
        wander[i] = w

    out = wander
    n_turns = rng.poisson(n * dt / p.turn_every_s)
    for _ in range(n_turns):
        start = rng.integers(0, n)
        length = max(int(rng.uniform(*p.turn_len_s) * rate_hz), 2)
        peak = rng.uniform(*p.turn_peak) * rng.choice([-1.0, 1.0])
        k = np.arange(length)
        pulse = peak * 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (length - 1)))
        stop = min(start + length, n)
        out[start:stop] += pulse[: stop - start]
    return np.clip(out, -YAW_MAX_DEG_S, YAW_MAX_DEG_S)


def generate_corpus(n_trips: int, length: int, seed: int = 0, profile: str = "both",
                    rate_hz: float = 10.0):
    """Yield ``(trip_id, t, speed_mph, yaw_deg_s)`` tuples of arrays.

    ``profile`` selects which channels are synthesised; a channel that is not
    selected is written as zeros so the CSV schema stays fixed.
    """
    if n_trips < 1 or length < 1:
        raise ValueError("trips and length must both be >= 1")
    if profile not in ("speed", "yaw", "both"):
        raise ValueError(f"unknown profile {profile!r}")
    root = np.random.SeedSequence(seed)
    for k, child in enumerate(root.spawn(n_trips)):
        rng_speed, rng_yaw = (np.random.default_rng(s) for s in child.spawn(2))
        t = np.arange(length) / rate_hz
        speed = (speed_profile(rng_speed, length, rate_hz) if profile != "yaw"
                 else np.zeros(length))
        yaw = (yaw_profile(rng_yaw, length, rate_hz) if profile != "speed"
               else np.zeros(length))
        yield f"trip{k:05d}", t, speed, yaw
