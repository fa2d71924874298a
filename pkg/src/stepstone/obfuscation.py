"""Varying-rate chaff padding and random timing perturbation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .traffic import DOWN, UP, Trace

K_MIN, K_MAX = 5, 15


@dataclass(frozen=True)
class DelayProfile:
    p_delay: float
    d_max: float

    def __post_init__(self):
        if not 0 <= self.p_delay <= 1:
            raise ValueError("p_delay must lie in [0, 1]")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")

    @property
    def expected_delay(self) -> float:
        return self.p_delay * self.d_max / 2


DELAY_PROFILES = {
    "light_v1": DelayProfile(0.25, 1.0),
    "light_v2": DelayProfile(0.50, 0.5),
    "heavy": DelayProfile(0.75, 1.0),
}


@dataclass(frozen=True, eq=False)
class PaddingPlan:
    n_dummy: int
    segments: int
    weights: np.ndarray
    counts: np.ndarray
    rates: np.ndarray
    times: np.ndarray
    directions: np.ndarray
    sizes: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    @classmethod
    def empty(cls) -> "PaddingPlan":
        z = np.zeros(0)
        return cls(0, K_MIN, np.full(K_MIN, 1 / K_MIN), np.zeros(K_MIN, np.int64),
                   np.zeros(K_MIN), z, z.astype(np.int8), z.astype(np.int64))


def _allocate(weights: np.ndarray, total: int) -> np.ndarray:
    counts = np.round(weights * total).astype(np.int64)
    counts[-1] += total - counts.sum()
    if counts[-1] < 0:
        # rounding overshot; take the excess from the largest segments
        deficit = -counts[-1]
        counts[-1] = 0
        for k in np.argsort(-counts, kind="stable"):
            take = min(deficit, counts[k])
            counts[k] -= take
            deficit -= take
            if not deficit:
                break
    return counts


def plan_padding(trace: Trace, overhead_pct: float, rng: np.random.Generator) -> PaddingPlan:
    """Sample a bursty chaff schedule for ``trace``.

    The dummy count is drawn around ``overhead_pct`` percent of the packet
    count and spread over K equal-length segments with Dirichlet weights;
    each segment fires as a Poisson process until its end.
    """
    if len(trace) == 0:
        raise ValueError("cannot pad an empty trace")
    if overhead_pct <= 0:
        raise ValueError("overhead_pct must be positive")
    duration = trace.duration
    if duration <= 0:
        raise ValueError("cannot pad a zero-duration trace")
    mean = overhead_pct / 100 * len(trace)
    n_dummy = max(0, int(np.round(rng.normal(mean, 0.1 * mean))))
    k = int(rng.integers(K_MIN, K_MAX + 1))
    weights = rng.dirichlet(np.ones(k))
    counts = _allocate(weights, n_dummy)
    seg_len = duration / k
    rates = counts / seg_len
    start0 = trace.timestamps[0]
    up_sizes = trace.sizes[trace.directions == UP]
    down_sizes = trace.sizes[trace.directions == DOWN]
    p_up = len(up_sizes) / len(trace)
    times = []
    for seg, (n, rate) in enumerate(zip(counts, rates)):
        if n == 0:
            continue
        lo = start0 + seg * seg_len
        t = lo + np.cumsum(rng.exponential(1 / rate, n))
        times.append(t[t < lo + seg_len])
    times = np.concatenate(times) if times else np.zeros(0)
    dirs = np.where(rng.random(len(times)) < p_up, UP, DOWN)
    sizes = np.zeros(len(times), np.int64)
    n_up = int((dirs == UP).sum())
    if n_up:
        sizes[dirs == UP] = rng.choice(up_sizes, n_up)
    if len(times) - n_up:
        sizes[dirs == DOWN] = rng.choice(down_sizes, len(times) - n_up)
    return PaddingPlan(n_dummy, k, weights, counts, rates, times, dirs.astype(np.int8), sizes)


def apply_padding(trace: Trace, plan: PaddingPlan) -> Trace:
    """Merge chaff into the trace; the dummy mask records provenance."""
    if len(plan) == 0:
        return trace
    base_mask = trace.dummy if trace.dummy is not None else np.zeros(len(trace), bool)
    return Trace.from_unsorted(
        np.concatenate([trace.timestamps, plan.times]),
        np.concatenate([trace.directions, plan.directions]),
        np.concatenate([trace.sizes, plan.sizes]),
        trace.capture_point,
        np.concatenate([base_mask, np.ones(len(plan), bool)]))


def apply_delays(trace: Trace, profile: DelayProfile, rng: np.random.Generator) -> Trace:
    """Delay each packet with probability p_delay by U(0, d_max) and re-sort."""
    hit = rng.random(len(trace)) < profile.p_delay
    delay = np.where(hit, rng.uniform(0, profile.d_max, len(trace)), 0.0)
    return Trace.from_unsorted(trace.timestamps + delay, trace.directions, trace.sizes,
                               trace.capture_point, trace.dummy)


def obfuscate(trace: Trace, rng: np.random.Generator, overhead_pct: float | None = None,
              profile: DelayProfile | str | None = None) -> Trace:
    """Padding then delays, each optional."""
    if overhead_pct:
        trace = apply_padding(trace, plan_padding(trace, overhead_pct, rng))
    if isinstance(profile, str):
        profile = None if profile == "none" else DELAY_PROFILES[profile]
    if profile is not None:
        trace = apply_delays(trace, profile, rng)
    return trace
