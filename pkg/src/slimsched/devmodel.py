"""Parametric GPU cost model: service time, VRAM footprint, utilization, power.

The latency/energy knee is not fitted here. It emerges in the simulator from
queueing on a device that executes dispatched batches one at a time.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

MB = 1e6
GB = 1e9


@dataclass(frozen=True)
class DeviceSpec:
    id: int
    t0: float
    kappa: float
    p_idle: float
    p_peak: float
    vram_total: float
    m_max: float
    util_window: float = 1.0
    name: str = ""

    def __post_init__(self):
        if not 0 < self.p_idle <= self.p_peak:
            raise ValueError("require 0 < p_idle <= p_peak")
        if self.t0 < 0:
            raise ValueError("t0 must be >= 0")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.m_max <= self.vram_total:
            raise ValueError("require 0 < m_max <= vram_total")
        if self.util_window <= 0:
            raise ValueError("util_window must be positive")


@dataclass(frozen=True)
class SegmentProfile:
    compute_weight: float
    param_base: float
    act_base: float

    def __post_init__(self):
        if min(self.compute_weight, self.param_base, self.act_base) <= 0:
            raise ValueError("segment profile values must be positive")


@dataclass
class DeviceState:
    busy_intervals: list[tuple[float, float]] = field(default_factory=list)
    vram_used: float = 0.0
    energy_accum: float = 0.0
    last_power_sample: float = 0.0
    t_power: float = 0.0  # time of the last power change
    free_at: float = 0.0  # when the device finishes its committed work
    busy_total: float = 0.0
    # prefix sums over busy_intervals, valid while intervals stay disjoint
    _ends: list[float] = field(default_factory=list, repr=False)
    _cum: list[float] = field(default_factory=list, repr=False)
    _disjoint: bool = True


def service_time(dev: DeviceSpec, seg: SegmentProfile, w: float, b: int) -> float:
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    return dev.t0 + dev.kappa * seg.compute_weight * b * w * w


def param_bytes(seg: SegmentProfile, w: float) -> float:
    return seg.param_base * w * w


def activation_bytes(seg: SegmentProfile, w: float, b: int) -> float:
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    return seg.act_base * b * w * w


def add_busy(state: DeviceState, start: float, end: float) -> None:
    if state.busy_intervals and start < state.busy_intervals[-1][1]:
        state._disjoint = False
    state.busy_intervals.append((start, end))
    state._ends.append(end)
    state._cum.append((state._cum[-1] if state._cum else 0.0) + (end - start))
    state.busy_total += end - start


def busy_until(state: DeviceState, t: float) -> float:
    # cumulative busy time up to t, on disjoint intervals sorted by start
    i = bisect.bisect_right(state._ends, t)
    if i:
        total = state._cum[i - 1]
    else:
        # cumulative total before the first retained interval
        total = state._cum[0] - (state._ends[0] - state.busy_intervals[0][0])
    if i < len(state._ends):
        start = state.busy_intervals[i][0]
        if start < t:
            total += t - start
    return total


def utilization(state: DeviceState, now: float, window: float) -> float:
    """Busy fraction of [now - window, now], clamped to [0, 1]."""
    if now < 0:
        raise ValueError("now must be >= 0")
    lo = now - window
    if state._disjoint and state._ends and len(state._ends) == len(state.busy_intervals):
        busy = busy_until(state, now) - busy_until(state, lo)
        return min(1.0, max(0.0, busy / window))
    busy = 0.0
    for start, end in state.busy_intervals:
        a = start if start > lo else lo
        b = end if end < now else now
        if b > a:
            busy += b - a
    return min(1.0, max(0.0, busy / window))


def prune_intervals(state: DeviceState, now: float, window: float) -> None:
    lo = now - window
    ivs = state.busy_intervals
    if not ivs or ivs[0][1] > lo:
        return
    if len(state._ends) == len(ivs):
        if len(ivs) < 512:
            return
        k = bisect.bisect_right(state._ends, lo)
        del ivs[:k], state._ends[:k], state._cum[:k]
    else:
        state.busy_intervals = [iv for iv in ivs if iv[1] > lo]


def power_draw(dev: DeviceSpec, u: float) -> float:
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"utilization must lie in [0, 1], got {u}")
    return dev.p_idle + (dev.p_peak - dev.p_idle) * u


def accumulate_energy(state: DeviceState, power: float, dt: float) -> float:
    if dt < 0:
        raise ValueError(f"negative time step {dt}")
    added = power * dt
    state.energy_accum += added
    return added


def set_power(state: DeviceState, power: float, now: float) -> None:
    """Close the current constant-power interval and start a new one."""
    accumulate_energy(state, state.last_power_sample, now - state.t_power)
    state.last_power_sample = power
    state.t_power = now


def fast_device(id: int) -> DeviceSpec:
    return DeviceSpec(id=id, t0=0.002, kappa=0.001, p_idle=60.0, p_peak=250.0,
                      vram_total=11 * GB, m_max=8 * GB, name="fast")


def slow_device(id: int) -> DeviceSpec:
    return DeviceSpec(id=id, t0=0.003, kappa=0.0025, p_idle=50.0, p_peak=165.0,
                      vram_total=6 * GB, m_max=4.5 * GB, name="slow")


def default_cluster() -> list[DeviceSpec]:
    return [fast_device(0), fast_device(1), slow_device(2)]


def default_segments() -> list[SegmentProfile]:
    return [
        SegmentProfile(1.0, 8 * MB, 4 * MB),
        SegmentProfile(1.5, 16 * MB, 3 * MB),
        SegmentProfile(2.0, 32 * MB, 2 * MB),
        SegmentProfile(1.0, 8 * MB, 1 * MB),
    ]
