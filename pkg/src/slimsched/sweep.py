"""Closed-loop load sweep on a single device.

For each width and client population, a fixed number of clients cycle through
think time and a full four-segment pass, all routed to the one device. The
measurement window is [warmup, horizon).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

from .devmodel import busy_until
from .simkernel import ClusterConfig, PinnedRouter, Simulator, WorkloadSpec


@dataclass(frozen=True)
class SweepPoint:
    width: float
    batch: int  # client population
    utilization: float
    mean_latency: float
    mean_power: float
    completions: int

    def row(self) -> list:
        return [self.width, self.batch, f"{self.utilization:.6f}",
                f"{self.mean_latency:.6f}", f"{self.mean_power:.6f}", self.completions]


COLUMNS = ["width", "batch", "utilization", "mean_latency_s", "mean_power_w", "completions"]


def _energy_at(state, t: float) -> float:
    return state.energy_accum + state.last_power_sample * (t - state.t_power)


def measure_point(cluster: ClusterConfig, device: int, width_index: int, clients: int,
                  think_time: float, horizon: float, warmup: float, seed: int) -> SweepPoint:
    widths = cluster.widths
    single = ClusterConfig([cluster.devices[device]], cluster.segments, [cluster.knobs[device]],
                           groups=(max(cluster.groups),), router_period=0.0,
                           telemetry_period=cluster.telemetry_period,
                           unloader_period=cluster.unloader_period)
    demand = tuple(1.0 if i == width_index else 0.0 for i in range(len(widths)))
    sub = zlib.crc32(f"sweep/{width_index}/{clients}".encode())
    wl = WorkloadSpec(rate=1.0, horizon=horizon, width_demand=demand, seed=seed ^ sub,
                      clients=clients, think_time=think_time)
    sim = Simulator(single, wl, PinnedRouter(0))
    marks = {}

    def mark(name):
        def fn(s):
            st = s.servers[0].state
            marks[name] = (busy_until(st, s.now) if st.busy_intervals else 0.0,
                           _energy_at(st, s.now))
        return fn

    sim.at(warmup, mark("start"))
    sim.at(horizon, mark("end"))
    sim.run()
    span = horizon - warmup
    (b0, e0), (b1, e1) = marks["start"], marks["end"]
    lat = [c.latency for c in sim.completions if warmup <= c.t_arrival < horizon]
    mean_lat = math.fsum(lat) / len(lat) if lat else float("nan")
    # busy-time differences carry float noise; saturated points must read exactly 1
    util = min(1.0, round((b1 - b0) / span, 12))
    return SweepPoint(widths[width_index], clients, util, mean_lat,
                      (e1 - e0) / span, len(lat))


def run_sweep(cluster: ClusterConfig, device: int, grid, think_time: float,
              horizon: float, warmup: float, seed: int) -> list[SweepPoint]:
    if not 0 <= device < len(cluster.devices):
        raise ValueError(f"no device with index {device}")
    return [measure_point(cluster, device, wi, b, think_time, horizon, warmup, seed)
            for wi in range(len(cluster.widths)) for b in grid]


def knee_ratio(points: list[SweepPoint], width: float, hi: float = 0.95,
               lo: float = 0.70) -> float:
    """Mean latency over points with U >= hi divided by the mean over U <= lo."""
    pts = [p for p in points if p.width == width]
    high = [p.mean_latency for p in pts if p.utilization >= hi]
    low = [p.mean_latency for p in pts if p.utilization <= lo]
    if not high or not low:
        raise ValueError(f"width {width}: sweep does not cover both utilization regions")
    return (math.fsum(high) / len(high)) / (math.fsum(low) / len(low))
