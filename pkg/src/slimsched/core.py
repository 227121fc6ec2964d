"""Domain types and summary statistics shared across the simulator.

All times are simulated seconds on a monotone clock starting at 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional, Sequence

DEFAULT_WIDTHS: tuple[float, ...] = (0.25, 0.50, 0.75, 1.00)
NUM_SEGMENTS = 4


class EmptyMetricsError(ValueError):
    """Raised when a statistic is requested over no samples."""


def validate_widths(widths: Sequence[float]) -> tuple[float, ...]:
    ws = tuple(float(w) for w in widths)
    if not ws:
        raise ValueError("width set must be nonempty")
    if any(not math.isfinite(w) or w <= 0.0 or w > 1.0 for w in ws):
        raise ValueError(f"widths must lie in (0, 1]: {ws}")
    if list(ws) != sorted(set(ws)):
        raise ValueError(f"widths must be sorted and unique: {ws}")
    return ws


@dataclass(frozen=True)
class BatchKey:
    segment: int
    w_req: float
    w_prev: Optional[float]


@dataclass
class Request:
    id: int
    segment: int
    w_req: float
    w_prev: Optional[float]
    width_history: list[float]
    t_arrival: float
    t_enqueue: float
    # accumulated pure service time across executed segments
    service_time: float = 0.0
    # routed block this request belongs to at its current segment
    block: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.segment < NUM_SEGMENTS:
            raise ValueError(f"segment out of range: {self.segment}")
        if len(self.width_history) != self.segment:
            raise ValueError("width_history length must equal segment")
        if (self.segment == 0) != (self.w_prev is None):
            raise ValueError("w_prev must be absent exactly at segment 0")
        if self.segment > 0 and self.w_prev != self.width_history[-1]:
            raise ValueError("w_prev must equal the last executed width")
        if not self.t_enqueue >= self.t_arrival >= 0.0:
            raise ValueError("require t_enqueue >= t_arrival >= 0")

    @property
    def key(self) -> BatchKey:
        return BatchKey(self.segment, self.w_req, self.w_prev)


class ActionTriple(NamedTuple):
    """Router decision: server index, width index, group-size index."""
    srv: int
    w: int
    g: int


@dataclass
class InstanceState:
    segment: int
    width: float
    device: int
    busy: bool
    t_last: float
    resident_bytes: float
    # creation order, used as best-fit tie-break
    index: int = 0
    loading: bool = False


@dataclass
class SchedulerKnobs:
    r: float = 200.0
    B_max: int = 8
    M_max: Optional[float] = None  # None: use the device's m_max
    U_blk: float = 0.95
    t_idle: float = 2.0
    Q_th: int = 4
    N_new: int = 2
    widths: tuple[float, ...] = DEFAULT_WIDTHS
    load_time: float = 0.05

    def __post_init__(self):
        self.widths = validate_widths(self.widths)
        if self.r <= 0:
            raise ValueError("r must be positive")
        if self.B_max < 1:
            raise ValueError("B_max must be >= 1")
        if self.M_max is not None and self.M_max <= 0:
            raise ValueError("M_max must be positive")
        if not 0.0 < self.U_blk <= 1.0:
            raise ValueError("U_blk must lie in (0, 1]")
        if self.t_idle <= 0:
            raise ValueError("t_idle must be positive")
        if self.Q_th < 1:
            raise ValueError("Q_th must be >= 1")
        if self.N_new < 0:
            raise ValueError("N_new must be >= 0")
        if self.load_time < 0:
            raise ValueError("load_time must be >= 0")


def mean_std(samples: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    n = len(samples)
    if n == 0:
        raise EmptyMetricsError("mean_std of empty sample list")
    mean = math.fsum(samples) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((x - mean) ** 2 for x in samples) / n
    return mean, math.sqrt(var)


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile; p=100 returns the maximum."""
    if len(samples) == 0:
        raise EmptyMetricsError("percentile of empty sample list")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {p}")
    ordered = sorted(samples)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class MetricsRecord:
    latency_samples: list[float] = field(default_factory=list)
    energy_samples: list[float] = field(default_factory=list)
    util_variance_samples: list[float] = field(default_factory=list)
    completed: int = 0
    correct: int = 0
    wall_span: float = 0.0
    arrivals: int = 0
    width_counts: dict[float, int] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        if self.completed == 0:
            raise EmptyMetricsError("no completed requests")
        return self.correct / self.completed

    @property
    def throughput_per_s(self) -> float:
        return self.completed / self.wall_span if self.wall_span > 0 else 0.0

    def merge(self, other: "MetricsRecord") -> "MetricsRecord":
        counts = dict(self.width_counts)
        for w, c in other.width_counts.items():
            counts[w] = counts.get(w, 0) + c
        return MetricsRecord(
            latency_samples=self.latency_samples + other.latency_samples,
            energy_samples=self.energy_samples + other.energy_samples,
            util_variance_samples=self.util_variance_samples + other.util_variance_samples,
            completed=self.completed + other.completed,
            correct=self.correct + other.correct,
            wall_span=self.wall_span + other.wall_span,
            arrivals=self.arrivals + other.arrivals,
            width_counts=counts,
        )

    def summary(self) -> dict:
        """The row set of the results tables: accuracy, latency, energy,
        utilization variance and completion throughput."""
        lat = mean_std(self.latency_samples)
        en = mean_std(self.energy_samples)
        uv = mean_std(self.util_variance_samples) if self.util_variance_samples else (0.0, 0.0)
        routed = sum(self.width_counts.values())
        return {
            "accuracy_pct": 100.0 * self.accuracy,
            "latency_s": {"mean": lat[0], "std": lat[1],
                          "p50": percentile(self.latency_samples, 50),
                          "p99": percentile(self.latency_samples, 99)},
            "energy_j": {"mean": en[0], "std": en[1]},
            "gpu_util_var": {"mean": uv[0], "std": uv[1]},
            "throughput": {"completed": self.completed,
                           "per_s": self.throughput_per_s,
                           "wall_span_s": self.wall_span},
            "arrivals": self.arrivals,
            "width_share": {f"{w:.2f}": (c / routed if routed else 0.0)
                            for w, c in sorted(self.width_counts.items())},
        }
