"""Deterministic discrete-event engine for a cluster of greedy servers.

Requests enter a global router FIFO, a router assigns groups of them to a
server and width, the server's greedy executor batches and runs them, and
every finished segment goes back through the router until all four segments
have run. All randomness comes from named substreams of the seeds, so two
runs with the same inputs produce identical records.
"""

from __future__ import annotations

import heapq
import math
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, NamedTuple, Optional, Protocol, Sequence, Union

import numpy as np

from .accprior import AccuracyTable
from .core import (NUM_SEGMENTS, ActionTriple, InstanceState, MetricsRecord, Request,
                   SchedulerKnobs)
from .devmodel import DeviceSpec, SegmentProfile, set_power
from .greedy import (Dispatch, ServerState, complete_batch, complete_load, dispatch_step,
                     sample_utilization, unloader_step)

ARRIVAL = 0
BATCH_COMPLETE = 1
LOAD_COMPLETE = 2
UTIL_SAMPLE = 3
UNLOADER_TICK = 4
ROUTER_TICK = 5
CALLBACK = 6

EVENT_NAMES = {ARRIVAL: "Arrival", BATCH_COMPLETE: "BatchComplete",
               LOAD_COMPLETE: "LoadComplete", UTIL_SAMPLE: "UtilSample",
               UNLOADER_TICK: "UnloaderTick", ROUTER_TICK: "RouterTick",
               CALLBACK: "Callback"}


class Event(NamedTuple):
    time: float
    seq: int
    kind: int
    payload: Any = None


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one logical randomness source."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class WorkloadSpec:
    rate: float = 200.0
    horizon: float = 60.0
    width_demand: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    seed: int = 0
    max_requests: Optional[int] = None
    # closed loop: a fixed population of clients with exponential think time
    clients: int = 0
    think_time: float = 0.05

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if any(p < 0 for p in self.width_demand) or not math.isclose(sum(self.width_demand), 1.0):
            raise ValueError("width_demand must be a probability distribution")
        if self.clients < 0 or self.think_time < 0:
            raise ValueError("clients and think_time must be >= 0")


def generate_arrivals(spec: WorkloadSpec, rng: np.random.Generator) -> Iterator[float]:
    """Poisson arrival times in [0, horizon)."""
    t = 0.0
    n = 0
    while True:
        if spec.max_requests is not None and n >= spec.max_requests:
            return
        t += rng.exponential(1.0 / spec.rate)
        if t >= spec.horizon:
            return
        n += 1
        yield t


@dataclass
class ClusterConfig:
    devices: list[DeviceSpec]
    segments: list[SegmentProfile]
    knobs: list[SchedulerKnobs]
    groups: tuple[int, ...] = (1, 2, 4, 8)
    router_period: float = 0.01
    telemetry_period: float = 0.05
    unloader_period: float = 0.1

    def __post_init__(self):
        if len(self.segments) != NUM_SEGMENTS:
            raise ValueError(f"need exactly {NUM_SEGMENTS} segment profiles")
        if len(self.knobs) != len(self.devices):
            raise ValueError("one knob set per device is required")
        if not self.devices:
            raise ValueError("cluster has no devices")
        if any(g < 1 for g in self.groups):
            raise ValueError("group sizes must be >= 1")
        widths = {k.widths for k in self.knobs}
        if len(widths) != 1:
            raise ValueError("all servers must share one width set")

    @property
    def widths(self) -> tuple[float, ...]:
        return self.knobs[0].widths


@dataclass
class Completion:
    id: int
    widths: tuple[float, ...]
    t_arrival: float
    t_completion: float
    service_time: float

    @property
    def latency(self) -> float:
        return self.t_completion - self.t_arrival


def advance_segment(req: Request, executed_width: float,
                    now: float) -> Union[Request, Completion]:
    history = req.width_history + [executed_width]
    if req.segment == NUM_SEGMENTS - 1:
        return Completion(req.id, tuple(history), req.t_arrival, now, req.service_time)
    return Request(id=req.id, segment=req.segment + 1, w_req=executed_width,
                   w_prev=executed_width, width_history=history,
                   t_arrival=req.t_arrival, t_enqueue=now,
                   service_time=req.service_time)


def util_variance(utils: Sequence[float]) -> float:
    n = len(utils)
    m = math.fsum(utils) / n
    return math.fsum((u - m) ** 2 for u in utils) / n


@dataclass
class BlockOutcome:
    """What the router learns about one routed block once all of it has run."""
    prior: float
    latency: float
    mean_power: float
    utils: list[float]


@dataclass
class Block:
    id: int
    server: int
    width: Optional[float]
    size: int
    t_decision: float
    token: Any
    remaining: int = 0
    prior_sum: float = 0.0


@dataclass
class BlockRecord:
    id: int
    server: int
    width: Optional[float]
    size: int
    latency: float
    energy: float


class Router(Protocol):
    overrides_width: bool

    def decide(self, state: np.ndarray, sim: "Simulator") -> tuple[ActionTriple, Any]:
        ...

    def observe(self, token: Any, outcome: BlockOutcome) -> None:
        ...


class PinnedRouter:
    """Sends everything to one server in the largest group, keeping widths."""

    overrides_width = False

    def __init__(self, server: int = 0):
        self.server = server

    def decide(self, state, sim):
        return ActionTriple(self.server, 0, len(sim.cluster.groups) - 1), None

    def observe(self, token, outcome):
        pass


class Simulator:
    def __init__(self, cluster: ClusterConfig, workload: WorkloadSpec, router: Router,
                 table: Optional[AccuracyTable] = None, center_prior: bool = False,
                 max_time: Optional[float] = None,
                 observer: Optional[Callable[["Simulator", Event], None]] = None,
                 trace: bool = False):
        self.cluster = cluster
        self.workload = workload
        self.router = router
        self.table = table if table is not None else AccuracyTable.load()
        self.center_prior = center_prior
        self.max_time = max_time
        self.observer = observer
        self.widths = cluster.widths
        if len(workload.width_demand) != len(self.widths):
            raise ValueError("width_demand must have one probability per width")

        self.servers: list[ServerState] = []
        for i, (dev, knobs) in enumerate(zip(cluster.devices, cluster.knobs)):
            srv = ServerState(device=dev, segments=cluster.segments, knobs=knobs)
            srv.on_load = self._make_load_hook(i)
            self.servers.append(srv)

        self.now = 0.0
        self._heap: list[Event] = []
        self._seq = 0
        self.pending: deque[Request] = deque()
        self.metrics = MetricsRecord()
        self.completions: list[Completion] = []
        self.blocks: list[BlockRecord] = []
        self.trace_rows: Optional[list[tuple]] = [] if trace else None
        self.in_flight = 0
        self._next_id = 0
        self._next_block = 0
        self._tick_scheduled = False
        self._last_tick = -math.inf
        self._arrivals_open = True

        self.arrival_rng = named_rng(workload.seed, "arrivals")
        self.width_rng = named_rng(workload.seed, "widths")
        self.correct_rng = named_rng(workload.seed, "correctness")
        self._demand_cdf = np.cumsum(workload.width_demand)

        if workload.clients > 0:
            for _ in range(workload.clients):
                self._schedule(self._think(), ARRIVAL)
        else:
            self._arrivals = generate_arrivals(workload, self.arrival_rng)
            self._next_arrival()
        self._schedule(0.0, UTIL_SAMPLE)
        self._schedule(cluster.unloader_period, UNLOADER_TICK)

    # -- bookkeeping -----------------------------------------------------

    def _schedule(self, t: float, kind: int, payload: Any = None) -> None:
        heapq.heappush(self._heap, Event(t, self._seq, kind, payload))
        self._seq += 1

    def at(self, t: float, fn: Callable[["Simulator"], None]) -> None:
        """Run ``fn(sim)`` at simulated time ``t``."""
        self._schedule(t, CALLBACK, fn)

    def _make_load_hook(self, idx: int):
        def hook(inst: InstanceState) -> None:
            if inst.busy:
                self._schedule(self.now + self.cluster.knobs[idx].load_time,
                               LOAD_COMPLETE, (idx, inst))
        return hook

    def _think(self) -> float:
        z = self.workload.think_time
        return self.now + (self.arrival_rng.exponential(z) if z > 0 else 0.0)

    def _next_arrival(self) -> None:
        t = next(self._arrivals, None)
        if t is None:
            self._arrivals_open = False
        else:
            self._schedule(t, ARRIVAL)

    @property
    def queued(self) -> int:
        return len(self.pending) + sum(len(s.queue) for s in self.servers)

    @property
    def in_system(self) -> int:
        return self.queued + self.in_flight

    def _active(self) -> bool:
        if self.workload.clients > 0:
            open_ = self.now < self.workload.horizon
        else:
            open_ = self._arrivals_open
        return open_ or self.in_system > 0

    def snapshot_state(self) -> np.ndarray:
        """[q_fifo, c_done, q_1, P_1, U_1, ..., q_N, P_N, U_N]."""
        per = []
        total = len(self.pending)
        for s in self.servers:
            q = len(s.queue)
            total += q
            per.extend((q, s.state.last_power_sample,
                        s.last_util if s.last_util is not None else 0.0))
        return np.array([total, self.metrics.completed] + per, dtype=float)

    # -- event handlers --------------------------------------------------

    def _on_arrival(self) -> None:
        w_idx = int(np.searchsorted(self._demand_cdf, self.width_rng.random(), side="right"))
        w_idx = min(w_idx, len(self.widths) - 1)
        req = Request(id=self._next_id, segment=0, w_req=self.widths[w_idx], w_prev=None,
                      width_history=[], t_arrival=self.now, t_enqueue=self.now)
        self._next_id += 1
        self.metrics.arrivals += 1
        self.pending.append(req)
        self._ensure_router_tick()
        if self.workload.clients == 0:
            self._next_arrival()

    def _ensure_router_tick(self) -> None:
        if self._tick_scheduled or not self.pending:
            return
        self._tick_scheduled = True
        self._schedule(max(self.now, self._last_tick + self.cluster.router_period), ROUTER_TICK)

    def _on_router_tick(self) -> None:
        self._tick_scheduled = False
        self._last_tick = self.now
        touched = []
        groups = self.cluster.groups
        while self.pending:
            action, token = self.router.decide(self.snapshot_state(), self)
            n = min(groups[action.g], len(self.pending))
            width = self.widths[action.w] if self.router.overrides_width else None
            block = Block(self._next_block, action.srv, width, n, self.now, token, remaining=n)
            self._next_block += 1
            server = self.servers[action.srv]
            counts = self.metrics.width_counts
            for _ in range(n):
                r = self.pending.popleft()
                if width is not None:
                    r.w_req = width
                r.t_enqueue = self.now
                r.block = block
                server.queue.append(r)
                counts[r.w_req] = counts.get(r.w_req, 0) + 1
            if action.srv not in touched:
                touched.append(action.srv)
        for i in touched:
            self._pump(i)

    def _pump(self, idx: int) -> None:
        server = self.servers[idx]
        while server.queue:
            d = dispatch_step(server, self.now)
            if d is None:
                break
            self.in_flight += len(d.batch)
            self._schedule(d.end, BATCH_COMPLETE, (idx, d))

    def _on_batch_complete(self, idx: int, d: Dispatch) -> None:
        server = self.servers[idx]
        complete_batch(server, d, self.now)
        self.in_flight -= len(d.batch)
        for r in d.batch:
            nxt = advance_segment(r, d.width, self.now)
            block = r.block
            if isinstance(nxt, Completion):
                self._complete(nxt)
                prefix = nxt.widths
            else:
                self.pending.append(nxt)
                prefix = nxt.width_history
            block.prior_sum += self.table.prior_lookup(prefix)
            block.remaining -= 1
            if block.remaining == 0:
                self._finish_block(block)
        self._pump(idx)
        self._ensure_router_tick()

    def _complete(self, c: Completion) -> None:
        m = self.metrics
        m.completed += 1
        m.latency_samples.append(c.latency)
        if self.table.sample_correctness(c.widths, self.correct_rng):
            m.correct += 1
        self.completions.append(c)
        if self.workload.clients > 0 and self.now < self.workload.horizon:
            self._schedule(self._think(), ARRIVAL)

    def _finish_block(self, block: Block) -> None:
        latency = self.now - block.t_decision
        powers = [s.state.last_power_sample for s in self.servers]
        utils = [s.last_util if s.last_util is not None else 0.0 for s in self.servers]
        mean_power = math.fsum(powers) / len(powers)
        energy = mean_power * latency
        self.metrics.energy_samples.append(energy)
        self.blocks.append(BlockRecord(block.id, block.server, block.width, block.size,
                                       latency, energy))
        prior = self.table.centered_prior(block.prior_sum / block.size, self.center_prior)
        self.router.observe(block.token, BlockOutcome(prior, latency, mean_power, utils))

    def _on_util_sample(self) -> None:
        utils = [sample_utilization(s, self.now) for s in self.servers]
        self.metrics.util_variance_samples.append(util_variance(utils))
        if self.trace_rows is not None:
            row = [self.now]
            for s, u in zip(self.servers, utils):
                row.extend((len(s.queue), s.state.last_power_sample, u, s.state.vram_used))
            self.trace_rows.append(tuple(row))
        for i, s in enumerate(self.servers):
            if s.queue:
                self._pump(i)
        if self._active():
            self._schedule(self.now + self.cluster.telemetry_period, UTIL_SAMPLE)

    def _on_unloader_tick(self) -> None:
        for i, s in enumerate(self.servers):
            if unloader_step(s, self.now) and s.queue:
                self._pump(i)
        if self._active():
            self._schedule(self.now + self.cluster.unloader_period, UNLOADER_TICK)

    # -- main loop -------------------------------------------------------

    def step(self) -> Optional[Event]:
        if not self._heap:
            return None
        ev = heapq.heappop(self._heap)
        if ev.time < self.now:
            raise RuntimeError(f"event {ev} scheduled in the past (now={self.now})")
        self.now = ev.time
        kind = ev.kind
        if kind == BATCH_COMPLETE:
            self._on_batch_complete(*ev.payload)
        elif kind == ROUTER_TICK:
            self._on_router_tick()
        elif kind == ARRIVAL:
            self._on_arrival()
        elif kind == LOAD_COMPLETE:
            idx, inst = ev.payload
            complete_load(inst, self.now)
            self._pump(idx)
        elif kind == UTIL_SAMPLE:
            self._on_util_sample()
        elif kind == UNLOADER_TICK:
            self._on_unloader_tick()
        elif kind == CALLBACK:
            ev.payload(self)
        if self.observer is not None:
            self.observer(self, ev)
        return ev

    def run(self, stop: Optional[Callable[[], bool]] = None) -> MetricsRecord:
        while self._heap:
            if self.max_time is not None and self._heap[0].time > self.max_time:
                break
            self.step()
            if stop is not None and stop():
                break
        return self.finish()

    def finish(self) -> MetricsRecord:
        for s in self.servers:
            set_power(s.state, s.state.last_power_sample, self.now)
        self.metrics.wall_span = self.now
        return self.metrics


def run_episode(router: Router, cluster: ClusterConfig, workload: WorkloadSpec,
                table: Optional[AccuracyTable] = None, **kwargs) -> MetricsRecord:
    return Simulator(cluster, workload, router, table=table, **kwargs).run()
