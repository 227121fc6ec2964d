"""Per-server best-fit greedy executor.

Each server keeps a FIFO of requests and a set of loaded (segment, width)
instances. The executor repeatedly takes the head request's batch key, groups
up to ``B_max`` compatible requests, and runs them on the narrowest free
instance that is at least as wide as requested. When no such instance is
free it may load new ones, subject to the VRAM budget and a utilization
block threshold. Instances idle for ``t_idle`` are unloaded.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

from .core import BatchKey, InstanceState, Request, SchedulerKnobs
from .devmodel import (DeviceSpec, DeviceState, SegmentProfile, activation_bytes, add_busy,
                       param_bytes, power_draw, prune_intervals, service_time,
                       set_power, utilization)


class RequestQueue:
    """FIFO that supports removing a key's requests from anywhere in line.

    Requests with other keys keep their relative order.
    """

    def __init__(self, requests: Iterable[Request] = ()):
        self._order: deque[Request] = deque()
        self._by_key: dict[BatchKey, deque[Request]] = {}
        # identity of queued objects; a request id recurs once per segment
        self._live: set[int] = set()
        for r in requests:
            self.append(r)

    def append(self, req: Request) -> None:
        self._order.append(req)
        self._by_key.setdefault(req.key, deque()).append(req)
        self._live.add(id(req))

    def head(self) -> Request:
        while id(self._order[0]) not in self._live:
            self._order.popleft()
        return self._order[0]

    def count(self, key: BatchKey) -> int:
        q = self._by_key.get(key)
        return len(q) if q else 0

    def take(self, key: BatchKey, limit: int) -> list[Request]:
        q = self._by_key.get(key)
        out = []
        while q and len(out) < limit:
            r = q.popleft()
            self._live.discard(id(r))
            out.append(r)
        if q is not None and not q:
            del self._by_key[key]
        return out

    def __len__(self) -> int:
        return len(self._live)

    def __bool__(self) -> bool:
        return bool(self._live)

    def __iter__(self) -> Iterator[Request]:
        return (r for r in self._order if id(r) in self._live)


@dataclass
class Dispatch:
    server: int
    instance: InstanceState
    batch: list[Request]
    width: float
    start: float
    end: float
    act_bytes: float


@dataclass
class ServerState:
    device: DeviceSpec
    segments: list[SegmentProfile]
    knobs: SchedulerKnobs
    queue: RequestQueue = field(default_factory=RequestQueue)
    instances: list[InstanceState] = field(default_factory=list)
    state: DeviceState = field(default_factory=DeviceState)
    last_util: Optional[float] = None
    # invoked with each newly loaded instance so the caller can time the load
    on_load: Optional[Callable[[InstanceState], None]] = None
    _next_index: int = 0

    def __post_init__(self):
        if self.m_max > self.device.vram_total:
            raise ValueError(
                f"device {self.device.id}: M_max {self.m_max:g} exceeds vram_total "
                f"{self.device.vram_total:g}")
        biggest = max(param_bytes(s, max(self.knobs.widths)) for s in self.segments)
        if self.m_max < biggest:
            raise ValueError(
                f"device {self.device.id}: M_max {self.m_max:g} cannot hold the largest "
                f"instance ({biggest:g} bytes)")
        if self.state.last_power_sample == 0.0:
            self.state.last_power_sample = self.device.p_idle

    @property
    def m_max(self) -> float:
        return self.knobs.M_max if self.knobs.M_max is not None else self.device.m_max

    @property
    def resident_bytes(self) -> float:
        return sum(i.resident_bytes for i in self.instances)

    @property
    def power(self) -> float:
        return self.state.last_power_sample


def form_batch(queue: RequestQueue, key: BatchKey, B_max: int) -> list[Request]:
    """Remove and return up to B_max requests with ``key`` in FIFO order."""
    return queue.take(key, B_max)


def find_free_best_fit(instances: Iterable[InstanceState], seg: int,
                       w_req: float) -> Optional[InstanceState]:
    best = None
    for inst in instances:
        if inst.busy or inst.segment != seg or inst.width < w_req:
            continue
        if best is None or (inst.width, inst.index) < (best.width, best.index):
            best = inst
    return best


def sample_utilization(server: ServerState, now: float) -> float:
    """Refresh the utilization sample and the power level it implies."""
    window = server.device.util_window
    prune_intervals(server.state, now, window)
    u = utilization(server.state, now, window)
    server.last_util = u
    set_power(server.state, power_draw(server.device, u), now)
    return u


def can_load(server: ServerState, seg: int, w: float) -> bool:
    need = param_bytes(server.segments[seg], w)
    if server.state.vram_used + need > server.m_max:
        return False
    u = server.last_util
    if u is not None and u >= server.knobs.U_blk:
        return False
    return True


def load_instance(server: ServerState, seg: int, w: float, now: float) -> InstanceState:
    nbytes = param_bytes(server.segments[seg], w)
    inst = InstanceState(segment=seg, width=w, device=server.device.id,
                         busy=server.knobs.load_time > 0, t_last=now,
                         resident_bytes=nbytes, index=server._next_index,
                         loading=server.knobs.load_time > 0)
    server._next_index += 1
    server.instances.append(inst)
    server.state.vram_used += nbytes
    if server.on_load is not None:
        server.on_load(inst)
    return inst


def scale_up(server: ServerState, key: BatchKey, now: float) -> int:
    """Load up to N_new instances for a backlogged key; returns how many.

    A key whose covering instances are still loading does not trigger more
    loads; otherwise every failed dispatch attempt would add N_new more.
    """
    if server.queue.count(key) < server.knobs.Q_th:
        return 0
    if any(i.loading and i.segment == key.segment and i.width >= key.w_req
           for i in server.instances):
        return 0
    loaded = 0
    for _ in range(server.knobs.N_new):
        if not can_load(server, key.segment, key.w_req):
            break
        load_instance(server, key.segment, key.w_req, now)
        loaded += 1
    return loaded


def dispatch_step(server: ServerState, now: float) -> Optional[Dispatch]:
    """One pass of the executor loop for the head-of-line key.

    The instance search happens before the batch is pulled out of the queue,
    so a failed attempt leaves the queue exactly as it was (equivalent to
    forming the batch and requeueing it at the front in original order).
    """
    if not server.queue:
        return None
    sample_utilization(server, now)
    key = server.queue.head().key
    inst = find_free_best_fit(server.instances, key.segment, key.w_req)
    if inst is None:
        covered = any(i.segment == key.segment and i.width >= key.w_req
                      for i in server.instances)
        loaded = scale_up(server, key, now)
        if not covered and loaded == 0 and can_load(server, key.segment, key.w_req):
            load_instance(server, key.segment, key.w_req, now)
        inst = find_free_best_fit(server.instances, key.segment, key.w_req)
        if inst is None:
            return None
    batch = form_batch(server.queue, key, server.knobs.B_max)
    seg = server.segments[key.segment]
    b = len(batch)
    # compute follows the requested width; residency follows the instance's
    t = service_time(server.device, seg, key.w_req, b)
    act = activation_bytes(seg, key.w_req, b)
    st = server.state
    start = max(now, st.free_at)
    end = start + t
    st.free_at = end
    add_busy(st, start, end)
    st.vram_used += act
    inst.busy = True
    for r in batch:
        r.service_time += t
    return Dispatch(server.device.id, inst, batch, key.w_req, start, end, act)


def complete_batch(server: ServerState, d: Dispatch, now: float) -> None:
    d.instance.busy = False
    d.instance.t_last = now
    server.state.vram_used -= d.act_bytes


def complete_load(inst: InstanceState, now: float) -> None:
    inst.busy = False
    inst.loading = False
    inst.t_last = now


def unloader_step(server: ServerState, now: float) -> list[InstanceState]:
    gone = [i for i in server.instances
            if not i.busy and now - i.t_last >= server.knobs.t_idle]
    if gone:
        ids = {id(i) for i in gone}
        server.instances = [i for i in server.instances if id(i) not in ids]
        for i in gone:
            server.state.vram_used -= i.resident_bytes
    return gone
