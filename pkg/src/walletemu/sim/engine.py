"""Event-driven scale-out simulator.

Nodes have fixed execution slots and an LRU cache of warm (app, function)
instances.  The scheduler prefers free-slot nodes already caching the
requested function, then (for variants with a lukewarm tier) nodes caching
a sibling function of the same application, then the lowest-id free node;
otherwise the request queues FIFO and re-runs node preference when a slot
frees.  Determinism: arrivals are processed in (arrival, invocation_id)
order, completions in (time, invocation_id) order, and completions precede
arrivals at equal times.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..errors import EmptyTrace, InvariantError
from ..traceio import TraceEvent
from .profiles import BootType, VariantProfile, default_profiles


@dataclass
class SimConfig:
    nodes: int = 100
    slots: int = 32
    cache_size: int = 32
    profiles: dict = field(default_factory=default_profiles)
    seed: int = 0
    jitter_sigma: float = 0.0
    record_occupancy: bool = False


class Node:
    """One worker node.

    The cache dict's insertion order encodes recency (touch = delete +
    re-insert), so eviction order is strictly by last use with insertion
    order breaking ties.  Toward the per-node instance cap, each in-flight
    invocation and each cached instance counts (conservative when a running
    function is also cached).
    """

    __slots__ = ("node_id", "slots", "cache_size", "busy", "cache")

    def __init__(self, node_id: int, slots: int, cache_size: int):
        self.node_id = node_id
        self.slots = slots
        self.cache_size = cache_size
        self.busy = 0
        self.cache: dict[tuple[int, int], bool] = {}

    def resident_instances(self) -> int:
        return len(self.cache) + self.busy

    def eligible(self, cap: Optional[int]) -> bool:
        if self.busy >= self.slots:
            return False
        return cap is None or self.resident_instances() < cap

    def memory_resident(self, per_function_memory: int) -> int:
        return self.resident_instances() * per_function_memory


@dataclass(slots=True)
class InvocationOutcome:
    invocation_id: int
    node_id: int
    boot_type: BootType
    delay_ms: float
    slowdown: float
    start_ms: float
    finish_ms: float


@dataclass
class SimStats:
    """Per-variant results; delay = queue wait + boot,
    slowdown = (delay + adjusted duration) / duration."""

    variant: str
    outcomes: list[InvocationOutcome]
    makespan_ms: float
    occupancy_log: list[tuple[float, int, int]]

    def _delays(self) -> list[float]:
        return sorted(o.delay_ms for o in self.outcomes)

    def _slowdowns(self) -> list[float]:
        return sorted(o.slowdown for o in self.outcomes)

    def boot_counts(self) -> dict[str, int]:
        counts = {b.value: 0 for b in BootType}
        for o in self.outcomes:
            counts[o.boot_type.value] += 1
        return counts

    def percentile_delay(self, q: float) -> float:
        return nearest_rank(self._delays(), q)

    def percentile_slowdown(self, q: float) -> float:
        return nearest_rank(self._slowdowns(), q)

    def to_row(self) -> dict:
        counts = self.boot_counts()
        return {
            "variant": self.variant,
            "p50_delay_ms": self.percentile_delay(0.50),
            "p99_delay_ms": self.percentile_delay(0.99),
            "p50_slowdown": self.percentile_slowdown(0.50),
            "p99_slowdown": self.percentile_slowdown(0.99),
            "cold": counts["cold"],
            "lukewarm": counts["lukewarm"],
            "warm": counts["warm"],
            "makespan_ms": self.makespan_ms,
        }


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th order statistic."""
    if not sorted_values:
        return 0.0
    idx = max(1, math.ceil(q * len(sorted_values)))
    return float(sorted_values[idx - 1])


def classify_boot(node: Node, event: TraceEvent,
                  profile: VariantProfile) -> BootType:
    """Warm if the exact function is cached; lukewarm (when the profile has
    the tier) if a sibling function of the same app is; else cold."""
    if (event.app_id, event.function_id) in node.cache:
        return BootType.WARM
    if profile.lukewarm_boot is not None:
        for app_id, _fn in node.cache:
            if app_id == event.app_id:
                return BootType.LUKEWARM
    return BootType.COLD


class _VariantRun:
    """Mutable state of one variant's simulation pass."""

    def __init__(self, trace: Sequence[TraceEvent], profile: VariantProfile,
                 config: SimConfig):
        self.trace = trace
        self.profile = profile
        self.cap = profile.per_node_instance_cap
        self.rng = random.Random(config.seed)
        self.record_occupancy = config.record_occupancy
        self.nodes = [Node(i, config.slots, config.cache_size)
                      for i in range(config.nodes)]
        self.eligible: set[int] = {n.node_id for n in self.nodes
                                   if n.eligible(self.cap)}
        # (app, fn) -> node ids caching it; app -> {node id -> entry count}
        self.fn_index: dict[tuple[int, int], set[int]] = {}
        self.app_index: dict[int, dict[int, int]] = {}
        self.queue: deque[TraceEvent] = deque()
        self.completions: list[tuple[float, int, int]] = []  # (t, inv, node)
        self.inflight: dict[int, TraceEvent] = {}
        self.outcomes: list[InvocationOutcome] = []
        self.occupancy: list[tuple[float, int, int]] = []
        self.makespan = 0.0
        self._next_arrival = 0

    # -- index upkeep --

    def _refresh(self, node: Node) -> None:
        if node.eligible(self.cap):
            self.eligible.add(node.node_id)
        else:
            self.eligible.discard(node.node_id)

    def _cache_touch(self, node: Node, key: tuple[int, int]) -> None:
        if key in node.cache:
            del node.cache[key]
            node.cache[key] = True  # refreshed recency; indexes unchanged
            return
        node.cache[key] = True
        self.fn_index.setdefault(key, set()).add(node.node_id)
        per_app = self.app_index.setdefault(key[0], {})
        per_app[node.node_id] = per_app.get(node.node_id, 0) + 1
        # Warm instances are shed LRU-first when over the cache size or the
        # per-node instance cap (an instance key freed by dropping warmth).
        while len(node.cache) > node.cache_size or (
                self.cap is not None
                and len(node.cache) + node.busy > self.cap):
            victim = next(iter(node.cache))
            del node.cache[victim]
            self._index_remove(node.node_id, victim)
        self._refresh(node)

    def _index_remove(self, node_id: int, key: tuple[int, int]) -> None:
        nodes = self.fn_index.get(key)
        if nodes is not None:
            nodes.discard(node_id)
            if not nodes:
                del self.fn_index[key]
        per_app = self.app_index.get(key[0])
        if per_app is not None:
            count = per_app.get(node_id, 0) - 1
            if count <= 0:
                per_app.pop(node_id, None)
                if not per_app:
                    del self.app_index[key[0]]
            else:
                per_app[node_id] = count

    # -- scheduling --

    def pick_node(self, event: TraceEvent) -> Optional[Node]:
        key = (event.app_id, event.function_id)
        exact = self.fn_index.get(key)
        if exact:
            candidates = exact & self.eligible
            if candidates:
                return self.nodes[min(candidates)]
        if self.profile.lukewarm_boot is not None:
            per_app = self.app_index.get(event.app_id)
            if per_app:
                candidates = per_app.keys() & self.eligible
                if candidates:
                    return self.nodes[min(candidates)]
        if self.eligible:
            return self.nodes[min(self.eligible)]
        return None

    def dispatch(self, event: TraceEvent, node: Node, now: float) -> None:
        boot_type = classify_boot(node, event, self.profile)
        boot = self.profile.boot_dist(boot_type).sample(self.rng)
        wait = now - event.arrival_ms
        delay = wait + boot
        adjusted = event.duration_ms + boot
        finish = now + adjusted
        slowdown = (delay + adjusted) / event.duration_ms
        node.busy += 1
        self._refresh(node)
        self._cache_touch(node, (event.app_id, event.function_id))
        heapq.heappush(self.completions,
                       (finish, event.invocation_id, node.node_id))
        self.inflight[event.invocation_id] = event
        if self.record_occupancy:
            self.occupancy.append((now, node.node_id, +1))
        self.outcomes.append(InvocationOutcome(
            event.invocation_id, node.node_id, boot_type, delay, slowdown,
            now, finish))

    def arrive(self, event: TraceEvent) -> None:
        node = self.pick_node(event) if not self.queue else None
        if node is None:
            self.queue.append(event)
        else:
            self.dispatch(event, node, event.arrival_ms)

    def complete(self, finish: float, invocation_id: int, node_id: int) -> None:
        node = self.nodes[node_id]
        node.busy -= 1
        self._refresh(node)
        event = self.inflight.pop(invocation_id)
        self._cache_touch(node, (event.app_id, event.function_id))
        if self.record_occupancy:
            self.occupancy.append((finish, node_id, -1))
        self.makespan = max(self.makespan, finish)
        while self.queue:
            head = self.queue[0]
            target = self.pick_node(head)
            if target is None:
                break
            self.queue.popleft()
            self.dispatch(head, target, finish)

    def step(self) -> bool:
        """Apply the next event; completions win ties against arrivals."""
        ai = self._next_arrival
        have_arrival = ai < len(self.trace)
        if self.completions and (
                not have_arrival
                or self.completions[0][0] <= self.trace[ai].arrival_ms):
            finish, invocation_id, node_id = heapq.heappop(self.completions)
            self.complete(finish, invocation_id, node_id)
            return True
        if have_arrival:
            self.arrive(self.trace[ai])
            self._next_arrival = ai + 1
            return True
        return False

    def run(self) -> SimStats:
        while self.step():
            pass
        self.outcomes.sort(key=lambda o: o.invocation_id)
        return SimStats(self.profile.name, self.outcomes, self.makespan,
                        self.occupancy)


def advance(run: _VariantRun) -> bool:
    """Apply the next completion or arrival of a stepwise run (test hook)."""
    return run.step()


def make_run(trace: Sequence[TraceEvent], profile: VariantProfile,
             config: SimConfig) -> _VariantRun:
    """Construct a stepwise run for one variant (test hook)."""
    return _VariantRun(trace, profile, config)


def simulate(trace: Sequence[TraceEvent],
             config: SimConfig) -> dict[str, SimStats]:
    """Run every configured variant over the same trace with the same seed."""
    if not trace:
        raise EmptyTrace("simulate requires at least one trace event")
    if config.nodes < 1 or config.slots < 1:
        raise InvariantError("simulation needs at least one node and slot")
    if config.cache_size < 0:
        raise InvariantError("cache size must be non-negative")
    last = None
    for event in trace:
        if last is not None and event.arrival_ms < last:
            raise InvariantError("trace must be sorted by arrival time")
        last = event.arrival_ms
    results = {}
    for name in sorted(config.profiles):
        profile = config.profiles[name]
        if config.jitter_sigma > 0:
            profile = profile.with_jitter(config.jitter_sigma)
        results[name] = _VariantRun(trace, profile, config).run()
    return results
