"""Discrete-event network fabric: lossy, delayed, optionally reordering links.

Virtual time is integer nanoseconds.  Events are dispatched strictly in
timestamp order with ties broken by insertion sequence, so a run is a pure
function of the seed and the configuration.  There is no switch or queue
model: delivery time is serialization + base delay + uniform jitter, floored
so a link never delivers out of send order (jitter models queueing on a
single path).  Reordering is opt-in through reorder_swap_prob.  Loss is
per-link Bernoulli, optionally with a two-state (Gilbert) burst model
layered on top.

Heap entries are flat tuples, not objects; the event loop is the hot path
and runs a few hundred thousand times per simulated collective.
Layouts (first two slots order the heap, `seq` is unique so comparison
never reaches the payload):

    (at, seq, 0, packet, ecn, tx_index, link_state)   delivery
    (at, seq, 1, node, qp_id, wqe_seq, gen)           timer
    (at, seq, 2, fn)                                  wake
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from heapq import heappop, heappush
from typing import Callable

from .core import Packet, SimTime, usec

_DELIVER = 0
_TIMER = 1
_WAKE = 2


@dataclass(frozen=True)
class LinkModel:
    """Directed link parameters. loss_rate must stay below 1.0: a link that
    never delivers is a configuration error, not a simulation."""

    bandwidth_bps: float = 25e9
    base_delay_ns: SimTime = usec(1)
    jitter_ns: SimTime = 0
    loss_rate: float = 0.0
    burst: tuple[float, int] | None = None  # (burst_prob, mean_burst_len)

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_rate < 1.0:
            raise ValueError(f"loss_rate must be in [0, 1), got {self.loss_rate}")
        if self.bandwidth_bps <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth_bps}")
        if self.base_delay_ns < 0 or self.jitter_ns < 0:
            raise ValueError("delays must be non-negative")
        if self.burst is not None:
            prob, length = self.burst
            if not 0.0 <= prob < 1.0 or length < 1:
                raise ValueError(f"burst must be (prob in [0,1), len >= 1), got {self.burst}")

    def serialization_ns(self, nbytes: int) -> SimTime:
        return round(nbytes * 8 * 1e9 / self.bandwidth_bps)


class _LinkState:
    """Mutable per-link runtime state (burst mode, ECN backlog, ordering)."""

    __slots__ = ("in_burst", "busy_until", "tx_index", "max_delivered", "last_delivery_at")

    def __init__(self) -> None:
        self.in_burst = False
        self.busy_until = 0
        self.tx_index = 0
        self.max_delivered = -1
        self.last_delivery_at = 0


@dataclass(slots=True)
class FabricStats:
    delivered: int = 0
    dropped: int = 0
    reordered: int = 0
    timers: int = 0
    wakes: int = 0
    dropped_payload_bytes: int = 0


@dataclass(frozen=True)
class DropRecord:
    at: SimTime
    src_node: int
    dst_node: int
    qp_id: int
    wqe_seq: int
    kind: int
    payload_len: int
    reason: str


def transit(link: LinkModel, pkt: Packet, now: SimTime, rng: random.Random,
            state: _LinkState | None = None) -> SimTime | None:
    """Delivery timestamp for a packet handed to the link at `now`, or None if
    the link drops it.  Consumes rng draws in a fixed order (burst, loss,
    jitter) so traces are reproducible.  Network.send inlines this logic;
    the function is the reference for that draw order."""
    if state is not None and link.burst is not None:
        burst_prob, burst_len = link.burst
        if state.in_burst:
            if rng.random() < 1.0 / burst_len:
                state.in_burst = False
            else:
                return None
        elif rng.random() < burst_prob:
            state.in_burst = True
            return None
    if link.loss_rate > 0.0 and rng.random() < link.loss_rate:
        return None
    delay = link.serialization_ns(pkt.payload_len) + link.base_delay_ns
    if link.jitter_ns:
        delay += int(rng.random() * link.jitter_ns)
    return now + delay


class Network:
    """Event queue plus the set of links and node handlers.

    Node handlers implement on_packet(pkt, now, ecn) and
    on_timer(qp_id, wqe_seq, gen, now).
    """

    def __init__(self, seed: int = 0, default_link: LinkModel | None = None, *,
                 ecn_threshold_ns: SimTime | None = None,
                 reorder_swap_prob: float = 0.0,
                 trace: bool = False) -> None:
        self.rng = random.Random(seed)
        self.now: SimTime = 0
        self.default_link = default_link or LinkModel()
        self.ecn_threshold_ns = ecn_threshold_ns
        self.reorder_swap_prob = reorder_swap_prob
        self.nodes: dict[int, object] = {}
        self.links: dict[tuple[int, int], LinkModel] = {}
        self.drop_log: list[DropRecord] = []
        self.stats = FabricStats()
        self.trace: list[tuple] | None = [] if trace else None
        self.drop_filter: Callable[[Packet, int], bool] | None = None  # test seam
        self._heap: list[tuple] = []
        self._seq = 0
        # (src, dst) -> (link, state, {payload_len: serialization_ns})
        self._edges: dict[tuple[int, int], tuple[LinkModel, _LinkState, dict[int, int]]] = {}

    # -- topology ---------------------------------------------------------

    def add_node(self, node_id: int, handler: object) -> None:
        self.nodes[node_id] = handler

    def set_link(self, src: int, dst: int, model: LinkModel) -> None:
        self.links[(src, dst)] = model
        self._edges.pop((src, dst), None)

    def link_for(self, src: int, dst: int) -> LinkModel:
        return self.links.get((src, dst), self.default_link)

    def _edge_for(self, src: int, dst: int) -> tuple[LinkModel, _LinkState, dict[int, int]]:
        edge = self._edges.get((src, dst))
        if edge is None:
            edge = (self.link_for(src, dst), _LinkState(), {})
            self._edges[(src, dst)] = edge
        return edge

    def _state_for(self, src: int, dst: int) -> _LinkState:
        return self._edge_for(src, dst)[1]

    # -- scheduling -------------------------------------------------------

    def schedule_timer(self, at: SimTime, node: int, qp_id: int, wqe_seq: int, gen: int) -> None:
        self._seq += 1
        heappush(self._heap, (at, self._seq, _TIMER, node, qp_id, wqe_seq, gen))

    def schedule_wake(self, at: SimTime, fn: Callable[[SimTime], None]) -> None:
        self._seq += 1
        heappush(self._heap, (at, self._seq, _WAKE, fn))

    def send(self, pkt: Packet, at: SimTime | None = None) -> bool:
        """Hand a packet to the fabric at time `at` (default now).  Returns
        True if a delivery was scheduled, False if the link dropped it.
        """
        now = self.now if at is None else at
        edge = self._edges.get((pkt.src_node, pkt.dst_node))
        if edge is None:
            edge = self._edge_for(pkt.src_node, pkt.dst_node)
        link, state, ser_cache = edge
        state.tx_index += 1
        tx_index = state.tx_index

        if self.drop_filter is not None and self.drop_filter(pkt, tx_index):
            self._record_drop(pkt, now, "forced")
            return False

        # Same rng draw order as transit(): burst, loss, jitter.
        rng_random = self.rng.random
        if link.burst is not None:
            burst_prob, burst_len = link.burst
            if state.in_burst:
                if rng_random() < 1.0 / burst_len:
                    state.in_burst = False
                else:
                    self._record_drop(pkt, now, "burst")
                    return False
            elif rng_random() < burst_prob:
                state.in_burst = True
                self._record_drop(pkt, now, "burst")
                return False
        if link.loss_rate > 0.0 and rng_random() < link.loss_rate:
            self._record_drop(pkt, now, "loss")
            return False

        plen = pkt.payload_len
        ser = ser_cache.get(plen)
        if ser is None:
            ser = ser_cache[plen] = link.serialization_ns(plen)
        delay = ser + link.base_delay_ns
        if link.jitter_ns:
            delay += int(rng_random() * link.jitter_ns)
        deliver_at = now + delay
        # FIFO floor: one path never delivers out of send order on its own.
        if deliver_at < state.last_delivery_at:
            deliver_at = state.last_delivery_at

        # ECN: mark when the link's serialization backlog exceeds the
        # threshold. The backlog is virtual (delivery time is unaffected).
        busy = state.busy_until
        backlog = busy - now
        state.busy_until = (busy if backlog > 0 else now) + ser
        ecn = self.ecn_threshold_ns is not None and backlog > self.ecn_threshold_ns

        if self.reorder_swap_prob and rng_random() < self.reorder_swap_prob:
            # Targeted reorder knob: land just before the previous delivery
            # on this link when possible.
            deliver_at = max(now + 1, state.last_delivery_at - 1)
        state.last_delivery_at = deliver_at

        self._seq += 1
        heappush(self._heap, (deliver_at, self._seq, _DELIVER, pkt, ecn, tx_index, state))
        return True

    def _record_drop(self, pkt: Packet, now: SimTime, reason: str) -> None:
        self.stats.dropped += 1
        self.stats.dropped_payload_bytes += pkt.payload_len
        self.drop_log.append(DropRecord(now, pkt.src_node, pkt.dst_node, pkt.qp_id,
                                        pkt.wqe_seq, int(pkt.kind), pkt.payload_len, reason))

    # -- event loop -------------------------------------------------------

    def run_until(self, stop: SimTime | None = None, max_events: int | None = None) -> FabricStats:
        heap = self._heap
        nodes = self.nodes
        stats = self.stats
        trace = self.trace
        while heap:
            at = heap[0][0]
            if stop is not None and at > stop:
                break
            if max_events is not None:
                if max_events <= 0:
                    break
                max_events -= 1
            ev = heappop(heap)
            assert at >= self.now, "event dispatched out of timestamp order"
            self.now = at
            kind = ev[2]
            if kind == _DELIVER:
                pkt = ev[3]
                state = ev[6]
                if ev[5] < state.max_delivered:
                    stats.reordered += 1
                else:
                    state.max_delivered = ev[5]
                stats.delivered += 1
                if trace is not None:
                    trace.append((at, "deliver", pkt.src_node, pkt.dst_node,
                                  pkt.qp_id, pkt.wqe_seq, pkt.placement_offset,
                                  pkt.payload_len, int(pkt.kind)))
                nodes[pkt.dst_node].on_packet(pkt, at, ev[4])  # type: ignore[attr-defined]
            elif kind == _TIMER:
                stats.timers += 1
                if trace is not None:
                    trace.append((at, "timer", ev[3], ev[4], ev[5], ev[6]))
                nodes[ev[3]].on_timer(ev[4], ev[5], ev[6], at)  # type: ignore[attr-defined]
            else:
                stats.wakes += 1
                ev[3](at)
        if stop is not None and self.now < stop and not heap:
            self.now = stop
        return self.stats

    def pending(self) -> int:
        return len(self._heap)
