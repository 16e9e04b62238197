"""Go-Back-N reliable transport: the RoCE-style RC baseline.

In-order delivery with cumulative ACKs, NAK on out-of-order arrival, and
retransmission from the window base on NAK or RTO.  ACKs may be coalesced
(ack_every), with a flush on every final fragment so message boundaries
always ack promptly; duplicates and NAKs respond immediately.  ACK/NAK
packets are kind=ACK with the psn carried in placement_offset and the
subtype in stride_index; outgoing data carries its psn in the (otherwise
unused) deadline_hint field.  Both are documented overloads of the shared
wire format.

The same machinery backs the reliable control channel used for collective
phase markers and timeout proposals.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .congestion import ACK_SUBTYPE_CUMULATIVE, ACK_SUBTYPE_NAK
from .core import (DEFAULT_MTU_PAYLOAD, Buffer, Completion, CompletionStatus,
                   Packet, PacketKind, SimTime, Verb, WorkRequest)
from .fabric import LinkModel, Network
from .transport_xp import SequenceLimitError, WQE_SEQ_LIMIT, fragment

DEFAULT_WINDOW = 64
DEFAULT_RTO_MULTIPLIER = 4


def default_rto_ns(link: LinkModel, k: int = DEFAULT_RTO_MULTIPLIER) -> SimTime:
    """Conservative retransmission timeout: k round trips at median jitter."""
    return k * (link.base_delay_ns + link.jitter_ns // 2) * 2


@dataclass(slots=True)
class GbnStats:
    sent: int = 0
    retransmissions: int = 0
    rto_fires: int = 0
    naks_sent: int = 0
    naks_received: int = 0
    acks_received: int = 0
    out_of_order_dropped: int = 0
    duplicates: int = 0
    malformed: int = 0
    unplaced: int = 0  # accepted data with no posted buffer or region


class GbnQp:
    """One endpoint of a Go-Back-N queue pair (sender and receiver halves)."""

    def __init__(self, net: Network, node_id: int, peer_id: int, qp_id: int, *,
                 window: int = DEFAULT_WINDOW,
                 rto_ns: SimTime | None = None,
                 mtu_payload: int = DEFAULT_MTU_PAYLOAD,
                 recv_region: Buffer | None = None,
                 pacing_bps: float | None = None,
                 ack_every: int = 1) -> None:
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        if ack_every < 1:
            raise ValueError(f"ack_every must be >= 1, got {ack_every}")
        self.net = net
        self.node_id = node_id
        self.peer_id = peer_id
        self.qp_id = qp_id
        self.window = window
        link = net.link_for(node_id, peer_id)
        self.rto_ns = rto_ns if rto_ns is not None else default_rto_ns(link)
        self.mtu_payload = mtu_payload
        self.recv_region = recv_region
        self.pacing_bps = pacing_bps if pacing_bps is not None else link.bandwidth_bps
        self._gap_cache: dict[int, SimTime] = {}
        self.stats = GbnStats()

        # sender half
        self.base = 0
        self.next_psn = 0
        self._psn_counter = 0
        self._pending: deque[Packet] = deque()  # fragments not yet transmitted
        self._inflight: dict[int, Packet] = {}
        self._tx_cursor: SimTime = 0
        self._timer_armed = False
        self._rto_deadline: SimTime = 0
        self._timer_at: SimTime | None = None  # at most one physical timer outstanding
        self.next_wqe_seq = 0
        self._msg_last_psn: dict[int, tuple[int, int]] = {}  # seq -> (last psn, length)
        self.send_cq: deque[Completion] = deque()
        self.on_send_completion: Optional[Callable[[Completion], None]] = None

        # receiver half
        self.expected_psn = 0
        self.ack_every = ack_every
        self._acks_owed = 0
        self._nak_pending = False
        self._cur_msg_seq: int | None = None
        self._cur_msg_bytes = 0
        self._cur_target: Buffer | None = None
        self.next_recv_seq = 0
        self._posted: dict[int, WorkRequest] = {}
        self.recv_cq: deque[Completion] = deque()
        self.on_recv_completion: Optional[Callable[[Completion], None]] = None
        # Invoked with the final fragment's payload; intended for messages
        # that fit a single packet (the control channel enforces that).
        self.on_message: Optional[Callable[[int, bytes, SimTime], None]] = None
        self.delivery_log: list[int] | None = None  # enable in tests for ordering checks

    # -- posting ------------------------------------------------------------

    def post_send(self, wr: WorkRequest, now: SimTime | None = None,
                  source: bytes | bytearray | memoryview | None = None) -> int:
        now = self.net.now if now is None else now
        if wr.stride != 1:
            raise ValueError("the reliable transport sends contiguous streams; stride must be 1")
        if self.next_wqe_seq >= WQE_SEQ_LIMIT:
            raise SequenceLimitError(f"wqe_seq limit reached on qp {self.qp_id}")
        wr.wqe_seq = self.next_wqe_seq
        self.next_wqe_seq += 1
        if source is None and wr.buffer is not None and wr.buffer.data is not None:
            source = wr.buffer.data
        frags = fragment(wr, self.mtu_payload, source,
                         src_node=self.node_id, dst_node=self.peer_id, qp_id=self.qp_id)
        for pkt in frags:
            pkt.deadline_hint = self._psn_counter + 1  # psn+1: field value 0 means absent
            self._psn_counter += 1
            self._pending.append(pkt)
        self._msg_last_psn[wr.wqe_seq] = (self._psn_counter - 1, wr.length)
        self._pump(now)
        return wr.wqe_seq

    def post_recv(self, wr: WorkRequest, now: SimTime | None = None) -> int:
        if self.next_recv_seq >= WQE_SEQ_LIMIT:
            raise SequenceLimitError(f"recv wqe_seq limit reached on qp {self.qp_id}")
        wr.wqe_seq = self.next_recv_seq
        self.next_recv_seq += 1
        self._posted[wr.wqe_seq] = wr
        if wr.wqe_seq == self._cur_msg_seq and wr.buffer is not None:
            self._cur_target = wr.buffer  # posted mid-message; adopt its buffer
        return wr.wqe_seq

    # -- sender half ----------------------------------------------------------

    @staticmethod
    def _psn(pkt: Packet) -> int:
        assert pkt.deadline_hint is not None
        return pkt.deadline_hint - 1

    def _pump(self, now: SimTime) -> None:
        cursor = max(now, self._tx_cursor)
        sent_any = False
        pending = self._pending
        inflight = self._inflight
        send = self.net.send
        limit = self.base + self.window
        while pending and self.next_psn < limit:
            pkt = pending.popleft()
            assert self._psn(pkt) == self.next_psn
            inflight[self.next_psn] = pkt
            self.next_psn += 1
            send(pkt, cursor)
            cursor += self._gap(pkt)
            self.stats.sent += 1
            sent_any = True
        self._tx_cursor = max(self._tx_cursor, cursor)
        if sent_any and not self._timer_armed:
            self._arm_rto(now)

    def _gap(self, pkt: Packet) -> SimTime:
        plen = pkt.payload_len
        gap = self._gap_cache.get(plen)
        if gap is None:
            gap = self._gap_cache[plen] = max(1, round(plen * 8e9 / self.pacing_bps)) if plen else 1
        return gap

    def _arm_rto(self, now: SimTime) -> None:
        # The deadline only ever moves forward, so one outstanding physical
        # timer suffices: when it fires early it reschedules for the
        # remainder instead of pushing a fresh heap entry per ACK.
        self._rto_deadline = now + self.rto_ns
        self._timer_armed = True
        if self._timer_at is None:
            self._timer_at = self._rto_deadline
            self.net.schedule_timer(self._rto_deadline, self.node_id, self.qp_id, -1, 0)

    def _disarm_rto(self) -> None:
        self._timer_armed = False

    def on_timer(self, qp_id: int, wqe_seq: int, gen: int, now: SimTime) -> None:
        self._timer_at = None
        if not self._timer_armed:
            return
        if now < self._rto_deadline:
            self._timer_at = self._rto_deadline
            self.net.schedule_timer(self._rto_deadline, self.node_id, self.qp_id, -1, 0)
            return
        self._timer_armed = False
        if not self._inflight:
            return
        self.stats.rto_fires += 1
        self._retransmit_window(now)
        # Count the timeout from the end of the retransmission burst, not its
        # start: a window can take longer to serialize than one RTO, and
        # re-firing mid-burst would pile up retransmissions without bound.
        self._arm_rto(max(now, self._tx_cursor))

    def _retransmit_window(self, now: SimTime) -> None:
        cursor = max(now, self._tx_cursor)
        for psn in range(self.base, self.next_psn):
            pkt = self._inflight.get(psn)
            if pkt is None:
                continue
            self.net.send(pkt, cursor)
            cursor += self._gap(pkt)
            self.stats.retransmissions += 1
        self._tx_cursor = cursor

    def _handle_ack(self, pkt: Packet, now: SimTime) -> None:
        if pkt.stride_index == ACK_SUBTYPE_NAK:
            self.stats.naks_received += 1
            expected = min(pkt.placement_offset, self.next_psn)
            self._advance_base(expected, now)
            self._retransmit_window(now)
            if self._inflight:
                self._arm_rto(max(now, self._tx_cursor))
            return
        self.stats.acks_received += 1
        acked = pkt.placement_offset
        self._advance_base(acked + 1, now)

    def _advance_base(self, new_base: int, now: SimTime) -> None:
        if new_base <= self.base:
            return
        new_base = min(new_base, self.next_psn)
        inflight = self._inflight
        for psn in range(self.base, new_base):
            inflight.pop(psn, None)
        self.base = new_base
        last_psns = self._msg_last_psn  # in post order, so seqs and psns ascend
        while last_psns:
            seq, (last_psn, length) = next(iter(last_psns.items()))
            if last_psn >= new_base:
                break
            del last_psns[seq]
            c = Completion(seq, CompletionStatus.COMPLETE, length, now)
            self.send_cq.append(c)
            if self.on_send_completion:
                self.on_send_completion(c)
        if self._inflight:
            self._arm_rto(now)  # restart for the new oldest unacked
        else:
            self._disarm_rto()
        self._pump(now)

    # -- receiver half ---------------------------------------------------------

    def on_packet(self, pkt: Packet, now: SimTime, ecn: bool = False) -> None:
        if pkt.kind == PacketKind.ACK:
            self._handle_ack(pkt, now)
            return
        if pkt.kind != PacketKind.DATA:
            return
        hint = pkt.deadline_hint
        if hint is None:
            self.stats.malformed += 1
            return
        psn = hint - 1
        if psn == self.expected_psn:
            self.expected_psn += 1
            self._nak_pending = False
            self._accept(pkt, now)
            self._acks_owed += 1
            if self._acks_owed >= self.ack_every or pkt.is_last:
                self._acks_owed = 0
                self._send_ack(ACK_SUBTYPE_CUMULATIVE, psn, now)
        elif psn > self.expected_psn:
            self.stats.out_of_order_dropped += 1
            if not self._nak_pending:
                self._nak_pending = True
                self.stats.naks_sent += 1
                self._send_ack(ACK_SUBTYPE_NAK, self.expected_psn, now)
        else:
            self.stats.duplicates += 1
            self._acks_owed = 0
            self._send_ack(ACK_SUBTYPE_CUMULATIVE, self.expected_psn - 1, now)

    def _send_ack(self, subtype: int, psn: int, now: SimTime) -> None:
        self.net.send(Packet(
            src_node=self.node_id, dst_node=self.peer_id, qp_id=self.qp_id,
            wqe_seq=0, placement_offset=psn, stride_index=subtype,
            kind=PacketKind.ACK,
        ), now)

    def _accept(self, pkt: Packet, now: SimTime) -> None:
        if self.delivery_log is not None:
            self.delivery_log.append(self._psn(pkt))
        if pkt.wqe_seq != self._cur_msg_seq:
            # In-order delivery means the active message switches at most once
            # per message, so resolve its placement target here, not per packet.
            self._cur_msg_seq = pkt.wqe_seq
            self._cur_msg_bytes = 0
            wr = self._posted.get(pkt.wqe_seq)
            self._cur_target = wr.buffer if wr is not None and wr.buffer is not None else self.recv_region
        target = self._cur_target
        if target is not None:
            off = pkt.placement_offset
            if off + pkt.payload_len <= target.length:
                if target.data is not None and pkt.payload:
                    target.data[off:off + pkt.payload_len] = pkt.payload
            else:
                self.stats.malformed += 1
        elif pkt.payload_len:
            self.stats.unplaced += 1
        self._cur_msg_bytes += pkt.payload_len
        if pkt.is_last:
            seq = pkt.wqe_seq
            self._posted.pop(seq, None)
            c = Completion(seq, CompletionStatus.COMPLETE, self._cur_msg_bytes, now)
            self.recv_cq.append(c)
            if self.on_recv_completion:
                self.on_recv_completion(c)
            if self.on_message:
                self.on_message(seq, pkt.payload, now)
            self._cur_msg_seq = None
            self._cur_msg_bytes = 0

    # -- polling ----------------------------------------------------------------

    def poll_send_cq(self) -> list[Completion]:
        out = list(self.send_cq)
        self.send_cq.clear()
        return out

    def poll_recv_cq(self) -> list[Completion]:
        out = list(self.recv_cq)
        self.recv_cq.clear()
        return out


def gbn_pair(net: Network, src: int, dst: int, qp_id: int, **kw) -> tuple[GbnQp, GbnQp]:
    """Endpoints for a unidirectional data flow src -> dst (ACKs flow back)."""
    sender = GbnQp(net, src, dst, qp_id, **{k: v for k, v in kw.items() if k != "recv_region"})
    receiver = GbnQp(net, dst, src, qp_id, **kw)
    return sender, receiver


class ControlChannel:
    """Reliable bidirectional message channel between two nodes.

    Messages must fit one packet; collective phase markers and timeout
    proposals are far smaller.  Built from one Go-Back-N flow per direction.
    """

    def __init__(self, net: Network, node_a: int, node_b: int,
                 qp_id_ab: int, qp_id_ba: int, *,
                 mtu_payload: int = DEFAULT_MTU_PAYLOAD,
                 window: int = DEFAULT_WINDOW,
                 rto_ns: SimTime | None = None) -> None:
        self.mtu_payload = mtu_payload
        self._ab_tx, self._ab_rx = gbn_pair(net, node_a, node_b, qp_id_ab,
                                            window=window, rto_ns=rto_ns,
                                            mtu_payload=mtu_payload)
        self._ba_tx, self._ba_rx = gbn_pair(net, node_b, node_a, qp_id_ba,
                                            window=window, rto_ns=rto_ns,
                                            mtu_payload=mtu_payload)
        self._nodes = {node_a: (self._ab_tx, self._ba_rx),
                       node_b: (self._ba_tx, self._ab_rx)}

    def endpoints(self) -> list[tuple[int, int, GbnQp]]:
        """(node, qp_id, endpoint) triples for node-handler registration."""
        return [
            (self._ab_tx.node_id, self._ab_tx.qp_id, self._ab_tx),
            (self._ab_rx.node_id, self._ab_rx.qp_id, self._ab_rx),
            (self._ba_tx.node_id, self._ba_tx.qp_id, self._ba_tx),
            (self._ba_rx.node_id, self._ba_rx.qp_id, self._ba_rx),
        ]

    def send(self, from_node: int, payload: bytes, now: SimTime) -> None:
        if len(payload) > self.mtu_payload:
            raise ValueError(f"control message of {len(payload)} bytes exceeds "
                             f"the {self.mtu_payload}-byte payload capacity")
        if not payload:
            raise ValueError("control message must not be empty")
        tx, _ = self._nodes[from_node]
        wr = WorkRequest(verb=Verb.SEND, length=len(payload), timeout=1)
        tx.post_send(wr, now, source=payload)

    def set_handler(self, node: int, fn: Callable[[bytes, SimTime], None]) -> None:
        _, rx = self._nodes[node]
        rx.on_message = lambda seq, payload, now: fn(payload, now)
