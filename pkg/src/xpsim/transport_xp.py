"""Best-effort, out-of-order transport with bounded completion.

Every packet is self-describing, so the receiver holds state for at most one
active message per QP.  Arriving data is matched against expected_wqe_seq:

  * match    -> place the payload at its offset,
  * greater  -> finalize the active message as PARTIAL_PREEMPTED, advance,
                then place,
  * less     -> drop as late; the WQE already completed.

Completion is bounded in time by per-WQE deadlines and in accounting by a
byte counter.  There are no acknowledgments and no retransmissions: a sender
WQE completes when its last fragment has been transmitted, and lost bytes
surface as a partial byte count at the receiver, never as a stall.

Loss recovery above this layer (Hadamard/stride coding) is content-agnostic
here: stride metadata only changes where payload bytes land.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .congestion import (ACK_SUBTYPE_FEEDBACK, Controller, NullController,
                         build_feedback, parse_feedback)
from .core import (DEFAULT_MTU_PAYLOAD, Buffer, Completion, CompletionStatus,
                   Packet, PacketKind, ReceiverMessageContext, SimTime, Verb,
                   WorkRequest, placement_spans, span_end)
from .fabric import Network

WQE_SEQ_LIMIT = 0xFFFF_FFFF  # u32 wire field; wraparound unsupported by design

# Persistent per-QP NIC state, in bytes.  This is the itemized footprint the
# scalability model reports; the duplicate-suppression set is bounded by one
# message and is not persistent (see dedup_mode="counter" for strict O(1)).
QP_PERSISTENT_FIELDS: tuple[tuple[str, int], ...] = (
    ("next_wqe_seq", 4),
    ("expected_wqe_seq", 4),
    ("msg_bytes_received", 4),
    ("msg_len", 4),
    ("msg_deadline", 8),
    ("recv_region_base", 8),
    ("recv_region_len", 4),
    ("stride_cfg", 4),
    ("cc_rate", 8),
    ("flags", 2),
    ("peer_route", 2),
)

_READ_REQ = struct.Struct("<QQ")  # (source offset, length)


class SequenceLimitError(RuntimeError):
    """wqe_seq space (u32) exhausted; the QP must be torn down and recreated."""


class CompletionMode(Enum):
    # Arrival of the final fragment completes the message with whatever byte
    # count accumulated; gaps are reported through received_bytes.
    LAST_FRAGMENT = "last_fragment"
    # COMPLETE additionally requires the byte counter to cover the message.
    STRICT = "strict"


class PlacementAction(Enum):
    PLACED = "placed"
    PREEMPTED_THEN_PLACED = "preempted_then_placed"
    DROPPED_LATE = "dropped_late"
    MALFORMED = "malformed"


@dataclass(slots=True)
class XpQpStats:
    placed: int = 0
    duplicates: int = 0
    late_dropped: int = 0
    late_dropped_bytes: int = 0
    malformed: int = 0
    preemptions: int = 0
    recv_timeouts: int = 0
    send_timeouts: int = 0
    feedback_sent: int = 0
    read_fragments_suppressed: int = 0


@dataclass(slots=True)
class _SendJob:
    wqe_seq: int
    fragments: list[Packet]
    next_idx: int = 0
    committed_bytes: int = 0
    emit_cqe: bool = True
    deadline: SimTime | None = None  # responder-side READ suppression
    done: bool = False
    cancelled: bool = False


def fragment(wr: WorkRequest, mtu_payload: int = DEFAULT_MTU_PAYLOAD,
             source: bytes | bytearray | memoryview | None = None, *,
             src_node: int = 0, dst_node: int = 0, qp_id: int = 0) -> list[Packet]:
    """Packetize a posted work request into self-describing packets.

    With stride S > 1 the message must be whole blocks: length a multiple of
    mtu_payload and the block count a multiple of S.  Packet j of a group of
    S blocks carries elements [j*p/S, (j+1)*p/S) of each block, p elements in
    total, with placement_offset at the group base.  source omitted yields
    virtual packets (payload_len set, payload empty) for timing-only runs.
    """
    if wr.wqe_seq < 0:
        raise ValueError("work request has no wqe_seq; post it before fragmenting")
    if mtu_payload <= 0:
        raise ValueError(f"mtu_payload must be positive, got {mtu_payload}")
    view: memoryview | None = None
    if source is not None:
        view = memoryview(source)[wr.local_offset:wr.local_offset + wr.length]
        if len(view) != wr.length:
            raise ValueError(f"source has {len(view)} bytes at offset {wr.local_offset}, "
                             f"request wants {wr.length}")
    packets: list[Packet] = []

    if wr.stride == 1:
        offset = 0
        while offset < wr.length:
            n = min(mtu_payload, wr.length - offset)
            payload = bytes(view[offset:offset + n]) if view is not None else b""
            packets.append(Packet(
                src_node=src_node, dst_node=dst_node, qp_id=qp_id,
                wqe_seq=wr.wqe_seq,
                placement_offset=wr.remote_offset + offset,
                payload_len=n, payload=payload,
                stride=1, stride_index=0,
                is_last=offset + n >= wr.length,
            ))
            offset += n
        return packets

    s = wr.stride
    p_bytes = mtu_payload
    if p_bytes % (4 * s):
        raise ValueError(f"mtu_payload {p_bytes} not divisible by 4*stride ({4 * s})")
    if wr.length % p_bytes:
        raise ValueError(f"strided message length {wr.length} not a multiple of block size {p_bytes}")
    blocks = wr.length // p_bytes
    if blocks % s:
        raise ValueError(f"block count {blocks} not a multiple of stride {s}")
    q_bytes = p_bytes // s
    groups = blocks // s
    for g in range(groups):
        group_base = g * s * p_bytes
        for j in range(s):
            if view is not None:
                payload = b"".join(
                    bytes(view[group_base + k * p_bytes + j * q_bytes:
                               group_base + k * p_bytes + (j + 1) * q_bytes])
                    for k in range(s)
                )
            else:
                payload = b""
            packets.append(Packet(
                src_node=src_node, dst_node=dst_node, qp_id=qp_id,
                wqe_seq=wr.wqe_seq,
                placement_offset=wr.remote_offset + group_base,
                payload_len=p_bytes, payload=payload,
                stride=s, stride_index=j,
                is_last=g == groups - 1 and j == s - 1,
            ))
    return packets


class XpQp:
    """One endpoint of an XP queue pair.

    The same object carries sender state (outgoing messages, pacing cursor)
    and receiver state (single active message context); a READ posted here
    registers its WQE on the receive side and ships a CONTROL request to the
    peer, which streams the data back with the requester's deadline attached.
    Data QPs are used unidirectionally so the wqe_seq spaces of the two
    directions never mix.
    """

    def __init__(self, net: Network, node_id: int, peer_id: int, qp_id: int, *,
                 controller: Controller | None = None,
                 mtu_payload: int = DEFAULT_MTU_PAYLOAD,
                 completion_mode: CompletionMode = CompletionMode.STRICT,
                 dedup_mode: str = "offset_set",
                 recv_region: Buffer | None = None,
                 read_source: Buffer | None = None,
                 emit_feedback: bool | None = None,
                 feedback_aggregation: int = 1,
                 burst: int = 32) -> None:
        if dedup_mode not in ("offset_set", "counter"):
            raise ValueError(f"unknown dedup_mode {dedup_mode!r}")
        if feedback_aggregation < 1:
            raise ValueError("feedback_aggregation must be >= 1")
        self.net = net
        self.node_id = node_id
        self.peer_id = peer_id
        self.qp_id = qp_id
        self.mtu_payload = mtu_payload
        self.completion_mode = completion_mode
        self.dedup_mode = dedup_mode
        self._dedup_set = dedup_mode == "offset_set"
        self.recv_region = recv_region
        self.read_source = read_source
        link = net.link_for(node_id, peer_id)
        self.controller: Controller = controller or NullController(link.bandwidth_bps)
        self.emit_feedback = self.controller.wants_feedback if emit_feedback is None else emit_feedback
        self.feedback_aggregation = feedback_aggregation
        self.burst = burst
        self.stats = XpQpStats()

        # sender half
        self.next_wqe_seq = 0
        self._tx_cursor: SimTime = 0
        self._gap_rate: float = -1.0
        self._gap_cache: dict[int, SimTime] = {}
        self._sends: dict[int, _SendJob] = {}
        self.send_cq: deque[Completion] = deque()
        self.on_send_completion: Optional[Callable[[Completion], None]] = None

        # receiver half
        self.expected_wqe_seq = 0
        self.next_recv_seq = 0
        self.ctx: ReceiverMessageContext | None = None
        self._ctx_target: Buffer | None = None
        self._posted: dict[int, WorkRequest] = {}
        self._unclaimed: dict[int, tuple[int, SimTime]] = {}
        self.recv_cq: deque[Completion] = deque()
        self.on_recv_completion: Optional[Callable[[Completion], None]] = None
        self._fb_fragments = 0
        self._fb_bytes = 0
        self._fb_ecn = False

        # timers: gen parity encodes the side (even recv, odd send)
        self._gen_counter = 0
        self._armed_recv: dict[int, int] = {}
        self._armed_send: dict[int, int] = {}

    # -- posting ----------------------------------------------------------

    def _alloc_seq(self) -> int:
        if self.next_wqe_seq >= WQE_SEQ_LIMIT:
            raise SequenceLimitError(f"wqe_seq limit {WQE_SEQ_LIMIT} reached on qp {self.qp_id}")
        seq = self.next_wqe_seq
        self.next_wqe_seq += 1
        return seq

    def post_send(self, wr: WorkRequest, now: SimTime | None = None,
                  source: bytes | bytearray | memoryview | None = None) -> int:
        """Queue a send-side work request; returns its wqe_seq.

        SEND/WRITE/WRITE_WITH_IMM fragment and transmit immediately, paced at
        the congestion controller's rate; the WQE completes at the final
        fragment's transmit time, or earlier as PARTIAL_TIMEOUT if the sender
        deadline expires first.  READ sends a CONTROL request carrying the
        requester's absolute deadline and completes via the receive side.
        """
        now = self.net.now if now is None else now
        if wr.verb == Verb.RECV:
            raise ValueError("RECV work requests go through post_recv")
        seq = self._alloc_seq()
        wr.wqe_seq = seq
        if wr.verb == Verb.READ:
            self._post_read(wr, now)
            return seq
        if source is None and wr.buffer is not None and wr.buffer.data is not None:
            source = wr.buffer.data
        job = _SendJob(seq, fragment(wr, self.mtu_payload, source,
                                     src_node=self.node_id, dst_node=self.peer_id,
                                     qp_id=self.qp_id))
        self._sends[seq] = job
        self._arm("send", seq, now + wr.timeout)
        self._pump(job, now)
        return seq

    def post_recv(self, wr: WorkRequest, now: SimTime | None = None) -> int:
        """Post a receive-side WQE. Its deadline starts now and restarts at
        the first observed packet of the message, so a fully lost message
        still completes by posting time + timeout."""
        now = self.net.now if now is None else now
        if self.next_recv_seq >= WQE_SEQ_LIMIT:
            raise SequenceLimitError(f"recv wqe_seq limit reached on qp {self.qp_id}")
        seq = self.next_recv_seq
        self.next_recv_seq += 1
        wr.wqe_seq = seq
        if seq < self.expected_wqe_seq:
            # The message window already passed (it was preempted or timed out
            # before the WQE existed); complete immediately, bounded progress.
            bytes_recv, _ = self._unclaimed.pop(seq, (0, now))
            self._emit_recv(Completion(seq, CompletionStatus.PARTIAL_PREEMPTED, bytes_recv, now))
            return seq
        self._posted[seq] = wr
        if self.ctx is not None and self.ctx.wqe_seq == seq:
            self.ctx.deadline = now + wr.timeout
            self.ctx.message_len = wr.length
            self._ctx_target = wr.buffer if wr.buffer is not None else self.recv_region
        self._arm("recv", seq, now + wr.timeout)
        return seq

    def _post_read(self, wr: WorkRequest, now: SimTime) -> None:
        deadline = now + wr.timeout
        self._posted[wr.wqe_seq] = wr
        self._arm("recv", wr.wqe_seq, deadline)
        req = Packet(
            src_node=self.node_id, dst_node=self.peer_id, qp_id=self.qp_id,
            wqe_seq=wr.wqe_seq, payload_len=_READ_REQ.size,
            payload=_READ_REQ.pack(wr.remote_offset, wr.length),
            deadline_hint=deadline, kind=PacketKind.CONTROL,
        )
        self.net.send(req, now)

    # -- sender pacing ----------------------------------------------------

    def _pump(self, job: _SendJob, now: SimTime) -> None:
        if job.cancelled or job.done:
            return
        rate = self.controller.rate(now)
        if rate != self._gap_rate:
            self._gap_rate = rate
            self._gap_cache = {}
        gap_cache = self._gap_cache
        send = self.net.send
        cursor = max(now, self._tx_cursor)
        end = min(job.next_idx + self.burst, len(job.fragments))
        while job.next_idx < end:
            pkt = job.fragments[job.next_idx]
            if job.deadline is not None and cursor > job.deadline:
                # READ responder: emission stops once the clock passes the
                # requester's deadline. Remaining fragments never hit the wire.
                self.stats.read_fragments_suppressed += len(job.fragments) - job.next_idx
                job.done = True
                self._sends.pop(job.wqe_seq, None)
                self._tx_cursor = cursor
                return
            send(pkt, cursor)
            plen = pkt.payload_len
            gap = gap_cache.get(plen)
            if gap is None:
                gap = gap_cache[plen] = max(1, round(plen * 8e9 / rate)) if plen else 1
            cursor += gap
            job.committed_bytes += plen
            job.next_idx += 1
        self._tx_cursor = cursor
        if job.next_idx >= len(job.fragments):
            self.net.schedule_wake(cursor, lambda at, j=job: self._finish_send(j, at))
        else:
            self.net.schedule_wake(cursor, lambda at, j=job: self._pump(j, at))

    def _finish_send(self, job: _SendJob, now: SimTime) -> None:
        if job.done or job.cancelled:
            return
        job.done = True
        self._sends.pop(job.wqe_seq, None)
        self._armed_send.pop(job.wqe_seq, None)
        if job.emit_cqe:
            c = Completion(job.wqe_seq, CompletionStatus.COMPLETE, job.committed_bytes, now)
            self.send_cq.append(c)
            if self.on_send_completion:
                self.on_send_completion(c)

    # -- timers -----------------------------------------------------------

    def _arm(self, side: str, seq: int, at: SimTime) -> None:
        self._gen_counter += 2
        gen = self._gen_counter + (1 if side == "send" else 0)
        (self._armed_send if side == "send" else self._armed_recv)[seq] = gen
        self.net.schedule_timer(at, self.node_id, self.qp_id, seq, gen)

    def armed_timers(self) -> set[tuple[str, int]]:
        return {("send", s) for s in self._armed_send} | {("recv", s) for s in self._armed_recv}

    def on_timer(self, qp_id: int, wqe_seq: int, gen: int, now: SimTime) -> None:
        if gen & 1:
            if self._armed_send.get(wqe_seq) != gen:
                return
            del self._armed_send[wqe_seq]
            job = self._sends.pop(wqe_seq, None)
            if job is None or job.done:
                return
            job.cancelled = True
            self.stats.send_timeouts += 1
            if job.emit_cqe:
                c = Completion(wqe_seq, CompletionStatus.PARTIAL_TIMEOUT, job.committed_bytes, now)
                self.send_cq.append(c)
                if self.on_send_completion:
                    self.on_send_completion(c)
            return
        if self._armed_recv.get(wqe_seq) != gen:
            return
        del self._armed_recv[wqe_seq]
        if wqe_seq < self.expected_wqe_seq:
            return
        # Timers for not-yet-expected messages only exist while earlier seqs
        # are still pending; firing means the whole window timed out.
        while self.expected_wqe_seq < wqe_seq:
            self._finalize(self.expected_wqe_seq, CompletionStatus.PARTIAL_PREEMPTED, now)
        self.stats.recv_timeouts += 1
        self._finalize(wqe_seq, CompletionStatus.PARTIAL_TIMEOUT, now)

    # -- receive path -----------------------------------------------------

    def on_packet(self, pkt: Packet, now: SimTime, ecn: bool = False) -> PlacementAction | None:
        if pkt.kind == PacketKind.DATA:
            return self._on_data(pkt, now, ecn)
        if pkt.kind == PacketKind.ACK and pkt.stride_index == ACK_SUBTYPE_FEEDBACK:
            self.controller.on_feedback(parse_feedback(pkt, now), now)
            return None
        if pkt.kind == PacketKind.CNP:
            fb = parse_feedback(pkt, now)
            fb.ecn = True
            self.controller.on_feedback(fb, now)
            return None
        if pkt.kind == PacketKind.CONTROL:
            self._on_read_request(pkt, now)
            return None
        return None

    def _on_data(self, pkt: Packet, now: SimTime, ecn: bool) -> PlacementAction:
        seq = pkt.wqe_seq
        if seq < self.expected_wqe_seq:
            self.stats.late_dropped += 1
            self.stats.late_dropped_bytes += pkt.payload_len
            return PlacementAction.DROPPED_LATE

        preempted = False
        if seq > self.expected_wqe_seq:
            # Finalize the active message and any skipped posted WQEs, in
            # order, before the new message claims the context.
            while self.expected_wqe_seq < seq:
                if self._finalize(self.expected_wqe_seq, CompletionStatus.PARTIAL_PREEMPTED, now):
                    preempted = True

        ctx = self.ctx
        if ctx is None:
            ctx = self.ctx = ReceiverMessageContext(wqe_seq=seq, first_packet_at=now)
            wr = self._posted.get(seq)
            self._ctx_target = wr.buffer if wr is not None and wr.buffer is not None else self.recv_region
            if wr is not None:
                # Deadline restarts at the first observed packet; the posted
                # WQE's length is the authoritative message size.
                ctx.deadline = now + wr.timeout
                ctx.message_len = wr.length
                self._arm("recv", seq, ctx.deadline)

        target = self._ctx_target
        plen = pkt.payload_len
        if pkt.stride == 1:
            # Contiguous placement needs no scatter list; this is nearly
            # every packet, so skip building one.
            dst = pkt.placement_offset
            spans = None
            if target is None or dst < 0 or dst + plen > target.length:
                self.stats.malformed += 1
                return PlacementAction.MALFORMED
        else:
            try:
                spans = placement_spans(pkt)
            except ValueError:
                self.stats.malformed += 1
                return PlacementAction.MALFORMED
            if target is None or any(d + n > target.length or d < 0 for d, _, n in spans):
                self.stats.malformed += 1
                return PlacementAction.MALFORMED

        if self._dedup_set:
            # (offset, stride_index) packed into one int; the index is a u16
            # wire field so the shift cannot collide.
            key = (pkt.placement_offset << 16) | pkt.stride_index
            placed = ctx.placed_fragments
            if key in placed:
                self.stats.duplicates += 1
                return PlacementAction.PLACED
            placed.add(key)
        else:
            ctx.fragment_count += 1
        data = target.data
        if data is not None and pkt.payload:
            if spans is None:
                data[dst:dst + plen] = pkt.payload
            else:
                payload = pkt.payload
                for d, s, n in spans:
                    data[d:d + n] = payload[s:s + n]
        ctx.bytes_received += plen
        self.stats.placed += 1
        if pkt.is_last:
            ctx.seen_last = True
            if ctx.message_len == 0:
                # No WQE declared a size; infer it from the final packet's
                # span (exact when the message's placement base is 0).
                ctx.message_len = span_end(pkt)
        if self.emit_feedback:
            self._note_feedback(pkt, now, ecn)

        if ctx.seen_last and self._is_complete(ctx):
            self._finalize(seq, CompletionStatus.COMPLETE, now)
        return PlacementAction.PREEMPTED_THEN_PLACED if preempted else PlacementAction.PLACED

    def _is_complete(self, ctx: ReceiverMessageContext) -> bool:
        if not ctx.seen_last:
            return False
        if self.completion_mode == CompletionMode.LAST_FRAGMENT:
            return True
        return ctx.message_len > 0 and ctx.bytes_received >= ctx.message_len

    def _finalize(self, seq: int, status: CompletionStatus, now: SimTime) -> bool:
        """Retire message `seq` (must be the expected one), emit its CQE if a
        WQE was posted, advance the window.  Returns True if a completion or
        data was pending."""
        assert seq == self.expected_wqe_seq
        ctx = self.ctx if self.ctx is not None and self.ctx.wqe_seq == seq else None
        bytes_recv = ctx.bytes_received if ctx is not None else 0
        if status == CompletionStatus.PARTIAL_PREEMPTED:
            self.stats.preemptions += 1
        self._flush_feedback(now)
        # Cancel any residual deadline so it cannot fire for a retired seq.
        self._armed_recv.pop(seq, None)
        wr = self._posted.pop(seq, None)
        had_work = wr is not None or bytes_recv > 0
        if wr is not None:
            self._emit_recv(Completion(seq, status, bytes_recv, now))
        elif bytes_recv > 0:
            if len(self._unclaimed) >= 64:
                self._unclaimed.pop(next(iter(self._unclaimed)))
            self._unclaimed[seq] = (bytes_recv, now)
        if ctx is not None:
            self.ctx = None
            self._ctx_target = None
        self.expected_wqe_seq = seq + 1
        return had_work

    def _emit_recv(self, c: Completion) -> None:
        self.recv_cq.append(c)
        if self.on_recv_completion:
            self.on_recv_completion(c)

    # -- congestion feedback ----------------------------------------------

    def _note_feedback(self, pkt: Packet, now: SimTime, ecn: bool) -> None:
        self._fb_fragments += 1
        self._fb_bytes += pkt.payload_len
        self._fb_ecn = self._fb_ecn or ecn
        if self._fb_fragments >= self.feedback_aggregation:
            self._flush_feedback(now)

    def _flush_feedback(self, now: SimTime) -> None:
        if not self._fb_fragments:
            return
        fb = build_feedback(self.node_id, self.peer_id, self.qp_id,
                            self.expected_wqe_seq, self._fb_bytes, self._fb_ecn)
        self._fb_fragments = 0
        self._fb_bytes = 0
        self._fb_ecn = False
        self.stats.feedback_sent += 1
        self.net.send(fb, now)

    # -- READ responder ----------------------------------------------------

    def _on_read_request(self, pkt: Packet, now: SimTime) -> None:
        if self.read_source is None or self.read_source.data is None:
            self.stats.malformed += 1
            return
        try:
            offset, length = _READ_REQ.unpack(pkt.payload)
        except struct.error:
            self.stats.malformed += 1
            return
        if length <= 0 or offset + length > self.read_source.length:
            self.stats.malformed += 1
            return
        wr = WorkRequest(verb=Verb.WRITE, length=length, timeout=1,
                         remote_offset=0)
        wr.wqe_seq = pkt.wqe_seq
        frags = fragment(wr, self.mtu_payload,
                         memoryview(self.read_source.data)[offset:offset + length],
                         src_node=self.node_id, dst_node=self.peer_id, qp_id=self.qp_id)
        job = _SendJob(pkt.wqe_seq, frags, emit_cqe=False, deadline=pkt.deadline_hint)
        self._pump(job, now)

    # -- polling ------------------------------------------------------------

    def poll_send_cq(self) -> list[Completion]:
        out = list(self.send_cq)
        self.send_cq.clear()
        return out

    def poll_recv_cq(self) -> list[Completion]:
        out = list(self.recv_cq)
        self.recv_cq.clear()
        return out
