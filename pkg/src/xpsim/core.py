"""Shared domain types: virtual time, packets, work requests, completions, buffers.

Wire format (little-endian, fixed field order, 34-byte header):

    kind(1) wqe_seq(4) placement_offset(8) payload_len(4) stride(2)
    stride_index(2) is_last(1) deadline_hint(8, 0 = absent) qp_id(4)

The payload follows the header, so a frame's payload capacity is exactly its
wire size minus HEADER_SIZE. Node addressing (src/dst) rides on the simulated
frame like an L2 header and is not part of the transport header; ECN is a
network-layer mark carried by the fabric, not serialized here.

Every packet is self-describing: placement_offset plus the stride fields are
enough to place its payload with no per-connection reassembly state.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

SimTime = int  # virtual nanoseconds

ELEM_SIZE = 4  # tensors are fp32 on the wire
DEFAULT_MTU_PAYLOAD = 4096  # payload bytes per packet = 1024 fp32 elements
HEADER_SIZE = 34


def usec(x: float) -> SimTime:
    return round(x * 1_000)


def msec(x: float) -> SimTime:
    return round(x * 1_000_000)


def sec(x: float) -> SimTime:
    return round(x * 1_000_000_000)


class Verb(IntEnum):
    SEND = 0
    RECV = 1
    WRITE = 2
    WRITE_WITH_IMM = 3
    READ = 4


class PacketKind(IntEnum):
    DATA = 0
    ACK = 1
    CNP = 2
    CONTROL = 3


class CompletionStatus(IntEnum):
    COMPLETE = 0
    PARTIAL_TIMEOUT = 1
    PARTIAL_PREEMPTED = 2
    DROPPED_LATE = 3  # diagnostic only, never attached to a WQE completion


_WIRE = struct.Struct("<BIQIHHBQI")
assert _WIRE.size == HEADER_SIZE


@dataclass(slots=True)
class Packet:
    """One wire packet. payload may be b"" with payload_len > 0 for
    timing-only simulations; such virtual packets must not be serialized."""

    src_node: int
    dst_node: int
    qp_id: int
    wqe_seq: int
    placement_offset: int = 0
    payload_len: int = 0
    payload: bytes = b""
    stride: int = 1
    stride_index: int = 0
    is_last: bool = False
    deadline_hint: SimTime | None = None
    kind: PacketKind = PacketKind.DATA

    def encode(self) -> bytes:
        if len(self.payload) != self.payload_len:
            raise ValueError("virtual packets (payload omitted) cannot be serialized")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        header = _WIRE.pack(
            self.kind,
            self.wqe_seq,
            self.placement_offset,
            self.payload_len,
            self.stride,
            self.stride_index,
            int(self.is_last),
            self.deadline_hint or 0,
            self.qp_id,
        )
        return header + self.payload

    @classmethod
    def decode(cls, wire: bytes, *, src_node: int = 0, dst_node: int = 0) -> Packet:
        if len(wire) < HEADER_SIZE:
            raise ValueError(f"truncated header: {len(wire)} < {HEADER_SIZE} bytes")
        (kind, wqe_seq, offset, payload_len, stride, stride_index,
         is_last, deadline, qp_id) = _WIRE.unpack_from(wire)
        payload = bytes(wire[HEADER_SIZE:])
        if len(payload) != payload_len:
            raise ValueError(f"payload length mismatch: header says {payload_len}, got {len(payload)}")
        return cls(
            src_node=src_node,
            dst_node=dst_node,
            qp_id=qp_id,
            wqe_seq=wqe_seq,
            placement_offset=offset,
            payload_len=payload_len,
            payload=payload,
            stride=stride,
            stride_index=stride_index,
            is_last=bool(is_last),
            deadline_hint=deadline or None,
            kind=PacketKind(kind),
        )


def payload_capacity(wire_mtu: int) -> int:
    """Payload bytes that fit in a frame of `wire_mtu` total bytes."""
    if wire_mtu <= HEADER_SIZE:
        raise ValueError(f"wire mtu {wire_mtu} does not cover the {HEADER_SIZE}-byte header")
    return wire_mtu - HEADER_SIZE


def placement_spans(pkt: Packet) -> list[tuple[int, int, int]]:
    """Destination scatter list for a data packet: (dst_offset, src_offset, nbytes).

    stride=1 packets land contiguously at placement_offset.  A stride-S packet
    carries p/S elements for each of S consecutive blocks of its group;
    placement_offset is the byte offset of the group base.  Raises ValueError
    for malformed stride metadata.
    """
    if pkt.stride < 1:
        raise ValueError("stride must be >= 1")
    if pkt.stride == 1:
        return [(pkt.placement_offset, 0, pkt.payload_len)]
    s = pkt.stride
    if pkt.stride_index >= s:
        raise ValueError(f"stride_index {pkt.stride_index} out of range for stride {s}")
    if pkt.payload_len % (ELEM_SIZE * s):
        raise ValueError(f"payload_len {pkt.payload_len} not divisible by {ELEM_SIZE * s}")
    p_bytes = pkt.payload_len  # one block's worth: p elements
    q_bytes = p_bytes // s  # slice per block: p/S elements
    base = pkt.placement_offset + pkt.stride_index * q_bytes
    return [(base + k * p_bytes, k * q_bytes, q_bytes) for k in range(s)]


def span_end(pkt: Packet) -> int:
    """Message length implied by a final packet: end of the byte range the
    message's packets cover, for either layout."""
    if pkt.stride == 1:
        return pkt.placement_offset + pkt.payload_len
    return pkt.placement_offset + pkt.stride * pkt.payload_len


@dataclass(slots=True)
class Buffer:
    """Registered memory region with bounds-checked writes.

    data is None for virtual buffers: placement bookkeeping (bounds, byte
    counters) still runs but no bytes move.
    """

    length: int
    data: bytearray | None

    @classmethod
    def allocate(cls, length: int, fill: int = 0) -> Buffer:
        return cls(length, bytearray([fill & 0xFF]) * length)

    @classmethod
    def virtual(cls, length: int) -> Buffer:
        return cls(length, None)

    def write(self, dst_offset: int, payload: bytes, src_offset: int, nbytes: int) -> None:
        if dst_offset < 0 or dst_offset + nbytes > self.length:
            raise IndexError(
                f"write [{dst_offset}, {dst_offset + nbytes}) outside region of {self.length} bytes"
            )
        if self.data is not None and payload:
            self.data[dst_offset:dst_offset + nbytes] = payload[src_offset:src_offset + nbytes]

    def zero(self) -> None:
        if self.data is not None:
            self.data[:] = bytes(self.length)

    def __len__(self) -> int:
        return self.length


def new_buffer(length: int, fill: int = 0) -> Buffer:
    """Zero-filled (or fill-byte) registered buffer; the receive path depends
    on fresh regions reading as zeros so that missing bytes are zeros."""
    if length <= 0:
        raise ValueError(f"buffer length must be positive, got {length}")
    return Buffer.allocate(length, fill)


@dataclass(slots=True)
class WorkRequest:
    verb: Verb
    length: int  # message bytes
    buffer: Buffer | None = None
    local_offset: int = 0  # read offset into buffer for sends
    remote_offset: int = 0  # placement base at the peer
    timeout: SimTime = 0
    stride: int = 1
    collective_tag: str | None = None
    wqe_seq: int = -1  # assigned at post time

    def __post_init__(self) -> None:
        if self.length <= 0:
            raise ValueError(f"work request length must be positive, got {self.length}")
        if self.timeout <= 0:
            raise ValueError(f"work request timeout must be positive, got {self.timeout}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


@dataclass(slots=True)
class Completion:
    wqe_seq: int
    status: CompletionStatus
    received_bytes: int
    completed_at: SimTime


@dataclass(slots=True)
class ReceiverMessageContext:
    """Single-active-message receiver state for the expected wqe_seq."""

    wqe_seq: int
    first_packet_at: SimTime | None = None
    bytes_received: int = 0
    message_len: int = 0  # 0 = not yet known
    deadline: SimTime | None = None
    seen_last: bool = False
    placed_fragments: set[int] = field(default_factory=set)  # packed (offset, stride_index)
    fragment_count: int = 0
