"""Sender pacing controllers driven by best-effort per-fragment feedback.

Congestion control is decoupled from reliability: a lost data packet simply
produces no feedback, and no controller action ever causes a retransmission.
Feedback packets ride the reverse link as kind=ACK with subtype FEEDBACK;
bytes covered are carried in placement_offset and the ECN echo in the stride
field (documented overloads, mirroring the Go-Back-N ACK encoding).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

from .core import Packet, PacketKind, SimTime

# ACK-kind subtypes carried in stride_index.
ACK_SUBTYPE_CUMULATIVE = 0
ACK_SUBTYPE_NAK = 1
ACK_SUBTYPE_FEEDBACK = 2


@dataclass
class Feedback:
    ecn: bool
    bytes_covered: int
    at: SimTime


def build_feedback(src_node: int, dst_node: int, qp_id: int, wqe_seq: int,
                   bytes_covered: int, ecn: bool) -> Packet:
    return Packet(
        src_node=src_node,
        dst_node=dst_node,
        qp_id=qp_id,
        wqe_seq=wqe_seq,
        placement_offset=bytes_covered,
        stride=1 if ecn else 0,
        stride_index=ACK_SUBTYPE_FEEDBACK,
        kind=PacketKind.ACK,
    )


def parse_feedback(pkt: Packet, now: SimTime) -> Feedback:
    return Feedback(ecn=bool(pkt.stride), bytes_covered=pkt.placement_offset, at=now)


class Controller(Protocol):
    def rate(self, now: SimTime) -> float: ...
    def on_feedback(self, fb: Feedback, now: SimTime) -> None: ...
    @property
    def wants_feedback(self) -> bool: ...


@dataclass
class RateState:
    rate_bps: float
    min_rate_bps: float
    max_rate_bps: float

    def clamp(self) -> None:
        self.rate_bps = min(max(self.rate_bps, self.min_rate_bps), self.max_rate_bps)


class NullController:
    """No congestion control: pace at line rate, ignore feedback."""

    wants_feedback = False

    def __init__(self, max_rate_bps: float) -> None:
        self._rate = max_rate_bps

    def rate(self, now: SimTime) -> float:
        return self._rate

    def on_feedback(self, fb: Feedback, now: SimTime) -> None:
        pass


class AimdController:
    """Additive increase on clean feedback, multiplicative decrease on an ECN
    mark or on a feedback gap (feedback simply stopping arriving)."""

    wants_feedback = True

    def __init__(self, max_rate_bps: float, *, min_rate_bps: float | None = None,
                 ai_bps: float | None = None, md_factor: float = 0.5,
                 feedback_gap_ns: SimTime = 500_000,
                 md_cooldown_ns: SimTime = 50_000) -> None:
        if not 0.0 < md_factor < 1.0:
            raise ValueError(f"md_factor must be in (0, 1), got {md_factor}")
        self.state = RateState(
            rate_bps=max_rate_bps,
            min_rate_bps=min_rate_bps if min_rate_bps is not None else max_rate_bps / 100.0,
            max_rate_bps=max_rate_bps,
        )
        self.ai_bps = ai_bps if ai_bps is not None else max_rate_bps / 50.0
        self.md_factor = md_factor
        self.feedback_gap_ns = feedback_gap_ns
        self.md_cooldown_ns = md_cooldown_ns
        self.last_feedback_at: SimTime | None = None
        self.last_md_at: SimTime | None = None
        self.md_count = 0
        self.ai_count = 0

    def _md(self, now: SimTime) -> None:
        if self.last_md_at is not None and now - self.last_md_at < self.md_cooldown_ns:
            return
        self.state.rate_bps *= self.md_factor
        self.state.clamp()
        self.last_md_at = now
        self.md_count += 1

    def _gap_check(self, now: SimTime) -> None:
        if self.last_feedback_at is not None and now - self.last_feedback_at > self.feedback_gap_ns:
            self._md(now)

    def rate(self, now: SimTime) -> float:
        self._gap_check(now)
        return self.state.rate_bps

    def on_feedback(self, fb: Feedback, now: SimTime) -> None:
        self._gap_check(now)
        if fb.ecn:
            self._md(now)
        else:
            self.state.rate_bps += self.ai_bps
            self.state.clamp()
            self.ai_count += 1
        self.last_feedback_at = now


def make_controller(name: str, max_rate_bps: float, **params) -> Controller:
    if name == "none":
        return NullController(max_rate_bps)
    if name == "aimd":
        return AimdController(max_rate_bps, **params)
    raise ValueError(f"unknown congestion controller {name!r}")
