"""Ring collectives over either transport.

AllReduce is ReduceScatter (N-1 steps) followed by AllGather (N-1 steps)
on a ring: at step s, rank r sends one chunk to (r+1) mod N and receives
one from (r-1) mod N.  Each step is one message per directed edge, posted
as a matching SEND/RECV pair with a per-step deadline slice carved from
the invocation budget.

A rank's step s+1 send depends only on its own step s receive, so the ring
self-synchronizes: under the bounded-completion transport a straggler's
successor is preempted by the next message rather than stalled, and missing
bytes stay zero in the staging buffer.  In the Hadamard modes chunks travel
as transform coefficients; reduction is elementwise addition of encoded
values (the transform is linear) and decoding happens once at the end.
"""
from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

import numpy as np

from .congestion import make_controller
from .core import (DEFAULT_MTU_PAYLOAD, ELEM_SIZE, Buffer, Completion,
                   PacketKind, SimTime, Verb, WorkRequest, sec)
from .fabric import LinkModel, Network
from .recovery import DEFAULT_BLOCK_ELEMS, EncodedTensor, decode, encode
from .timeout_estimator import GroupEstimator, Phase, PhaseKind, initial, split_budget
from .transport_reliable import DEFAULT_WINDOW, ControlChannel, GbnQp
from .transport_xp import CompletionMode, XpQp

WARMUP_STEP_TIMEOUT = sec(3600)  # effectively unbounded; used before a budget exists
DATA_QP_BASE = 100
CONTROL_QP_BASE = 50_000


class CollectiveKind(Enum):
    ALLREDUCE = "allreduce"
    ALLGATHER = "allgather"
    REDUCESCATTER = "reducescatter"


class EncodeMode(Enum):
    RAW = "raw"
    HD_BLK = "hd_blk"
    HD_BLK_STR = "hd_blk_str"


class QpMux:
    """Per-node dispatcher: routes fabric events to the owning queue pair."""

    def __init__(self) -> None:
        self.qps: dict[int, object] = {}

    def register(self, qp) -> None:
        if qp.qp_id in self.qps:
            raise ValueError(f"qp_id {qp.qp_id} already registered on this node")
        self.qps[qp.qp_id] = qp

    def on_packet(self, pkt, now: SimTime, ecn: bool = False) -> None:
        self.qps[pkt.qp_id].on_packet(pkt, now, ecn)

    def on_timer(self, qp_id: int, wqe_seq: int, gen: int, now: SimTime) -> None:
        self.qps[qp_id].on_timer(qp_id, wqe_seq, gen, now)


def steps_for(kind: CollectiveKind, n: int) -> int:
    return 2 * (n - 1) if kind == CollectiveKind.ALLREDUCE else n - 1


def send_chunk_index(kind: CollectiveKind, n: int, rank: int, step: int) -> int:
    """Chunk sent by `rank` at `step` of the ring schedule.

    Reduce phase: rank r injects chunk r at step 0 and forwards the partial
    sum it just absorbed; after N-1 steps it owns chunk (r+1) mod N fully
    reduced.  Gather phase: forward the most recently learned chunk.
    """
    if kind == CollectiveKind.ALLREDUCE and step >= n - 1:
        return (rank + 1 - (step - (n - 1))) % n
    return (rank - step) % n


def recv_chunk_index(kind: CollectiveKind, n: int, rank: int, step: int) -> int:
    return send_chunk_index(kind, n, (rank - 1) % n, step)


def is_reduce_step(kind: CollectiveKind, n: int, step: int) -> bool:
    if kind == CollectiveKind.ALLGATHER:
        return False
    return step < n - 1


def effective_stride(requested: int, raw_blocks: int) -> int:
    """Cap the interleave stride at the chunk's own block count (rounded
    down to a power of two) so padding stays below 2x."""
    cap = 1 << max(0, raw_blocks.bit_length() - 1)
    return max(1, min(requested, cap))


@dataclass(frozen=True)
class ChunkPlan:
    start: int      # element offset in the global vector
    elems: int      # raw elements
    enc_elems: int  # transported elements (coefficients after padding)
    stride: int     # effective interleave stride
    nbytes: int     # message payload bytes on the wire


@dataclass(frozen=True)
class CollectiveConfig:
    kind: CollectiveKind
    n_ranks: int
    tensor_elems: int
    transport: str = "xp"            # "xp" | "gbn"
    encode: EncodeMode = EncodeMode.RAW
    stride: int = 1                  # requested interleave for HD_BLK_STR
    block_elems: int = DEFAULT_BLOCK_ELEMS
    mtu_payload: int = DEFAULT_MTU_PAYLOAD
    completion_mode: CompletionMode = CompletionMode.STRICT
    dedup_mode: str = "offset_set"
    budget_ns: SimTime | None = None  # None: warmup mode, effectively unbounded
    controller: str = "none"
    window: int = DEFAULT_WINDOW
    rto_ns: SimTime | None = None
    ack_every: int = 1               # reliable-transport ACK coalescing
    virtual: bool = False            # timing-only run, no real payload bytes

    def __post_init__(self) -> None:
        if self.n_ranks < 2:
            raise ValueError(f"ring needs at least 2 ranks, got {self.n_ranks}")
        if self.tensor_elems < self.n_ranks:
            raise ValueError(f"tensor of {self.tensor_elems} elements cannot be "
                             f"split into {self.n_ranks} chunks")
        if self.transport not in ("xp", "gbn"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.encode == EncodeMode.HD_BLK_STR:
            if self.stride < 1 or self.block_elems % self.stride != 0:
                raise ValueError(f"stride {self.stride} must divide block size "
                                 f"{self.block_elems}")
        if self.block_elems * ELEM_SIZE != self.mtu_payload:
            raise ValueError(f"block of {self.block_elems} fp32 elements must fill "
                             f"one {self.mtu_payload}-byte payload")
        if self.budget_ns is not None and self.budget_ns <= 0:
            raise ValueError(f"budget must be positive, got {self.budget_ns}")
        if self.ack_every < 1:
            raise ValueError(f"ack_every must be >= 1, got {self.ack_every}")

    @property
    def steps(self) -> int:
        return steps_for(self.kind, self.n_ranks)

    def wire_stride(self, plan_stride: int) -> int:
        # The reliable baseline streams contiguously; interleaved placement
        # is an out-of-order-transport capability.
        return plan_stride if self.transport == "xp" else 1


def chunk_plan(cfg: CollectiveConfig) -> list[ChunkPlan]:
    """Per-chunk element ranges and wire sizes, identical on every rank."""
    n, total = cfg.n_ranks, cfg.tensor_elems
    p = cfg.block_elems
    plans = []
    for c in range(n):
        start = c * total // n
        elems = (c + 1) * total // n - start
        if cfg.encode == EncodeMode.RAW:
            plans.append(ChunkPlan(start, elems, elems, 1, elems * ELEM_SIZE))
            continue
        raw_blocks = -(-elems // p)
        s = 1 if cfg.encode == EncodeMode.HD_BLK else effective_stride(cfg.stride, raw_blocks)
        blocks = -(-raw_blocks // s) * s
        plans.append(ChunkPlan(start, elems, blocks * p, s, blocks * p * ELEM_SIZE))
    return plans


@dataclass
class CollectiveStats:
    start_ns: SimTime
    cct_ns: SimTime
    finish_ns: list[SimTime]
    steps: int
    budget_ns: SimTime | None
    slices: list[SimTime]
    bytes_expected: int
    bytes_missing: int
    recv_statuses: dict[str, int]
    send_statuses: dict[str, int]
    data_packets_dropped: int
    data_bytes_dropped: int
    late_bytes_dropped: int
    packets_delivered: int


@dataclass
class CollectiveResult:
    outputs: list[np.ndarray] | None  # per-rank result, None for virtual runs
    stats: CollectiveStats


class _Rank:
    """One ring participant: chunk state plus its two directed-edge QPs."""

    def __init__(self, engine: "RingEngine", rank: int) -> None:
        self.engine = engine
        self.rank = rank
        self.recv_step = 0
        self.sends_outstanding = 0
        self.last_recv_at: SimTime = 0
        self.last_send_at: SimTime = 0
        self.finished_at: SimTime | None = None
        self.recv_statuses: Counter = Counter()
        self.send_statuses: Counter = Counter()
        self.bytes_missing = 0
        self.chunks: list[np.ndarray | None] | None = None
        self.tx = None  # endpoint toward (rank+1) % n
        self.rx = None  # endpoint from (rank-1) % n
        max_bytes = max(p.nbytes for p in engine.plans)
        alloc = Buffer.virtual if engine.cfg.virtual else Buffer.allocate
        self.staging = [alloc(max_bytes), alloc(max_bytes)]

    def load_input(self, tensor: np.ndarray | None) -> None:
        cfg = self.engine.cfg
        if cfg.virtual:
            return
        if tensor is None:
            raise ValueError("non-virtual runs need an input tensor per rank")
        flat = np.asarray(tensor, dtype=np.float32).reshape(-1)
        if flat.size != cfg.tensor_elems:
            raise ValueError(f"rank {self.rank} input has {flat.size} elements, "
                             f"expected {cfg.tensor_elems}")
        self.chunks = [None] * cfg.n_ranks
        own_only = cfg.kind == CollectiveKind.ALLGATHER
        for c, plan in enumerate(self.engine.plans):
            if own_only and c != self.rank:
                self.chunks[c] = np.zeros(plan.enc_elems, dtype=np.float32)
                continue
            piece = flat[plan.start:plan.start + plan.elems]
            if cfg.encode == EncodeMode.RAW:
                self.chunks[c] = piece.copy()
            else:
                self.chunks[c] = encode(piece, cfg.block_elems, plan.stride).values

    def staged_view(self, step: int, plan: ChunkPlan) -> np.ndarray:
        buf = self.staging[step % 2]
        return np.frombuffer(buf.data, dtype="<f4", count=plan.enc_elems)


class RingEngine:
    """Drives one collective invocation over an existing fabric."""

    def __init__(self, cfg: CollectiveConfig, net: Network,
                 inputs: list[np.ndarray] | None = None,
                 start: SimTime = 0) -> None:
        self.cfg = cfg
        self.net = net
        self.start_at = start
        self.plans = chunk_plan(cfg)
        self.steps = cfg.steps
        if cfg.budget_ns is None:
            self.slices = [WARMUP_STEP_TIMEOUT] * self.steps
        else:
            self.slices = split_budget(
                cfg.budget_ns, [Phase(PhaseKind.SEQUENTIAL, 1.0)] * self.steps)
        self.muxes = {r: QpMux() for r in range(cfg.n_ranks)}
        for r, mux in self.muxes.items():
            net.add_node(r, mux)
        self.ranks = [_Rank(self, r) for r in range(cfg.n_ranks)]
        self._build_qps()
        for r, state in enumerate(self.ranks):
            state.load_input(None if inputs is None else inputs[r])
        self.data_qp_ids = {DATA_QP_BASE + r for r in range(cfg.n_ranks)}
        self._started = False

    def _build_qps(self) -> None:
        cfg, net = self.cfg, self.net
        n = cfg.n_ranks
        for r in range(n):
            nxt = (r + 1) % n
            qp_id = DATA_QP_BASE + r  # edge r -> r+1
            if cfg.transport == "xp":
                link = net.link_for(r, nxt)
                tx = XpQp(net, r, nxt, qp_id,
                          controller=make_controller(cfg.controller, link.bandwidth_bps),
                          mtu_payload=cfg.mtu_payload,
                          completion_mode=cfg.completion_mode,
                          dedup_mode=cfg.dedup_mode)
                rx = XpQp(net, nxt, r, qp_id,
                          mtu_payload=cfg.mtu_payload,
                          completion_mode=cfg.completion_mode,
                          dedup_mode=cfg.dedup_mode)
            else:
                tx = GbnQp(net, r, nxt, qp_id, window=cfg.window,
                           rto_ns=cfg.rto_ns, mtu_payload=cfg.mtu_payload,
                           ack_every=cfg.ack_every)
                rx = GbnQp(net, nxt, r, qp_id, window=cfg.window,
                           rto_ns=cfg.rto_ns, mtu_payload=cfg.mtu_payload,
                           ack_every=cfg.ack_every)
            self.ranks[r].tx = tx
            self.ranks[nxt].rx = rx
            self.muxes[r].register(tx)
            self.muxes[nxt].register(rx)
            tx.on_send_completion = self._send_cb(r)
            rx.on_recv_completion = self._recv_cb(nxt)

    def _send_cb(self, rank: int) -> Callable[[Completion], None]:
        return lambda c: self._on_send_cqe(rank, c)

    def _recv_cb(self, rank: int) -> Callable[[Completion], None]:
        return lambda c: self._on_recv_cqe(rank, c)

    # -- driving --------------------------------------------------------------

    def start(self) -> None:
        if self._started:
            raise RuntimeError("engine already started")
        self._started = True
        at = self.start_at
        for state in self.ranks:
            self._post_step_recv(state, 0, at)
        for state in self.ranks:
            self._post_step_send(state, 0, at)

    def _post_step_recv(self, state: _Rank, step: int, now: SimTime) -> None:
        plan = self.plans[recv_chunk_index(self.cfg.kind, self.cfg.n_ranks,
                                           state.rank, step)]
        buf = state.staging[step % 2]
        buf.zero()
        wr = WorkRequest(verb=Verb.RECV, length=plan.nbytes, buffer=buf,
                         timeout=self.slices[step])
        state.rx.post_recv(wr, now)

    def _post_step_send(self, state: _Rank, step: int, now: SimTime) -> None:
        cfg = self.cfg
        c = send_chunk_index(cfg.kind, cfg.n_ranks, state.rank, step)
        plan = self.plans[c]
        wr = WorkRequest(verb=Verb.SEND, length=plan.nbytes,
                         timeout=self.slices[step],
                         stride=cfg.wire_stride(plan.stride))
        source = None
        if not cfg.virtual:
            source = state.chunks[c].tobytes()
        state.sends_outstanding += 1
        state.tx.post_send(wr, now, source=source)

    def _on_recv_cqe(self, rank: int, c: Completion) -> None:
        state = self.ranks[rank]
        cfg = self.cfg
        step = state.recv_step
        assert c.wqe_seq == step, f"rank {rank} expected step {step}, got CQE {c.wqe_seq}"
        idx = recv_chunk_index(cfg.kind, cfg.n_ranks, rank, step)
        plan = self.plans[idx]
        state.recv_statuses[c.status.name] += 1
        state.bytes_missing += max(0, plan.nbytes - c.received_bytes)
        state.last_recv_at = c.completed_at
        if not cfg.virtual:
            staged = state.staged_view(step, plan)
            if is_reduce_step(cfg.kind, cfg.n_ranks, step):
                state.chunks[idx] = state.chunks[idx] + staged
            else:
                state.chunks[idx] = staged.copy()
        state.recv_step += 1
        now = c.completed_at
        if state.recv_step < self.steps:
            self._post_step_recv(state, state.recv_step, now)
        if step + 1 < self.steps:
            self._post_step_send(state, step + 1, now)
        self._check_finished(state)

    def _on_send_cqe(self, rank: int, c: Completion) -> None:
        state = self.ranks[rank]
        state.send_statuses[c.status.name] += 1
        state.sends_outstanding -= 1
        state.last_send_at = c.completed_at
        self._check_finished(state)

    def _check_finished(self, state: _Rank) -> None:
        if state.finished_at is None and state.recv_step == self.steps \
                and state.sends_outstanding == 0:
            state.finished_at = max(state.last_recv_at, state.last_send_at)

    @property
    def done(self) -> bool:
        return all(s.finished_at is not None for s in self.ranks)

    def horizon(self) -> SimTime:
        if self.cfg.budget_ns is None:
            return self.start_at + WARMUP_STEP_TIMEOUT * (self.steps + 1)
        # Budgeted ranks finish by start + sum(slices) + dispatch overhead;
        # the reliable baseline has no deadline, so leave generous room.
        return self.start_at + 1000 * (self.cfg.budget_ns + sec(1))

    # -- results ----------------------------------------------------------------

    def outputs(self) -> list[np.ndarray] | None:
        cfg = self.cfg
        if cfg.virtual:
            return None
        outs = []
        for state in self.ranks:
            if cfg.kind == CollectiveKind.REDUCESCATTER:
                own = (state.rank + 1) % cfg.n_ranks
                outs.append(self._decode_chunk(state, own))
            else:
                outs.append(np.concatenate(
                    [self._decode_chunk(state, c) for c in range(cfg.n_ranks)]))
        return outs

    def _decode_chunk(self, state: _Rank, c: int) -> np.ndarray:
        plan = self.plans[c]
        vals = state.chunks[c]
        if self.cfg.encode == EncodeMode.RAW:
            return vals[:plan.elems]
        enc = EncodedTensor(values=vals, block_size=self.cfg.block_elems,
                            num_blocks=plan.enc_elems // self.cfg.block_elems,
                            stride=plan.stride, original_len=plan.elems)
        return decode(enc)

    def stats_snapshot(self) -> CollectiveStats:
        finishes = [s.finished_at if s.finished_at is not None else -1
                    for s in self.ranks]
        recv_statuses: Counter = Counter()
        send_statuses: Counter = Counter()
        missing = 0
        late_bytes = 0
        for s in self.ranks:
            recv_statuses.update(s.recv_statuses)
            send_statuses.update(s.send_statuses)
            missing += s.bytes_missing
            if self.cfg.transport == "xp":
                late_bytes += s.rx.stats.late_dropped_bytes
        drops = [d for d in self.net.drop_log
                 if d.kind == int(PacketKind.DATA) and d.qp_id in self.data_qp_ids]
        # At each step the chunks in flight across the n edges are a
        # permutation of all n chunks, so each step moves sum(nbytes) total.
        expected = self.steps * sum(p.nbytes for p in self.plans)
        return CollectiveStats(
            start_ns=self.start_at,
            cct_ns=max(finishes) - self.start_at if self.done else -1,
            finish_ns=finishes,
            steps=self.steps,
            budget_ns=self.cfg.budget_ns,
            slices=list(self.slices),
            bytes_expected=expected,
            bytes_missing=missing,
            recv_statuses=dict(recv_statuses),
            send_statuses=dict(send_statuses),
            data_packets_dropped=len(drops),
            data_bytes_dropped=sum(d.payload_len for d in drops),
            late_bytes_dropped=late_bytes,
            packets_delivered=self.net.stats.delivered,
        )


def make_inputs(cfg: CollectiveConfig, seed: int) -> list[np.ndarray] | None:
    """Standard-normal fp32 input tensors, one per rank, or None for
    timing-only runs."""
    if cfg.virtual:
        return None
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(cfg.tensor_elems).astype(np.float32)
            for _ in range(cfg.n_ranks)]


def expected_output(cfg: CollectiveConfig, inputs: list[np.ndarray]) -> list[np.ndarray]:
    """Reference per-rank results: reductions in float64, gathers exact."""
    n = cfg.n_ranks
    plans = chunk_plan(cfg)
    if cfg.kind == CollectiveKind.ALLGATHER:
        gathered = np.concatenate(
            [np.asarray(inputs[c][p.start:p.start + p.elems], dtype=np.float32)
             for c, p in enumerate(plans)])
        return [gathered.copy() for _ in range(n)]
    total = np.sum([t.astype(np.float64) for t in inputs], axis=0)
    if cfg.kind == CollectiveKind.ALLREDUCE:
        return [total.copy() for _ in range(n)]
    outs = []
    for r in range(n):
        p = plans[(r + 1) % n]
        outs.append(total[p.start:p.start + p.elems].copy())
    return outs


def run_collective(cfg: CollectiveConfig, link: LinkModel | None = None,
                   seed: int = 0, inputs: list[np.ndarray] | None = None, *,
                   ecn_threshold_ns: SimTime | None = None,
                   reorder_swap_prob: float = 0.0,
                   start: SimTime = 0) -> CollectiveResult:
    """Build a fresh fabric, run one invocation, and collect results."""
    net = Network(seed=seed, default_link=link or LinkModel(),
                  ecn_threshold_ns=ecn_threshold_ns,
                  reorder_swap_prob=reorder_swap_prob)
    if inputs is None:
        inputs = make_inputs(cfg, seed)
    engine = RingEngine(cfg, net, inputs, start=start)
    engine.start()
    net.run_until(engine.horizon())
    if not engine.done:
        raise RuntimeError(
            f"collective did not finish by {engine.horizon()} ns; "
            f"{net.pending()} events pending")
    return CollectiveResult(engine.outputs(), engine.stats_snapshot())


def measure_lossless_cct(cfg: CollectiveConfig, link: LinkModel | None = None, *,
                         warmup_seed: int = 7) -> SimTime:
    """Duration of one invocation on a pristine copy of the fabric.

    This is the bootstrap-phase measurement that seeds the adaptive
    timeout; jitter is retained (seeded) but loss is stripped.
    """
    link = link or LinkModel()
    clean = replace(link, loss_rate=0.0, burst=None)
    probe = replace(cfg, budget_ns=None, virtual=True)
    res = run_collective(probe, clean, seed=warmup_seed)
    return res.stats.cct_ns


def warmup_budget(cfg: CollectiveConfig, link: LinkModel | None = None, *,
                  warmup_seed: int = 7) -> SimTime:
    """Invocation budget seeded from the warmup run's duration."""
    return initial(measure_lossless_cct(cfg, link, warmup_seed=warmup_seed))


# -- control-plane proposal exchange -----------------------------------------

MSG_PROPOSAL = 1
MSG_BUDGET = 2
_CTRL_MSG = struct.Struct("<BIQ")  # type, rank, value


def proposal_round(net: Network, estimator: GroupEstimator,
                   proposals: dict[int, SimTime], *,
                   start: SimTime = 0,
                   qp_base: int = CONTROL_QP_BASE) -> dict[int, SimTime]:
    """One asynchronous timeout-agreement round over the reliable control
    mesh.

    Every rank ships its proposal to rank 0; once all arrive, rank 0 folds
    the median into the canonical timeout and broadcasts it.  The broadcast
    doubles as the phase marker releasing the next invocation.  Expects a
    fresh fabric with no nodes registered.  Returns the budget each rank
    ends up holding.
    """
    n = estimator.n_ranks
    muxes = {r: QpMux() for r in range(n)}
    for r, mux in muxes.items():
        net.add_node(r, mux)
    channels: dict[int, ControlChannel] = {}
    for r in range(1, n):
        ch = ControlChannel(net, 0, r, qp_base + 2 * r, qp_base + 2 * r + 1)
        for node, _, endpoint in ch.endpoints():
            muxes[node].register(endpoint)
        channels[r] = ch

    received: dict[int, SimTime] = {}
    pending = {r for r in range(1, n)}

    def broadcast(now: SimTime) -> None:
        folded = estimator.fold()
        received[0] = folded
        for r, ch in channels.items():
            ch.send(0, _CTRL_MSG.pack(MSG_BUDGET, 0, folded), now)

    def rank0_handler(payload: bytes, now: SimTime) -> None:
        mtype, rank, value = _CTRL_MSG.unpack(payload)
        assert mtype == MSG_PROPOSAL, f"rank 0 got unexpected message type {mtype}"
        estimator.submit(rank, value)
        pending.discard(rank)
        if not pending:
            broadcast(now)

    def member_handler(rank: int):
        def handle(payload: bytes, now: SimTime) -> None:
            mtype, _, value = _CTRL_MSG.unpack(payload)
            assert mtype == MSG_BUDGET, f"rank {rank} got unexpected message type {mtype}"
            received[rank] = value
        return handle

    for r, ch in channels.items():
        ch.set_handler(0, rank0_handler)
        ch.set_handler(r, member_handler(r))

    estimator.submit(0, proposals[0])
    if n == 1:
        broadcast(start)
    for r, ch in channels.items():
        ch.send(r, _CTRL_MSG.pack(MSG_PROPOSAL, r, proposals[r]), start)
    net.run_until(start + sec(10))
    if len(received) != n:
        raise RuntimeError(f"proposal round incomplete: {sorted(received)} of {n} ranks")
    return received
