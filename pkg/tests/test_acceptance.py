"""End-to-end acceptance suite.

Each check prints one numbered PASS/FAIL verdict line (run with -s to see
the whole table in one place) before asserting, so a red run still shows
every verdict it reached.  Wall-clock budgets are part of the checked
conditions where a check has one.

The two distribution-level MSE ordering checks (7 and 8) assert strict
mean orderings that are not structural properties for isotropic inputs;
see their docstrings.  They are implemented exactly as stated and print
the measured means so a failure documents the actual gap.
"""
from __future__ import annotations

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

import xpsim
from conftest import QUIET_LINK, make_net, xp_pair
from xpsim import harness, state_model
from xpsim.cli import main as cli_main
from xpsim.collectives import (CollectiveConfig, CollectiveKind, make_inputs,
                               run_collective)
from xpsim.core import (Buffer, CompletionStatus, Packet, PacketKind, Verb,
                        WorkRequest, sec, usec)
from xpsim.fabric import LinkModel
from xpsim.recovery import (EncodedTensor, decode, encode, encode_whole, fwht,
                            mse, place_with_loss, stride_layout, zero_spans)
from xpsim.timeout_estimator import (GroupEstimator, TimeoutModel, aggregate,
                                     initial)

MTU = 4096


def verdict(num: int, name: str, ok: bool, detail: str = "") -> bool:
    mark = "PASS" if ok else "FAIL"
    tail = f"  [{detail}]" if detail else ""
    print(f"[{num:2d}] {name:<46} {mark}{tail}", flush=True)
    return ok


# -- 1: lossless differential correctness --------------------------------------

def test_c01_lossless_transport_parity():
    """At zero loss the bounded transport and the reliable baseline must
    produce byte-identical collective results with all-COMPLETE statuses."""
    t0 = time.monotonic()
    runs = 0
    mismatches = []
    for kind in (CollectiveKind.ALLREDUCE, CollectiveKind.ALLGATHER,
                 CollectiveKind.REDUCESCATTER):
        for n in (2, 4, 8):
            base = CollectiveConfig(kind=kind, n_ranks=n, tensor_elems=8192)
            for seed in range(50):
                inputs = make_inputs(base, seed)
                outs = {}
                for transport in ("xp", "gbn"):
                    res = run_collective(replace(base, transport=transport),
                                         QUIET_LINK, seed=seed, inputs=inputs)
                    stats = res.stats
                    if (set(stats.recv_statuses) != {"COMPLETE"}
                            or set(stats.send_statuses) != {"COMPLETE"}):
                        mismatches.append((kind.value, n, seed, transport,
                                           dict(stats.recv_statuses)))
                    outs[transport] = res.outputs
                    runs += 1
                same = all(np.array_equal(a, b)
                           for a, b in zip(outs["xp"], outs["gbn"]))
                if not same:
                    mismatches.append((kind.value, n, seed, "outputs differ"))
    dt = time.monotonic() - t0
    ok = not mismatches and dt < 30.0
    assert verdict(1, "lossless xp/gbn parity (AR/AG/RS, N=2/4/8)", ok,
                   f"{runs} runs, {dt:.1f}s, {len(mismatches)} mismatches"), \
        mismatches[:5]


# -- 2: bounded progress under total loss ---------------------------------------

def test_c02_bounded_partial_completion_under_total_loss():
    """With every data packet of a message destroyed, the receiver must
    still emit a partial completion at its deadline, for any combination
    of timeout, loss rate, and reordering."""
    rng = np.random.default_rng(20260814)
    violations = []
    t0 = time.monotonic()
    for i in range(1000):
        timeout = int(rng.integers(10_000, 1_000_001))  # 10 us .. 1 ms
        loss = float(rng.uniform(0.0, 0.5))
        reorder = float(rng.uniform(0.0, 0.3))
        jitter = int(rng.integers(0, 50_001))
        nbytes = int(rng.integers(1, 3 * MTU + 1))
        link = LinkModel(bandwidth_bps=25e9, base_delay_ns=1_000,
                         jitter_ns=jitter, loss_rate=loss)
        net = make_net(seed=i, link=link, reorder_swap_prob=reorder)
        net.drop_filter = lambda pkt, tx: pkt.kind == PacketKind.DATA
        tx, rx = xp_pair(net)
        t_post = net.now
        rx.post_recv(WorkRequest(verb=Verb.RECV, length=nbytes,
                                 buffer=Buffer.allocate(nbytes),
                                 timeout=timeout))
        tx.post_send(WorkRequest(verb=Verb.SEND, length=nbytes, timeout=sec(1)),
                     source=bytes(nbytes))
        net.run_until(t_post + timeout + usec(200))
        cqes = rx.poll_recv_cq()
        good = (len(cqes) == 1
                and cqes[0].status == CompletionStatus.PARTIAL_TIMEOUT
                and cqes[0].received_bytes == 0
                and cqes[0].completed_at == t_post + timeout
                and rx.expected_wqe_seq == 1)
        if not good:
            violations.append((i, timeout, loss, reorder,
                               [(c.status.name, c.received_bytes, c.completed_at)
                                for c in cqes]))
    dt = time.monotonic() - t0
    ok = not violations
    assert verdict(2, "bounded partial completion, 1000 lossy configs", ok,
                   f"{len(violations)} violations, {dt:.1f}s"), violations[:5]


# -- 3: receiver state-machine safety fuzz --------------------------------------

def test_c03_state_machine_safety_fuzz():
    """1e5 adversarial packet injections (duplicates, stale and far-future
    sequence numbers, out-of-range offsets, junk control traffic) must
    never grow a registered buffer, never complete a WQE twice, and never
    move expected_wqe_seq backwards."""
    REGION = 64 * 1024
    TOTAL = 100_000
    rng = np.random.default_rng(0xC3C3)
    violations = []
    injected = 0
    t0 = time.monotonic()
    while injected < TOTAL and not violations:
        net = make_net(seed=int(rng.integers(1 << 31)))
        region = Buffer.allocate(REGION)
        _, rx = xp_pair(net, rx_kw={"recv_region": region})
        buffers = [region]
        counts: dict[int, int] = {}
        prev_expected = rx.expected_wqe_seq
        last_pkt = None
        for _ in range(500):
            if injected >= TOTAL or violations:
                break
            roll = rng.random()
            try:
                if roll < 0.08:
                    length = int(rng.integers(1, 3 * MTU))
                    buf = Buffer.allocate(length)
                    buffers.append(buf)
                    rx.post_recv(WorkRequest(
                        verb=Verb.RECV, length=length, buffer=buf,
                        timeout=int(rng.integers(1_000, 500_000))))
                elif roll < 0.12:
                    net.run_until(net.now + int(rng.integers(1, 300_000)))
                elif roll < 0.17 and last_pkt is not None:
                    rx.on_packet(last_pkt, net.now)
                    injected += 1
                else:
                    exp = rx.expected_wqe_seq
                    if rng.random() < 0.02:
                        seq = int(rng.integers(0, exp + 40))
                    else:
                        seq = max(0, exp + int(rng.integers(-2, 4)))
                    kind_roll = rng.random()
                    if kind_roll < 0.04:
                        nb = int(rng.integers(0, 24))
                        pkt = Packet(src_node=0, dst_node=1, qp_id=1,
                                     wqe_seq=seq, payload_len=nb,
                                     payload=bytes(nb),
                                     kind=PacketKind.CONTROL)
                    elif kind_roll < 0.07:
                        pkt = Packet(src_node=0, dst_node=1, qp_id=1,
                                     wqe_seq=seq,
                                     placement_offset=int(rng.integers(0, REGION)),
                                     stride_index=int(rng.integers(0, 4)),
                                     kind=PacketKind.ACK)
                    else:
                        nb = int(rng.integers(0, MTU + 1))
                        offset = int(rng.integers(-2 * MTU, REGION + 2 * MTU))
                        pkt = Packet(src_node=0, dst_node=1, qp_id=1,
                                     wqe_seq=seq, placement_offset=offset,
                                     payload_len=nb, payload=bytes(nb),
                                     is_last=bool(rng.random() < 0.3))
                    rx.on_packet(pkt, net.now)
                    last_pkt = pkt
                    injected += 1
            except Exception as exc:  # noqa: BLE001  safety means no escapes
                violations.append((injected, "exception", repr(exc)))
                break
            if rx.expected_wqe_seq < prev_expected:
                violations.append((injected, "expected_wqe_seq went backwards",
                                   (prev_expected, rx.expected_wqe_seq)))
            prev_expected = rx.expected_wqe_seq
            for c in rx.poll_recv_cq():
                counts[c.wqe_seq] = counts.get(c.wqe_seq, 0) + 1
                if counts[c.wqe_seq] > 1:
                    violations.append((injected, "double completion", c.wqe_seq))
            for buf in buffers:
                if buf.data is not None and len(buf.data) != buf.length:
                    violations.append((injected, "buffer resized",
                                       (buf.length, len(buf.data))))
    dt = time.monotonic() - t0
    ok = not violations
    assert verdict(3, "state-machine safety fuzz, 1e5 injections", ok,
                   f"{injected} injections, {dt:.1f}s"), violations[:5]


# -- 4: tail latency separation --------------------------------------------------

def _p99(vals: list[int]) -> float:
    s = sorted(vals)
    return float(s[max(1, math.ceil(0.99 * len(s))) - 1])


def test_c04_tail_latency_separation():
    """Ring allreduce, 8 ranks, 4 MB tensors, 0.1% loss, 1000 seeds: the
    reliable baseline's p99 completion time must be at least 2x the
    bounded transport's, and the mean per-seed ratio at least 1.5x."""
    t0 = time.monotonic()
    cfg = harness.load_config(
        Path(xpsim.__file__).parent / "configs" / "tail_separation.json")
    rows = harness.run_experiment(cfg, jobs=1)
    cct: dict[str, dict[int, int]] = {"xp": {}, "gbn": {}}
    for row in rows:
        cct[row["transport"]][int(row["seed"])] = int(row["cct_ns"])
    seeds = sorted(cct["xp"])
    assert seeds == sorted(cct["gbn"]) and len(seeds) == 1000
    ratios = [cct["gbn"][s] / cct["xp"][s] for s in seeds]
    p99_ratio = _p99(list(cct["gbn"].values())) / _p99(list(cct["xp"].values()))
    mean_ratio = float(np.mean(ratios))
    dt = time.monotonic() - t0
    ok = p99_ratio >= 2.0 and mean_ratio >= 1.5 and dt < 180.0
    assert verdict(4, "tail separation, N=8 4MB 0.1% loss x1000", ok,
                   f"p99 ratio {p99_ratio:.2f}x, mean ratio {mean_ratio:.2f}x, "
                   f"{dt:.0f}s")


# -- 5: transform involution and energy preservation ----------------------------

def test_c05_transform_involution_and_energy():
    rng = np.random.default_rng(55)
    worst_inv = 0.0
    worst_energy = 0.0
    for p in (4, 64, 1024):
        x = rng.standard_normal((1000, p)).astype(np.float32)
        y = fwht(x)
        back = fwht(y)
        worst_inv = max(worst_inv, float(
            np.max(np.abs(back.astype(np.float64) - x.astype(np.float64)))))
        ex = np.sum(x.astype(np.float64) ** 2, axis=1)
        ey = np.sum(y.astype(np.float64) ** 2, axis=1)
        worst_energy = max(worst_energy, float(
            np.max(np.abs(ey - ex) / np.maximum(ex, 1e-30))))
    ok = worst_inv < 1e-5 and worst_energy < 1e-4
    assert verdict(5, "transform involution + energy, 1000 x p=4/64/1024", ok,
                   f"max |x-T(T(x))|={worst_inv:.2e}, "
                   f"max energy drift={worst_energy:.2e}")


# -- 6: reduction in the coefficient domain --------------------------------------

def test_c06_sum_in_coefficient_space():
    """Summing encoded tensors elementwise and decoding once must match the
    sum of the plaintext tensors (linearity of the transform)."""
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        xs = [rng.standard_normal(6000).astype(np.float32) for _ in range(8)]
        encs = [encode(x, 1024, 1) for x in xs]
        acc = encs[0].values.copy()
        for e in encs[1:]:
            acc = acc + e.values  # fp32, as an in-network reducer would
        summed = EncodedTensor(values=acc, block_size=1024,
                               num_blocks=encs[0].num_blocks, stride=1,
                               original_len=6000)
        got = decode(summed).astype(np.float64)
        ref = np.sum([x.astype(np.float64) for x in xs], axis=0)
        rel = np.abs(got - ref) / np.maximum(np.abs(ref), 1.0)
        worst = max(worst, float(rel.max()))
    ok = worst < 1e-3
    assert verdict(6, "encoded-domain reduction, 8 summands x 100", ok,
                   f"worst relative error {worst:.2e}")


# -- 7 + 8: dispersed-loss MSE behavior ------------------------------------------

P = 1024
N_ELEMS = 1 << 20  # 1024 blocks of 1024
RATES = (0.001, 0.01, 0.05)


def _lost_packets(rng: np.random.Generator, rate: float) -> np.ndarray:
    lost = np.flatnonzero(rng.random(P) < rate)
    if lost.size == 0:  # guarantee the seed observes at least one loss
        lost = np.array([int(rng.integers(P))])
    return lost


def _layout_indices(stride: int) -> np.ndarray:
    dummy = EncodedTensor(values=np.zeros(N_ELEMS, np.float32), block_size=P,
                          num_blocks=P, stride=stride, original_len=N_ELEMS)
    return np.stack(stride_layout(dummy))  # (packets, elems per packet)


def test_c07_loss_dispersion_mse_ordering():
    """MSE comparison across placement layouts at three drop rates.

    The transform is orthonormal, so the energy a lost packet removes
    equals the energy of the coefficients it carried; for iid Gaussian
    inputs those energies are identically distributed chi-square sums no
    matter how coefficients are spread over packets.  Interleaving
    equalizes per-block damage but cannot reduce expected total damage,
    so the strict mean ordering asserted here (interleaved < raw at every
    rate) is decided by seed noise, not structure.  The whole-message
    reference ratio and the blockwise >= raw comparison are structural
    and expected to hold.  Measured means are printed either way.
    """
    t0 = time.monotonic()
    layout_sp = _layout_indices(P)
    vals: dict[tuple[str, float], list[float]] = {
        (v, r): [] for v in ("raw", "blk", "str", "msg") for r in RATES}
    losses_kept: dict[tuple[int, float], np.ndarray] = {}
    for c0 in range(0, 100, 10):
        xs, losses = [], []
        for seed in range(c0, c0 + 10):
            rng = np.random.default_rng(seed)
            xs.append(rng.standard_normal(N_ELEMS).astype(np.float32))
            per_rate = [_lost_packets(rng, r) for r in RATES]
            losses.append(per_rate)
            for r, lost in zip(RATES, per_rate):
                losses_kept[(seed, r)] = lost
        X = np.stack(xs)                    # (10, n) fp32
        B = X.shape[0]
        X64 = X.astype(np.float64)
        C = fwht(X.reshape(B * P, P))       # blockwise coefficients
        R = fwht(C).astype(np.float64)      # lossless roundtrip
        e_elem = (X64.reshape(B, P, P) ** 2).sum(axis=2)
        r2 = ((X64.reshape(B * P, P) - R) ** 2).reshape(B, P, P).sum(axis=2)
        Cm = fwht(X)                        # whole-message coefficients
        for ri, rate in enumerate(RATES):
            Cs = C.reshape(B, P * P).copy()
            Cz = Cm.copy()
            for s in range(B):
                lost = losses[s][ri]
                vals[("raw", rate)].append(e_elem[s, lost].sum() / N_ELEMS)
                vals[("blk", rate)].append(
                    (e_elem[s, lost].sum() + r2[s].sum() - r2[s, lost].sum())
                    / N_ELEMS)
                Cs[s, layout_sp[lost].ravel()] = 0.0
                for j in lost:
                    Cz[s, j * P:(j + 1) * P] = 0.0
            Ds = fwht(Cs.reshape(B * P, P)).astype(np.float64).reshape(B, -1)
            err = X64 - Ds
            vals[("str", rate)].extend(np.mean(err * err, axis=1).tolist())
            Dm = fwht(Cz).astype(np.float64)
            err = X64 - Dm
            vals[("msg", rate)].extend(np.mean(err * err, axis=1).tolist())

    # spot-check the batched pipeline against the scalar reassembly path
    spot_seed, spot_rate = 3, 0.01
    rng = np.random.default_rng(spot_seed)
    x = rng.standard_normal(N_ELEMS).astype(np.float32)
    lost = set(losses_kept[(spot_seed, spot_rate)].tolist())
    refs = {
        "raw": mse(x, zero_spans(x, P, lost)),
        "blk": mse(x, decode(place_with_loss(encode(x, P, 1), lost))),
        "str": mse(x, decode(place_with_loss(encode(x, P, P), lost))),
    }
    whole = encode_whole(x)
    refs["msg"] = mse(x, decode(EncodedTensor(
        values=zero_spans(whole.values, P, lost), block_size=whole.block_size,
        num_blocks=1, stride=1, original_len=whole.original_len)))
    for variant, ref in refs.items():
        got = vals[(variant, spot_rate)][spot_seed]
        assert abs(got - ref) <= 1e-9 * ref, (variant, got, ref)

    means = {k: float(np.mean(v)) for k, v in vals.items()}
    str_lt_raw = all(means[("str", r)] < means[("raw", r)] for r in RATES)
    blk_ge_raw = all(means[("blk", r)] >= means[("raw", r)] for r in RATES)
    ratio_ok = all(
        0.5 <= means[("str", r)] / means[("msg", r)] <= 2.0 for r in RATES)
    dt = time.monotonic() - t0
    detail = "; ".join(
        f"{r:g}: raw={means[('raw', r)]:.6e} str={means[('str', r)]:.6e} "
        f"str/msg={means[('str', r)] / means[('msg', r)]:.3f}" for r in RATES)
    ok = str_lt_raw and blk_ge_raw and ratio_ok and dt < 120.0
    assert verdict(7, "loss-dispersion MSE ordering, 100 x 2^20", ok,
                   detail + f"; str<raw={str_lt_raw} blk>=raw={blk_ge_raw} "
                   f"ratio={ratio_ok} {dt:.0f}s")


def test_c08_stride_monotonicity():
    """Mean MSE across interleave strides at a fixed 1% drop rate.

    Same caveat as the dispersion ordering above: per-realization lost
    energy is an identically distributed chi-square sum at every stride
    for iid Gaussian inputs, so the asserted monotone chain (and the
    strict S=1 -> S=p decrease) rides on sampling noise of order 0.1%
    between statistically identical means.
    """
    t0 = time.monotonic()
    strides = (1, 4, 16, 64, P)
    layouts = {s: _layout_indices(s) for s in strides}
    vals: dict[int, list[float]] = {s: [] for s in strides}
    for c0 in range(0, 100, 10):
        xs, losses = [], []
        for seed in range(c0, c0 + 10):
            rng = np.random.default_rng(seed)
            xs.append(rng.standard_normal(N_ELEMS).astype(np.float32))
            losses.append(_lost_packets(rng, 0.01))
        X = np.stack(xs)
        B = X.shape[0]
        X64 = X.astype(np.float64)
        C = fwht(X.reshape(B * P, P)).reshape(B, P * P)
        for s in strides:
            Cz = C.copy()
            for i in range(B):
                Cz[i, layouts[s][losses[i]].ravel()] = 0.0
            D = fwht(Cz.reshape(B * P, P)).astype(np.float64).reshape(B, -1)
            err = X64 - D
            vals[s].extend(np.mean(err * err, axis=1).tolist())
    means = {s: float(np.mean(vals[s])) for s in strides}
    chain = all(means[b] <= means[a]
                for a, b in zip(strides, strides[1:]))
    strict = means[P] < means[1]
    dt = time.monotonic() - t0
    ok = chain and strict
    assert verdict(8, "stride monotonicity at 1% drop", ok,
                   " ".join(f"S={s}:{means[s]:.6e}" for s in strides)
                   + f" chain={chain} strict={strict} {dt:.0f}s")


# -- 9: adaptive timeout estimator ------------------------------------------------

def test_c09_adaptive_timeout_estimator():
    golden_agg = aggregate([usec(100), usec(200), usec(900)],
                           usec(100), 0.2) == usec(120)
    golden_init = initial(usec(1000)) == usec(1300)

    # stationary per-byte cost: the folded timeout must approach the true
    # transfer time even from a 10x-off warmup seed
    cost = 2.0  # ns per byte
    size = 1 << 20
    true_t = cost * size
    model = TimeoutModel(alpha=0.2)
    model.seed_warmup(round(10 * true_t))
    iters_needed = None
    for k in range(1, 51):
        model.record(round(cost * size), size)
        model.fold([model.proposal(size)])
        if abs(model.t_current - true_t) / true_t < 0.05:
            iters_needed = k
            break
    converged = iters_needed is not None

    # 3 of 7 peers propose 100x outliers; the median keeps the fold near
    # the honest-only value
    honest = [usec(98), usec(100), usec(101), usec(103)]
    outliers = [usec(9900), usec(10100), usec(10400)]
    g_all = GroupEstimator(7, alpha=0.2)
    g_all.seed_warmup(usec(120))
    for rank, p in enumerate(honest + outliers):
        g_all.submit(rank, p)
    t_all = g_all.fold()
    g_honest = GroupEstimator(4, alpha=0.2)
    g_honest.seed_warmup(usec(120))
    for rank, p in enumerate(honest):
        g_honest.submit(rank, p)
    t_honest = g_honest.fold()
    deviation = abs(t_all - t_honest) / t_honest
    robust = deviation < 0.10

    ok = golden_agg and golden_init and converged and robust
    assert verdict(9, "adaptive timeout estimator", ok,
                   f"goldens={golden_agg and golden_init}, converged in "
                   f"{iters_needed} iters, outlier deviation {deviation:.1%}")


# -- 10: connection-state capacity table ------------------------------------------

def test_c10_connection_state_table(capsys):
    rows = {r["transport"]: r for r in state_model.table_rows()}
    xp, roce = rows["XP"], rows["RoCE"]
    api_ok = (xp["state_per_qp_bytes"] == 52
              and xp["max_qps_display"] == "80K"
              and xp["cluster_size_display"] == "40K"
              and roce["state_per_qp_bytes"] == 407
              and roce["max_qps_display"] == "10K"
              and roce["cluster_size_display"] == "5K")
    rc = cli_main(["table5"])
    out = capsys.readouterr().out
    xp_line = next(line for line in out.splitlines() if line.startswith("XP"))
    roce_line = next(line for line in out.splitlines() if line.startswith("RoCE"))
    cli_ok = (rc == 0
              and "52 B" in xp_line and "80K" in xp_line and "40K" in xp_line
              and "407 B" in roce_line and "10K" in roce_line
              and "5K" in roce_line)
    ok = api_ok and cli_ok
    with capsys.disabled():
        assert verdict(10, "connection-state capacity table", ok,
                       f"XP 52B->{xp['max_qps_display']}->"
                       f"{xp['cluster_size_display']}, RoCE 407B->"
                       f"{roce['max_qps_display']}->{roce['cluster_size_display']}")


# -- 11: CSV determinism -----------------------------------------------------------

def test_c11_csv_determinism(tmp_path):
    raw = {
        "scenario": "determinism",
        "collective": "allreduce",
        "n_ranks": 2,
        "tensor_bytes": [65536],
        "transports": ["xp", "gbn"],
        "loss_rates": [0.0, 0.02],
        "encodings": [{"mode": "raw"}, {"mode": "hd_blk_str", "stride": 64}],
        "seeds": 3,
        "virtual": False,
        "budget": "warmup",
        "link": {"bandwidth_gbps": 25.0, "base_delay_us": 1.0, "jitter_us": 2.0},
    }
    cfg = harness.parse_config(raw)
    paths = []
    for name in ("a.csv", "b.csv"):
        rows = harness.run_experiment(cfg, jobs=1)
        path = tmp_path / name
        harness.write_csv(rows, path)
        paths.append(path)
    first, second = (p.read_bytes() for p in paths)
    ok = first == second and len(first) > 0
    assert verdict(11, "CSV byte-identical across reruns", ok,
                   f"{len(first)} bytes, mixed lossy/encoded cells")
