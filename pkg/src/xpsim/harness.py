"""Experiment harness: seeded sweeps over (transport, loss, size, encoding)
cells, CSV output, and summary tables.

A cell is one combination of sweep axes; each cell runs `seeds` times.
Fabric seeds are derived from the cell key and the seed index but not the
transport, so transports face identical inputs and comparable loss
processes.  Independent runs can execute on a worker pool; rows are
canonically ordered before writing, so a scenario CSV is byte-identical
across runs and worker counts.
"""
from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing
import os
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .collectives import (CollectiveConfig, CollectiveKind, EncodeMode,
                          expected_output, make_inputs, run_collective,
                          warmup_budget)
from .core import SimTime, usec
from .fabric import LinkModel
from .recovery import mse
from .transport_reliable import DEFAULT_WINDOW
from .transport_xp import CompletionMode

SCHEMA_LINE = "#schema=xpsim-rows-v1"
CSV_COLUMNS = ["scenario", "seed", "transport", "loss", "size", "encode",
               "stride", "cct_ns", "p_bytes_lost", "mse"]
OUT_DIR_ENV = "XPSIM_OUT_DIR"
FULL_SCALE_DEFAULT = 10


class ConfigError(Exception):
    """Invalid experiment configuration; message names the offending field."""


@dataclass(frozen=True)
class EncodingSpec:
    mode: EncodeMode
    stride: int = 1

    @property
    def token(self) -> str:
        return self.mode.value


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    collective: CollectiveKind
    n_ranks: int
    tensor_bytes: tuple[int, ...]
    transports: tuple[str, ...]
    loss_rates: tuple[float, ...]
    encodings: tuple[EncodingSpec, ...]
    seeds: int
    seed_base: int = 0
    virtual: bool = False
    completion_mode: CompletionMode = CompletionMode.STRICT
    dedup_mode: str = "offset_set"
    budget: str | int | None = "warmup"  # "warmup" | ns | None (unbounded)
    controller: str = "none"
    window: int = DEFAULT_WINDOW
    rto_ns: SimTime | None = None
    ack_every: int = 1
    link: LinkModel = LinkModel()
    ecn_threshold_ns: SimTime | None = None
    reorder_swap_prob: float = 0.0
    full_scale_multiplier: int = FULL_SCALE_DEFAULT


def _require(raw: dict, key: str, kinds, what: str):
    if key not in raw:
        raise ConfigError(f"{key}: required field is missing")
    value = raw[key]
    allowed = kinds if isinstance(kinds, tuple) else (kinds,)
    if isinstance(value, bool) and bool not in allowed:
        raise ConfigError(f"{key}: expected {what}, got {value!r}")
    if not isinstance(value, kinds):
        raise ConfigError(f"{key}: expected {what}, got {value!r}")
    return value


def _optional(raw: dict, key: str, default, kinds, what: str):
    if key not in raw or raw[key] is None:
        return default
    return _require(raw, key, kinds, what)


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a JSON-shaped dict; raises ConfigError naming the field."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at top level")
    known = {
        "scenario", "collective", "n_ranks", "tensor_bytes", "transports",
        "loss_rates", "encodings", "seeds", "seed_base", "virtual",
        "completion_mode", "dedup_mode", "budget", "controller", "window",
        "rto_us", "ack_every", "link", "ecn_threshold_us", "reorder_swap_prob",
        "full_scale_multiplier",
    }
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown field")

    scenario = _require(raw, "scenario", str, "a string")
    coll_token = _require(raw, "collective", str, "a collective name")
    try:
        collective = CollectiveKind(coll_token)
    except ValueError:
        choices = ", ".join(k.value for k in CollectiveKind)
        raise ConfigError(f"collective: {coll_token!r} is not one of {choices}")
    n_ranks = _require(raw, "n_ranks", int, "an integer")
    if n_ranks < 2:
        raise ConfigError(f"n_ranks: need at least 2, got {n_ranks}")

    sizes = _require(raw, "tensor_bytes", list, "a list of byte sizes")
    if not sizes:
        raise ConfigError("tensor_bytes: must not be empty")
    for s in sizes:
        if not isinstance(s, int) or s <= 0 or s % 4 != 0:
            raise ConfigError(f"tensor_bytes: {s!r} is not a positive multiple of 4")
        if s // 4 < n_ranks:
            raise ConfigError(f"tensor_bytes: {s} bytes is fewer than one fp32 "
                              f"element per rank ({n_ranks} ranks)")

    transports = _require(raw, "transports", list, "a list")
    if not transports:
        raise ConfigError("transports: must not be empty")
    for t in transports:
        if t not in ("xp", "gbn"):
            raise ConfigError(f"transports: {t!r} is not 'xp' or 'gbn'")

    losses = _require(raw, "loss_rates", list, "a list of loss rates")
    if not losses:
        raise ConfigError("loss_rates: must not be empty")
    for lr in losses:
        if not isinstance(lr, (int, float)) or not 0.0 <= lr < 1.0:
            raise ConfigError(f"loss_rates: {lr!r} is not in [0, 1)")

    enc_raw = _optional(raw, "encodings", [{"mode": "raw"}], list, "a list")
    encodings = []
    for e in enc_raw:
        if not isinstance(e, dict) or "mode" not in e:
            raise ConfigError(f"encodings: entry {e!r} needs a 'mode'")
        try:
            mode = EncodeMode(e["mode"])
        except ValueError:
            choices = ", ".join(m.value for m in EncodeMode)
            raise ConfigError(f"encodings: mode {e['mode']!r} is not one of {choices}")
        stride = e.get("stride", 1)
        if not isinstance(stride, int) or stride < 1:
            raise ConfigError(f"encodings: stride {stride!r} must be a positive integer")
        if mode != EncodeMode.HD_BLK_STR and stride != 1:
            raise ConfigError(f"encodings: stride applies only to hd_blk_str, got "
                              f"mode {mode.value!r} with stride {stride}")
        encodings.append(EncodingSpec(mode, stride))

    seeds = _require(raw, "seeds", int, "an integer")
    if seeds < 1:
        raise ConfigError(f"seeds: need at least 1, got {seeds}")

    virtual = _optional(raw, "virtual", False, bool, "a boolean")
    cm_token = _optional(raw, "completion_mode", "strict", str, "a string")
    try:
        completion_mode = CompletionMode(cm_token)
    except ValueError:
        choices = ", ".join(m.value for m in CompletionMode)
        raise ConfigError(f"completion_mode: {cm_token!r} is not one of {choices}")
    dedup_mode = _optional(raw, "dedup_mode", "offset_set", str, "a string")
    if dedup_mode not in ("offset_set", "counter"):
        raise ConfigError(f"dedup_mode: {dedup_mode!r} is not 'offset_set' or 'counter'")

    budget = raw.get("budget", "warmup")
    if budget is not None and budget != "warmup" and not isinstance(budget, int):
        raise ConfigError(f"budget: expected 'warmup', an integer ns value, or null; "
                          f"got {budget!r}")
    if isinstance(budget, int) and budget <= 0:
        raise ConfigError(f"budget: must be positive, got {budget}")

    controller = _optional(raw, "controller", "none", str, "a string")
    if controller not in ("none", "aimd"):
        raise ConfigError(f"controller: {controller!r} is not 'none' or 'aimd'")
    window = _optional(raw, "window", DEFAULT_WINDOW, int, "an integer")
    if window < 1:
        raise ConfigError(f"window: must be >= 1, got {window}")
    rto_us = _optional(raw, "rto_us", None, (int, float), "a number")
    ack_every = _optional(raw, "ack_every", 1, int, "an integer")
    if ack_every < 1:
        raise ConfigError(f"ack_every: must be >= 1, got {ack_every}")

    link_raw = _optional(raw, "link", {}, dict, "an object")
    for key in link_raw:
        if key not in ("bandwidth_gbps", "base_delay_us", "jitter_us", "burst"):
            raise ConfigError(f"link.{key}: unknown field")
    burst = link_raw.get("burst")
    if burst is not None:
        if (not isinstance(burst, list) or len(burst) != 2
                or not isinstance(burst[0], (int, float))
                or not isinstance(burst[1], int)):
            raise ConfigError(f"link.burst: expected [probability, mean_length], "
                              f"got {burst!r}")
        burst = (float(burst[0]), int(burst[1]))
    try:
        link = LinkModel(
            bandwidth_bps=float(link_raw.get("bandwidth_gbps", 25.0)) * 1e9,
            base_delay_ns=usec(link_raw.get("base_delay_us", 1.0)),
            jitter_ns=usec(link_raw.get("jitter_us", 0.0)),
            loss_rate=0.0,
            burst=burst,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"link: {exc}")

    ecn_us = _optional(raw, "ecn_threshold_us", None, (int, float), "a number")
    reorder = _optional(raw, "reorder_swap_prob", 0.0, (int, float), "a number")
    if not 0.0 <= reorder < 1.0:
        raise ConfigError(f"reorder_swap_prob: {reorder!r} is not in [0, 1)")
    multiplier = _optional(raw, "full_scale_multiplier", FULL_SCALE_DEFAULT, int,
                           "an integer")
    if multiplier < 1:
        raise ConfigError(f"full_scale_multiplier: must be >= 1, got {multiplier}")

    return ExperimentConfig(
        scenario=scenario,
        collective=collective,
        n_ranks=n_ranks,
        tensor_bytes=tuple(sizes),
        transports=tuple(transports),
        loss_rates=tuple(float(lr) for lr in losses),
        encodings=tuple(encodings),
        seeds=seeds,
        seed_base=_optional(raw, "seed_base", 0, int, "an integer"),
        virtual=virtual,
        completion_mode=completion_mode,
        dedup_mode=dedup_mode,
        budget=budget,
        controller=controller,
        window=window,
        rto_ns=None if rto_us is None else usec(rto_us),
        ack_every=ack_every,
        link=link,
        ecn_threshold_ns=None if ecn_us is None else usec(ecn_us),
        reorder_swap_prob=float(reorder),
        full_scale_multiplier=multiplier,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})")
    return parse_config(raw)


def derive_seed(scenario: str, loss: float, size: int, encode: str,
                stride: int, seed_index: int) -> int:
    """Stable per-(cell, repetition) fabric seed.  The transport is
    deliberately excluded so compared transports run the same cell seed."""
    key = f"{scenario}|{loss:.10g}|{size}|{encode}|{stride}|{seed_index}"
    return zlib.crc32(key.encode())


@dataclass(frozen=True)
class _Job:
    scenario: str
    transport: str
    loss: float
    size: int
    encode: str
    stride: int
    seed_index: int
    fabric_seed: int
    coll_cfg: CollectiveConfig
    link: LinkModel
    ecn_threshold_ns: SimTime | None
    reorder_swap_prob: float


def _cell_cfg(cfg: ExperimentConfig, transport: str, size: int,
              enc: EncodingSpec, budget_ns: SimTime | None) -> CollectiveConfig:
    return CollectiveConfig(
        kind=cfg.collective,
        n_ranks=cfg.n_ranks,
        tensor_elems=size // 4,
        transport=transport,
        encode=enc.mode,
        stride=enc.stride,
        completion_mode=cfg.completion_mode,
        dedup_mode=cfg.dedup_mode,
        budget_ns=budget_ns,
        controller=cfg.controller,
        window=cfg.window,
        rto_ns=cfg.rto_ns,
        ack_every=cfg.ack_every,
        virtual=cfg.virtual,
    )


def _run_job(job: _Job) -> dict:
    lossy = replace(job.link, loss_rate=job.loss)
    inputs = make_inputs(job.coll_cfg, job.fabric_seed)
    result = run_collective(job.coll_cfg, lossy, seed=job.fabric_seed,
                            inputs=inputs,
                            ecn_threshold_ns=job.ecn_threshold_ns,
                            reorder_swap_prob=job.reorder_swap_prob)
    stats = result.stats
    row = {
        "scenario": job.scenario,
        "seed": job.seed_index,
        "transport": job.transport,
        "loss": f"{job.loss:.10g}",
        "size": job.size,
        "encode": job.encode,
        "stride": job.stride,
        "cct_ns": stats.cct_ns,
        "p_bytes_lost": f"{stats.bytes_missing / stats.bytes_expected:.9e}",
        "mse": "",
    }
    if result.outputs is not None:
        oracle = expected_output(job.coll_cfg, inputs)
        errs = [mse(out, ref) for out, ref in zip(result.outputs, oracle)]
        row["mse"] = f"{float(np.mean(errs)):.9e}"
    return row


def build_jobs(cfg: ExperimentConfig, *, full: bool = False) -> list[_Job]:
    jobs = []
    scale = cfg.full_scale_multiplier if full else 1
    budget_cache: dict[tuple, SimTime | None] = {}
    for size_base in cfg.tensor_bytes:
        size = size_base * scale
        for enc in cfg.encodings:
            for transport in cfg.transports:
                cache_key = (size, enc, transport)
                if cache_key not in budget_cache:
                    if cfg.budget == "warmup":
                        probe = _cell_cfg(cfg, transport, size, enc, None)
                        budget_cache[cache_key] = warmup_budget(probe, cfg.link)
                    else:
                        budget_cache[cache_key] = cfg.budget
                budget_ns = budget_cache[cache_key]
                for loss in cfg.loss_rates:
                    coll = _cell_cfg(cfg, transport, size, enc, budget_ns)
                    for i in range(cfg.seeds):
                        jobs.append(_Job(
                            scenario=cfg.scenario,
                            transport=transport,
                            loss=loss,
                            size=size,
                            encode=enc.token,
                            stride=enc.stride,
                            seed_index=cfg.seed_base + i,
                            fabric_seed=derive_seed(cfg.scenario, loss, size,
                                                    enc.token, enc.stride,
                                                    cfg.seed_base + i),
                            coll_cfg=coll,
                            link=cfg.link,
                            ecn_threshold_ns=cfg.ecn_threshold_ns,
                            reorder_swap_prob=cfg.reorder_swap_prob,
                        ))
    return jobs


def run_experiment(cfg: ExperimentConfig, *, full: bool = False,
                   jobs: int | None = None) -> list[dict]:
    """Run every cell and return canonically ordered rows."""
    work = build_jobs(cfg, full=full)
    if jobs is None:
        jobs = min(os.cpu_count() or 1, len(work))
    if jobs > 1 and len(work) > 1:
        with multiprocessing.Pool(jobs) as pool:
            rows = pool.map(_run_job, work, chunksize=max(1, len(work) // (jobs * 4)))
    else:
        rows = [_run_job(j) for j in work]
    rows.sort(key=lambda r: (r["scenario"], r["transport"], r["loss"],
                             r["size"], r["encode"], r["stride"], r["seed"]))
    return rows


def write_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        first = fh.readline().strip()
        if first != SCHEMA_LINE:
            raise ConfigError(f"csv: {path} does not start with '{SCHEMA_LINE}'")
        return list(csv.DictReader(fh))


def default_out_path(scenario: str, override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    base = Path(os.environ.get(OUT_DIR_ENV, "."))
    base.mkdir(parents=True, exist_ok=True)
    return base / f"{scenario}.csv"


def _percentile(sorted_vals: list[float], q: float) -> float:
    """Nearest-rank percentile on a pre-sorted list."""
    if not sorted_vals:
        return math.nan
    rank = max(1, math.ceil(q * len(sorted_vals)))
    return sorted_vals[rank - 1]


def summarize(rows: list[dict]) -> str:
    """Per-cell latency digest plus reliable/bounded speedup ratios."""
    cells: dict[tuple, dict[str, list[int]]] = {}
    for row in rows:
        key = (row["scenario"], row["loss"], int(row["size"]),
               row["encode"], int(row["stride"]))
        cells.setdefault(key, {}).setdefault(row["transport"], []).append(
            int(row["cct_ns"]))
    out = io.StringIO()
    for key in sorted(cells):
        scenario, loss, size, encode, stride = key
        out.write(f"{scenario}: loss={loss} size={size} encode={encode} "
                  f"stride={stride}\n")
        digest = {}
        for transport in sorted(cells[key]):
            vals = sorted(cells[key][transport])
            digest[transport] = {
                "mean": sum(vals) / len(vals),
                "p50": _percentile(vals, 0.50),
                "p99": _percentile(vals, 0.99),
            }
            d = digest[transport]
            out.write(f"  {transport:>3}: n={len(vals):<5d} "
                      f"mean={d['mean'] / 1e6:9.3f} ms  "
                      f"p50={d['p50'] / 1e6:9.3f} ms  "
                      f"p99={d['p99'] / 1e6:9.3f} ms\n")
        if "xp" in digest and "gbn" in digest:
            mean_ratio = digest["gbn"]["mean"] / digest["xp"]["mean"]
            p99_ratio = digest["gbn"]["p99"] / digest["xp"]["p99"]
            flag = "" if mean_ratio > 1.0 else "  [xp not faster]"
            out.write(f"  ratio gbn/xp: mean={mean_ratio:.2f}x "
                      f"p99={p99_ratio:.2f}x{flag}\n")
        elif {"xp", "gbn"} & set(digest):
            missing = ({"xp", "gbn"} - set(digest)).pop()
            out.write(f"  ratio gbn/xp: incomplete (missing {missing})\n")
        out.write("\n")
    return out.getvalue()
