"""Static NIC-state accounting and the scalability comparison table.

Per-QP persistent state determines how many QPs fit in a fixed on-NIC
SRAM budget, and QPs per peer then bounds the reachable cluster size.
The XP profile is itemized and cross-checked against the fields the
transport actually keeps; competing transports are modeled by their
published per-QP totals without inventing field breakdowns.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

from .transport_xp import QP_PERSISTENT_FIELDS

SRAM_BUDGET_BYTES = 4 * 1024 * 1024
DEFAULT_QPS_PER_PEER = 2


@dataclass(frozen=True)
class QpStateProfile:
    name: str
    fields: tuple[tuple[str, int], ...]
    qps_per_peer: int = DEFAULT_QPS_PER_PEER

    def __post_init__(self) -> None:
        if self.qps_per_peer < 1:
            raise ValueError(f"qps_per_peer must be >= 1, got {self.qps_per_peer}")
        if any(nbytes <= 0 for _, nbytes in self.fields):
            raise ValueError("every field must occupy at least one byte")

    @property
    def bytes_per_qp(self) -> int:
        return sum(nbytes for _, nbytes in self.fields)


XP_PROFILE = QpStateProfile("XP", QP_PERSISTENT_FIELDS)

# The transport implementation must not quietly grow past the budget the
# scalability table advertises.
assert XP_PROFILE.bytes_per_qp <= 52, (
    f"XP per-QP state grew to {XP_PROFILE.bytes_per_qp} B; "
    "the scalability model assumes at most 52 B"
)


def builtin_profiles() -> list[QpStateProfile]:
    """Comparison set: reliable RDMA transports by their per-QP totals,
    plus the itemized XP profile."""
    return [
        QpStateProfile("RoCE", (("total", 407),)),
        QpStateProfile("IRN", (("total", 596),)),
        QpStateProfile("SRNIC", (("total", 242),)),
        QpStateProfile("Falcon", (("total", 350),)),
        QpStateProfile("UCCL", (("total", 407),), qps_per_peer=256),
        XP_PROFILE,
    ]


def max_qps(profile: QpStateProfile, sram_budget: int = SRAM_BUDGET_BYTES) -> int:
    """QPs that fit the SRAM budget."""
    if profile.bytes_per_qp <= 0:
        raise ValueError("profile has no state; cannot size it")
    return sram_budget // profile.bytes_per_qp


def cluster_size(qps: int, qps_per_peer: int = DEFAULT_QPS_PER_PEER) -> int:
    """Peers reachable when each consumes qps_per_peer queue pairs."""
    if qps_per_peer < 1:
        raise ValueError(f"qps_per_peer must be >= 1, got {qps_per_peer}")
    return qps // qps_per_peer


def display_k(n: int) -> str:
    """Thousands, floored, as in the comparison table: 80659 -> '80K'."""
    return f"{n // 1000}K" if n >= 1000 else str(n)


def table_rows(sram_budget: int = SRAM_BUDGET_BYTES) -> list[dict]:
    rows = []
    for profile in builtin_profiles():
        qps = max_qps(profile, sram_budget)
        peers = cluster_size(qps, profile.qps_per_peer)
        rows.append({
            "transport": profile.name,
            "state_per_qp_bytes": profile.bytes_per_qp,
            "qps_per_peer": profile.qps_per_peer,
            "max_qps": qps,
            "max_qps_display": display_k(qps),
            "cluster_size": peers,
            "cluster_size_display": display_k(peers),
        })
    return rows


def table_csv(sram_budget: int = SRAM_BUDGET_BYTES) -> str:
    rows = table_rows(sram_budget)
    out = io.StringIO()
    cols = list(rows[0].keys())
    out.write(",".join(cols) + "\n")
    for row in rows:
        out.write(",".join(str(row[c]) for c in cols) + "\n")
    return out.getvalue()


def table_text(sram_budget: int = SRAM_BUDGET_BYTES) -> str:
    rows = table_rows(sram_budget)
    header = f"{'transport':<10}{'state/QP':>10}{'max QPs':>10}{'cluster':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['transport']:<10}{str(row['state_per_qp_bytes']) + ' B':>10}"
                     f"{row['max_qps_display']:>10}{row['cluster_size_display']:>10}")
    return "\n".join(lines) + "\n"
