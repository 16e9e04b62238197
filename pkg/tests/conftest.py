"""Shared wiring helpers for transport-level tests.

Most tests need two nodes joined by a fabric with one queue pair between
them; these helpers keep that boilerplate in one place.  Node handlers are
QpMux instances, the same dispatcher the collective engine uses.
"""
from __future__ import annotations

from xpsim.collectives import QpMux
from xpsim.core import sec
from xpsim.fabric import LinkModel, Network
from xpsim.transport_reliable import GbnQp
from xpsim.transport_xp import XpQp

QUIET_LINK = LinkModel(bandwidth_bps=25e9, base_delay_ns=1_000, jitter_ns=0,
                       loss_rate=0.0)


def make_net(seed: int = 0, link: LinkModel = QUIET_LINK, **kw) -> Network:
    net = Network(seed=seed, default_link=link, **kw)
    net.add_node(0, QpMux())
    net.add_node(1, QpMux())
    return net


def xp_pair(net: Network, qp_id: int = 1, src: int = 0, dst: int = 1,
            tx_kw: dict | None = None, rx_kw: dict | None = None) -> tuple[XpQp, XpQp]:
    tx = XpQp(net, src, dst, qp_id, **(tx_kw or {}))
    rx = XpQp(net, dst, src, qp_id, **(rx_kw or {}))
    net.nodes[src].register(tx)
    net.nodes[dst].register(rx)
    return tx, rx


def gbn_pair_wired(net: Network, qp_id: int = 1, src: int = 0, dst: int = 1,
                   tx_kw: dict | None = None, rx_kw: dict | None = None) -> tuple[GbnQp, GbnQp]:
    tx = GbnQp(net, src, dst, qp_id, **(tx_kw or {}))
    rx = GbnQp(net, dst, src, qp_id, **(rx_kw or {}))
    net.nodes[src].register(tx)
    net.nodes[dst].register(rx)
    return tx, rx


def drain(net: Network, horizon: int = sec(100)) -> None:
    net.run_until(horizon)
