"""xpsim: a bounded-completion RDMA-style transport and the discrete-event
fabric, collectives, and experiment harness around it.

The package models two transports over the same lossy fabric: an
out-of-order, best-effort transport whose operations always finish by a
deadline (reporting partial byte counts when data is missing), and a
Go-Back-N reliable baseline.  On top sit ring collectives with adaptive
group timeouts, Walsh-Hadamard loss mitigation, a NIC state scalability
model, and a seeded experiment CLI.
"""
from .congestion import AimdController, NullController, make_controller
from .core import (Buffer, Completion, CompletionStatus, Packet, PacketKind,
                   SimTime, Verb, WorkRequest, msec, sec, usec)
from .fabric import LinkModel, Network
from .collectives import (CollectiveConfig, CollectiveKind, CollectiveResult,
                          EncodeMode, RingEngine, run_collective)
from .recovery import EncodedTensor, decode, encode, fwht, mse
from .timeout_estimator import GroupEstimator, TimeoutModel, aggregate, initial, split_budget
from .transport_reliable import ControlChannel, GbnQp
from .transport_xp import CompletionMode, XpQp, fragment

__version__ = "0.1.0"

__all__ = [
    "AimdController", "Buffer", "CollectiveConfig", "CollectiveKind",
    "CollectiveResult", "Completion", "CompletionMode", "CompletionStatus",
    "ControlChannel", "EncodeMode", "EncodedTensor", "GbnQp", "GroupEstimator",
    "LinkModel", "Network", "NullController", "Packet", "PacketKind",
    "RingEngine", "SimTime", "TimeoutModel", "Verb", "WorkRequest", "XpQp",
    "aggregate", "decode", "encode", "fragment", "fwht", "initial",
    "make_controller", "mse", "msec", "run_collective", "sec", "split_budget",
    "usec", "__version__",
]
