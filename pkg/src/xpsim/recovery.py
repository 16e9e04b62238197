"""Loss mitigation by orthogonal mixing.

Tensors are split into blocks of p fp32 elements, each block transformed
with a normalized Walsh-Hadamard transform, and coefficients are
interleaved across packets with a stride S: packet j of a group of S
blocks carries p/S coefficients from each block.  A lost packet then
zeroes only p/S coefficients per block instead of a contiguous run, and
the inverse transform spreads the residual error thinly across the block.
The transform is linear, so encoded tensors can be summed and decoded
once.

Everything here is pure value math; the transport carries the stride
metadata (see core.placement_spans for the matching wire-side scatter).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_MTU_PAYLOAD, ELEM_SIZE

DEFAULT_BLOCK_ELEMS = DEFAULT_MTU_PAYLOAD // ELEM_SIZE  # one packet per block
WHOLE_TENSOR_LIMIT = 1 << 20  # reference mode is for desk-size inputs only


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def fwht(x: np.ndarray) -> np.ndarray:
    """Normalized Walsh-Hadamard transform along the last axis.

    Scaling 1/sqrt(n) in each direction makes the transform self-inverse
    and norm-preserving.  Intermediate butterflies run in float64; the
    result is float32.
    """
    a = np.array(x, dtype=np.float64, copy=True)
    n = a.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"transform length must be a power of two, got {n}")
    flat = a.reshape(-1, n)
    h = 1
    while h < n:
        view = flat.reshape(flat.shape[0], n // (2 * h), 2, h)
        top = view[:, :, 0, :] + view[:, :, 1, :]
        bot = view[:, :, 0, :] - view[:, :, 1, :]
        view[:, :, 0, :] = top
        view[:, :, 1, :] = bot
        h *= 2
    flat *= 1.0 / math.sqrt(n)
    return flat.reshape(a.shape).astype(np.float32)


@dataclass
class EncodedTensor:
    """Block-transformed tensor plus the layout metadata needed to place
    and invert it."""
    values: np.ndarray  # fp32, length num_blocks * block_size
    block_size: int
    num_blocks: int
    stride: int = 1
    original_len: int = 0

    def __post_init__(self) -> None:
        if not _is_pow2(self.block_size):
            raise ValueError(f"block size must be a power of two, got {self.block_size}")
        if self.block_size % self.stride != 0 or self.stride < 1:
            raise ValueError(f"stride {self.stride} must divide block size {self.block_size}")
        if self.num_blocks % self.stride != 0:
            raise ValueError(f"block count {self.num_blocks} must be a multiple "
                             f"of stride {self.stride}")
        if self.values.shape != (self.num_blocks * self.block_size,):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{self.num_blocks} blocks of {self.block_size}")
        if not 0 <= self.original_len <= self.num_blocks * self.block_size:
            raise ValueError(f"original length {self.original_len} out of range")

    @property
    def num_packets(self) -> int:
        return self.num_blocks

    def to_bytes(self) -> bytes:
        return self.values.astype("<f4", copy=False).tobytes()


def encode(tensor: np.ndarray, block_size: int = DEFAULT_BLOCK_ELEMS,
           stride: int = 1) -> EncodedTensor:
    """Zero-pad to a whole number of block groups and transform each block.

    Zero padding commutes with the transform (zero blocks stay zero), so
    padding before or after encoding is equivalent.
    """
    flat = np.asarray(tensor, dtype=np.float32).reshape(-1)
    n = flat.size
    if n == 0:
        raise ValueError("cannot encode an empty tensor")
    if not _is_pow2(block_size):
        raise ValueError(f"block size must be a power of two, got {block_size}")
    if block_size % stride != 0 or stride < 1:
        raise ValueError(f"stride {stride} must divide block size {block_size}")
    group = block_size * stride
    padded = math.ceil(n / group) * group
    if padded != n:
        flat = np.concatenate([flat, np.zeros(padded - n, dtype=np.float32)])
    blocks = flat.reshape(-1, block_size)
    return EncodedTensor(values=fwht(blocks).reshape(-1),
                         block_size=block_size,
                         num_blocks=blocks.shape[0],
                         stride=stride,
                         original_len=n)


def decode(enc: EncodedTensor) -> np.ndarray:
    """Inverse transform per block, truncated to the original length."""
    blocks = enc.values.reshape(enc.num_blocks, enc.block_size)
    out = fwht(blocks).reshape(-1)
    return out[:enc.original_len]


def stride_layout(enc: EncodedTensor, stride: int | None = None) -> list[np.ndarray]:
    """Element indices carried by each packet.

    Blocks are grouped stride at a time.  Packet j of a group carries
    coefficients [j*q, (j+1)*q) of every block in the group, q = p/stride,
    ordered block-major so each packet is a gather of S contiguous runs.
    The packets partition all coefficients.
    """
    s = enc.stride if stride is None else stride
    p = enc.block_size
    if s < 1 or p % s != 0:
        raise ValueError(f"stride {s} must divide block size {p}")
    if enc.num_blocks % s != 0:
        raise ValueError(f"block count {enc.num_blocks} not a multiple of stride {s}")
    q = p // s
    packets: list[np.ndarray] = []
    for g in range(enc.num_blocks // s):
        for j in range(s):
            runs = [np.arange((g * s + k) * p + j * q, (g * s + k) * p + (j + 1) * q)
                    for k in range(s)]
            packets.append(np.concatenate(runs))
    return packets


def place_with_loss(enc: EncodedTensor, lost: set[int]) -> EncodedTensor:
    """Reassemble from surviving packets; a lost packet's entire span of
    coefficients is zero-filled."""
    layout = stride_layout(enc)
    received = np.zeros_like(enc.values)
    for idx, elems in enumerate(layout):
        if idx not in lost:
            received[elems] = enc.values[elems]
    return EncodedTensor(values=received, block_size=enc.block_size,
                         num_blocks=enc.num_blocks, stride=enc.stride,
                         original_len=enc.original_len)


def zero_spans(tensor: np.ndarray, span_elems: int, lost: set[int]) -> np.ndarray:
    """Raw-mode counterpart of a packet loss: zero contiguous spans.

    Span i covers elements [i*span_elems, (i+1)*span_elems); the last span
    may be short.
    """
    flat = np.asarray(tensor, dtype=np.float32).reshape(-1).copy()
    for idx in lost:
        flat[idx * span_elems:(idx + 1) * span_elems] = 0.0
    return flat


def encode_whole(tensor: np.ndarray) -> EncodedTensor:
    """Whole-tensor transform reference: a single block spanning the padded
    tensor.  Reference mode for small inputs only; the transport path never
    uses it."""
    flat = np.asarray(tensor, dtype=np.float32).reshape(-1)
    n = flat.size
    if n == 0:
        raise ValueError("cannot encode an empty tensor")
    padded = 1 << max(0, (n - 1).bit_length())
    if padded > WHOLE_TENSOR_LIMIT:
        raise ValueError(f"whole-tensor mode capped at {WHOLE_TENSOR_LIMIT} elements, "
                         f"got {n}")
    if padded != n:
        flat = np.concatenate([flat, np.zeros(padded - n, dtype=np.float32)])
    return EncodedTensor(values=fwht(flat), block_size=padded, num_blocks=1,
                         stride=1, original_len=n)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared elementwise difference, accumulated in float64."""
    av = np.asarray(a).reshape(-1)
    bv = np.asarray(b).reshape(-1)
    if av.size != bv.size:
        raise ValueError(f"length mismatch: {av.size} vs {bv.size}")
    diff = av.astype(np.float64) - bv.astype(np.float64)
    return float(np.mean(diff * diff))
