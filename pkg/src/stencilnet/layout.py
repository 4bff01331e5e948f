"""The shared blocked activation format and the co-tiled weight format.

Activations live as ``[channel_block][height][width][lane]`` with ``block``
lanes per channel block; channels past the logical count are zero lanes.
Weights are stored as
``[out_block][in_block][F_H][F_W][in_lane][out_lane]`` so the kernel walks
them in loop-nest order.  Packing happens only at model entry/exit and at
weight-load time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .instrument import COUNTERS

DEFAULT_BLOCK = 16


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def round_up(a: int, b: int) -> int:
    return ceil_div(a, b) * b


@dataclass
class PlainTensor:
    """Row-major ``[height][width][channels]`` activation."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"plain tensor must be 3-D (H, W, C), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"plain tensor dims must be >= 1, got {self.data.shape}")
        self.data = np.ascontiguousarray(self.data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass
class BlockedTensor:
    """Channel-blocked activation, ``data.shape == (nblocks, H, W, block)``."""

    data: np.ndarray
    channels: int

    def __post_init__(self) -> None:
        if self.data.ndim != 4:
            raise ValueError(f"blocked data must be 4-D, got shape {self.data.shape}")
        nblocks, _, _, block = self.data.shape
        if nblocks != ceil_div(self.channels, block):
            raise ValueError(
                f"{nblocks} channel blocks cannot hold {self.channels} channels at block {block}"
            )

    @classmethod
    def empty(cls, height: int, width: int, channels: int, block: int = DEFAULT_BLOCK,
              dtype=np.float32) -> "BlockedTensor":
        data = np.zeros((ceil_div(channels, block), height, width, block), dtype=dtype)
        return cls(data, channels)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def block(self) -> int:
        return self.data.shape[3]

    @property
    def nblocks(self) -> int:
        return self.data.shape[0]

    @property
    def padded_channels(self) -> int:
        return self.nblocks * self.block

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def pad_lanes(self) -> np.ndarray:
        """View of the padding lanes in the last block (possibly empty)."""
        used = self.channels - (self.nblocks - 1) * self.block
        return self.data[-1, :, :, used:]


def blocked_address(h: int, w: int, c: int, height: int, width: int, block: int) -> int:
    """Flat offset of logical element (h, w, c) inside a blocked buffer."""
    return (((c // block) * height + h) * width + w) * block + c % block


def pack_activations(src: PlainTensor, block: int = DEFAULT_BLOCK, fill: float = 0) -> BlockedTensor:
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    COUNTERS.add("pack")
    h, w, c = src.shape
    nblocks = ceil_div(c, block)
    staged = np.full((h, w, nblocks * block), fill, dtype=src.data.dtype)
    staged[:, :, :c] = src.data
    data = np.ascontiguousarray(staged.reshape(h, w, nblocks, block).transpose(2, 0, 1, 3))
    return BlockedTensor(data, c)


def unpack_activations(src: BlockedTensor) -> PlainTensor:
    COUNTERS.add("unpack")
    nb, h, w, b = src.data.shape
    plain = src.data.transpose(1, 2, 0, 3).reshape(h, w, nb * b)[:, :, : src.channels]
    return PlainTensor(np.ascontiguousarray(plain))


def pad_spatial(src: BlockedTensor, top: int = 0, bottom: int = 0, left: int = 0,
                right: int = 0, fill: float = 0) -> BlockedTensor:
    """Copy ``src`` into a larger blocked buffer with a ``fill`` border.

    Channel padding lanes stay zero in the border too.
    """
    if min(top, bottom, left, right) < 0:
        raise ValueError("spatial pads must be >= 0")
    nb, h, w, b = src.data.shape
    out = np.full((nb, h + top + bottom, w + left + right, b), fill, dtype=src.data.dtype)
    out[:, top:top + h, left:left + w, :] = src.data
    padded = BlockedTensor(out, src.channels)
    padded.pad_lanes()[...] = 0
    return padded


@dataclass
class PackedWeights:
    """Weights co-tiled on output and input channels.

    ``data.shape == (n_out_blocks, n_in_blocks, F_H, F_W, in_block, out_block)``.
    """

    data: np.ndarray
    groups: int
    filters_per_group: int
    filter_channels: int
    filter_height: int
    filter_width: int

    @property
    def out_block(self) -> int:
        return self.data.shape[5]

    @property
    def in_block(self) -> int:
        return self.data.shape[4]

    @property
    def logical_count(self) -> int:
        return (self.groups * self.filters_per_group * self.filter_channels
                * self.filter_height * self.filter_width)


def pack_weights(src: np.ndarray, out_block: int, in_block: int) -> PackedWeights:
    """Pack a plain ``[G][K][F_C][F_H][F_W]`` array.

    Output lane ``t`` of block ``ob`` holds output channel ``oc = ob*out_block + t``,
    i.e. group ``oc // K`` and filter ``oc % K``; input lane ``ii`` of block ``ib``
    holds filter channel ``ib*in_block + ii``.  Lanes past the logical extents
    are zero.
    """
    if src.ndim != 5:
        raise ValueError(f"weights must be 5-D [G][K][F_C][F_H][F_W], got {src.shape}")
    COUNTERS.add("pack_weights")
    g, k, fc, fh, fw = src.shape
    n_oc = round_up(g * k, out_block)
    n_fc = round_up(fc, in_block)
    staged = np.zeros((n_oc, n_fc, fh, fw), dtype=src.dtype)
    staged[: g * k, :fc] = src.reshape(g * k, fc, fh, fw)
    # (ob, t, ib, ii, x, y) -> (ob, ib, x, y, ii, t)
    staged = staged.reshape(n_oc // out_block, out_block, n_fc // in_block, in_block, fh, fw)
    data = np.ascontiguousarray(staged.transpose(0, 2, 4, 5, 3, 1))
    return PackedWeights(data, g, k, fc, fh, fw)


def unpack_weights(packed: PackedWeights) -> np.ndarray:
    """Inverse of :func:`pack_weights`, dropping padded lanes."""
    nob, nib, fh, fw, ib, obk = packed.data.shape
    plain = packed.data.transpose(0, 5, 1, 4, 2, 3).reshape(nob * obk, nib * ib, fh, fw)
    g, k, fc = packed.groups, packed.filters_per_group, packed.filter_channels
    return np.ascontiguousarray(plain[: g * k, :fc].reshape(g, k, fc, fh, fw))


# -- on-disk formats ---------------------------------------------------------

def write_plain_tensor(path: str | Path, tensor: PlainTensor) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *tensor.shape))
        fh.write(tensor.data.astype("<f4").tobytes())


def read_plain_tensor(path: str | Path) -> PlainTensor:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated tensor header")
    h, w, c = struct.unpack_from("<3I", raw)
    expected = 12 + 4 * h * w * c
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {h}x{w}x{c}, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float32).reshape(h, w, c)
    return PlainTensor(data)


def write_weights(fh: BinaryIO, arrays: list[np.ndarray]) -> None:
    for a in arrays:
        fh.write(np.asarray(a, dtype="<f4").tobytes())


def read_weight_payload(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise ValueError(f"{path}: weight payload of {len(raw)} bytes is not a whole number of float32s")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)
