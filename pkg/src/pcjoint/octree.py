"""Lossless octree occupancy coder for canonical coordinate sets.

Breadth-first traversal, one occupancy byte per internal node with child
bits in lexicographic octant order, entropy coded by an adaptive binary
model whose context is the parent's occupancy count (the root uses
context 0). Payload layout: [u8 depth][u32 point count][coded occupancy],
all little endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CorruptStreamError, DomainError
from .rangecoder import AdaptiveBinaryDecoder, AdaptiveBinaryEncoder
from .voxels import _PACK_BITS, pack_coords, unpack_coords

_NUM_CONTEXTS = 9  # parent occupancy counts 1..8, plus 0 for the root

# bit j of an occupancy byte covers octant (j>>2 & 1, j>>1 & 1, j & 1),
# i.e. lexicographic octant order from the most significant bit down
_OCTANT_KEY = [
    (((j >> 2) & 1) << (2 * _PACK_BITS)) | (((j >> 1) & 1) << _PACK_BITS) | (j & 1)
    for j in range(8)
]


def occupancy_levels(coords, depth):
    """Per level: (node_keys, occupancy_bytes, contexts), root level first.

    Level l nodes are the distinct packed prefixes c >> (depth - l) in
    canonical order; each byte flags which children exist; the context is
    the occupancy count of the node's own parent (0 at the root).
    """
    coords = np.asarray(coords, dtype=np.int64)
    keys = pack_coords(coords)
    per_level_keys = []
    for level in range(depth + 1):
        shift = depth - level
        mask_shift = np.int64(shift)
        field = ((keys >> (2 * _PACK_BITS)) >> mask_shift) << (2 * _PACK_BITS)
        field |= (((keys >> _PACK_BITS) & ((1 << _PACK_BITS) - 1)) >> mask_shift) << _PACK_BITS
        field |= (keys & ((1 << _PACK_BITS) - 1)) >> mask_shift
        per_level_keys.append(np.unique(field))
    levels = []
    prev_bytes = None
    prev_keys = None
    for level in range(depth):
        nodes = per_level_keys[level]
        children = per_level_keys[level + 1]
        parent_idx = np.searchsorted(nodes, _parent_keys(children))
        octant = _octant_bits(children)
        bytes_ = np.zeros(len(nodes), dtype=np.int64)
        np.bitwise_or.at(bytes_, parent_idx, np.int64(1) << (7 - octant))
        if level == 0:
            contexts = np.zeros(len(nodes), dtype=np.int64)
        else:
            own_parent = np.searchsorted(prev_keys, _parent_keys(nodes))
            contexts = _popcount8(prev_bytes[own_parent])
        levels.append((nodes, bytes_, contexts))
        prev_bytes, prev_keys = bytes_, nodes
    return levels


def _parent_keys(packed):
    coords = unpack_coords(packed)
    return pack_coords(coords >> 1)


def _octant_bits(packed):
    c = unpack_coords(packed) & 1
    return (c[:, 0] << 2) | (c[:, 1] << 1) | c[:, 2]


def _popcount8(bytes_):
    b = np.asarray(bytes_, dtype=np.int64)
    out = np.zeros_like(b)
    for j in range(8):
        out += (b >> j) & 1
    return out


def octree_encode(coords, depth) -> bytes:
    """Encode a canonical coordinate set losslessly."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    depth = int(depth)
    if depth < 0 or depth > 20:
        raise DomainError("depth out of range")
    if len(coords) and (coords.min() < 0 or coords.max() >= (1 << depth)):
        raise DomainError("coordinates outside [0, 2^depth)")
    header = struct.pack("<BI", depth, len(coords))
    if len(coords) == 0 or depth == 0:
        return header
    enc = AdaptiveBinaryEncoder(_NUM_CONTEXTS)
    encode_bit = enc.encode_bit
    for nodes, bytes_, contexts in occupancy_levels(coords, depth):
        for byte, ctx in zip(bytes_.tolist(), contexts.tolist()):
            for j in range(7, -1, -1):
                encode_bit(ctx, (byte >> j) & 1)
    return header + enc.finish()


def octree_decode(data: bytes):
    """Inverse of :func:`octree_encode`; returns canonical (N, 3) coords."""
    if len(data) < 5:
        raise CorruptStreamError("octree payload truncated")
    depth, count = struct.unpack("<BI", data[:5])
    if count == 0:
        return np.empty((0, 3), dtype=np.int64)
    if depth == 0:
        if count != 1:
            raise CorruptStreamError("depth-0 octree must hold exactly one point")
        return np.zeros((1, 3), dtype=np.int64)
    dec = AdaptiveBinaryDecoder(data[5:], _NUM_CONTEXTS)
    decode_bit = dec.decode_bit
    octant_keys = np.array(_OCTANT_KEY, dtype=np.int64)
    bit_shifts = 7 - np.arange(8)
    node_keys = np.zeros(1, dtype=np.int64)
    contexts = np.zeros(1, dtype=np.int64)
    for _ in range(depth):
        bytes_ = np.empty(len(node_keys), dtype=np.int64)
        for i, ctx in enumerate(contexts.tolist()):
            byte = 0
            for _ in range(8):
                byte = (byte << 1) | decode_bit(ctx)
            if byte == 0:
                raise CorruptStreamError("empty occupancy byte in octree stream")
            bytes_[i] = byte
        mask = ((bytes_[:, None] >> bit_shifts) & 1).astype(bool)
        child_keys = ((node_keys[:, None] << 1) + octant_keys)[mask]
        child_ctx = np.broadcast_to(_popcount8(bytes_)[:, None], mask.shape)[mask]
        # canonical order interleaves children of different parents
        order = np.argsort(child_keys)
        node_keys = child_keys[order]
        contexts = child_ctx[order]
    if len(node_keys) != count:
        raise CorruptStreamError(
            f"octree decoded {len(node_keys)} points, header says {count}"
        )
    return unpack_coords(node_keys)


def depth_for_bound(bound):
    """Smallest depth with 2^depth >= bound."""
    bound = int(bound)
    if bound <= 0:
        raise DomainError("bound must be positive")
    return max(0, (bound - 1).bit_length())
