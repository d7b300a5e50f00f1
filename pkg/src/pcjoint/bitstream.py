"""Self-contained bitstream container.

Layout (little endian): magic "PCJ1", u8 version, u64 model-config hash,
u16 resolution, u8 scale count K, u32 kept-voxel counts for scales
K-1 .. 0, per-channel i16 latent support bounds (hyper then main, each
preceded by a u16 channel count), then three u32-length-prefixed
payloads: base geometry, hyper latent, main latent. Entropy payloads are
[u32 symbol count][u8 table id][range-coded body].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptStreamError, DomainError, FormatError, ModelMismatchError

MAGIC = b"PCJ1"
VERSION = 1

TABLE_FACTORIZED = 0
TABLE_GAUSSIAN = 1


@dataclass
class Bitstream:
    """Parsed container; ``info`` carries non-serialized encoder stats."""

    model_hash: int
    resolution: int
    scale_count: int
    kept_counts: tuple  # n^(K-1) ... n^(0)
    z_bounds: np.ndarray  # (Cz, 2) int
    y_bounds: np.ndarray  # (Cy, 2) int
    geometry_payload: bytes
    z_payload: bytes
    y_payload: bytes
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.kept_counts) != self.scale_count:
            raise DomainError("kept-count list must cover scales K-1..0")
        if any(int(n) <= 0 for n in self.kept_counts):
            raise DomainError("kept-voxel counts must be strictly positive")

    @property
    def point_count(self):
        return int(self.kept_counts[-1])

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<BQHB", VERSION, self.model_hash, self.resolution,
                           self.scale_count)
        for n in self.kept_counts:
            out += struct.pack("<I", int(n))
        for bounds in (self.z_bounds, self.y_bounds):
            bounds = np.asarray(bounds, dtype=np.int64)
            if bounds.size and (bounds.min() < -32768 or bounds.max() > 32767):
                raise DomainError("latent support bounds exceed i16")
            out += struct.pack("<H", len(bounds))
            for lo, hi in bounds:
                out += struct.pack("<hh", int(lo), int(hi))
        for payload in (self.geometry_payload, self.z_payload, self.y_payload):
            out += struct.pack("<I", len(payload))
            out += payload
        return bytes(out)

    @staticmethod
    def from_bytes(data: bytes) -> "Bitstream":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CorruptStreamError("bitstream truncated")
            chunk = view[pos : pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise FormatError("bad container magic")
        version, model_hash, resolution, scale_count = struct.unpack(
            "<BQHB", take(12)
        )
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        counts = tuple(
            struct.unpack("<I", take(4))[0] for _ in range(scale_count)
        )
        bounds = []
        for _ in range(2):
            (channels,) = struct.unpack("<H", take(2))
            arr = np.empty((channels, 2), dtype=np.int64)
            for c in range(channels):
                arr[c] = struct.unpack("<hh", take(4))
            bounds.append(arr)
        payloads = []
        for _ in range(3):
            (length,) = struct.unpack("<I", take(4))
            payloads.append(bytes(take(length)))
        return Bitstream(
            model_hash=model_hash,
            resolution=resolution,
            scale_count=scale_count,
            kept_counts=counts,
            z_bounds=bounds[0],
            y_bounds=bounds[1],
            geometry_payload=payloads[0],
            z_payload=payloads[1],
            y_payload=payloads[2],
        )

    def check_model(self, expected_hash):
        if self.model_hash != expected_hash:
            raise ModelMismatchError(
                f"stream model hash {self.model_hash:#x} != checkpoint {expected_hash:#x}"
            )


def pack_entropy_payload(symbol_count, table_id, body: bytes) -> bytes:
    return struct.pack("<IB", symbol_count, table_id) + body


def unpack_entropy_payload(payload: bytes):
    if len(payload) < 5:
        raise CorruptStreamError("entropy payload truncated")
    count, table_id = struct.unpack("<IB", payload[:5])
    return count, table_id, payload[5:]
