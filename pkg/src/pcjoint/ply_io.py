"""PLY reading and writing for colored voxel clouds.

Reads ascii and binary_little_endian files with vertex properties named
exactly x, y, z (numeric) and red, green, blue (8 bit). Writes
binary_little_endian with float32 positions and uchar colors.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, FormatError
from .voxels import VoxelCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_REQUIRED = ("x", "y", "z", "red", "green", "blue")


def round_half_away(values):
    """Round half away from zero (numpy default rounds half to even)."""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _parse_header(stream):
    first = stream.readline()
    if first.strip() not in (b"ply",):
        raise FormatError("not a PLY file")
    fmt = None
    elements = []  # list of (name, count, [(prop_name, dtype_code), ...])
    current = None
    while True:
        line = stream.readline()
        if not line:
            raise FormatError("unterminated PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens:
            continue
        kw = tokens[0]
        if kw == "comment":
            continue
        if kw == "format":
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise FormatError(f"unsupported PLY format {tokens[1]}")
        elif kw == "element":
            current = (tokens[1], int(tokens[2]), [])
            elements.append(current)
        elif kw == "property":
            if current is None:
                raise FormatError("property before element")
            if tokens[1] == "list":
                raise FormatError("list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise FormatError(f"unknown property type {tokens[1]}")
            current[2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif kw == "end_header":
            break
        else:
            raise FormatError(f"unexpected header keyword {kw}")
    if fmt is None:
        raise FormatError("missing format line")
    return fmt, elements


def load_ply(path) -> VoxelCloud:
    """Read a PLY vertex cloud, voxelize and canonicalize it.

    Coordinates are rounded half away from zero; duplicate voxels keep the
    first occurrence. Colors are scaled to [0, 1]. The resolution is the
    smallest power of two bounding the coordinates.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        if not elements or elements[0][0] != "vertex":
            raise FormatError("first PLY element must be vertex")
        _, count, props = elements[0]
        names = [name for name, _ in props]
        for needed in _REQUIRED:
            if needed not in names:
                raise FormatError(f"missing vertex property {needed!r}")
        dtype = np.dtype([(name, "<" + code) for name, code in props])
        if fmt == "binary":
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise FormatError("truncated PLY vertex data")
            table = np.frombuffer(raw, dtype=dtype, count=count)
        else:
            rows = []
            while len(rows) < count:
                line = fh.readline()
                if not line:
                    raise FormatError("truncated PLY vertex data")
                tokens = line.split()
                if not tokens:
                    continue
                if len(tokens) < len(props):
                    raise FormatError("short PLY vertex row")
                rows.append(tuple(tokens[: len(props)]))
            table = np.array(
                [tuple(float(v) for v in row) for row in rows], dtype=dtype
            ) if rows else np.empty(0, dtype=dtype)

    coords = np.stack(
        [round_half_away(table[name].astype(np.float64)) for name in ("x", "y", "z")],
        axis=1,
    )
    if len(coords) and coords.min() < 0:
        raise DomainError("negative coordinates after rounding")
    attrs = np.stack(
        [table[name].astype(np.float64) / 255.0 for name in ("red", "green", "blue")],
        axis=1,
    )
    return VoxelCloud.from_points(coords.astype(np.int64), attrs, dedup=True)


def write_ply(cloud: VoxelCloud, path):
    """Write a binary little-endian PLY with 8-bit requantized colors."""
    header = "\n".join(
        [
            "ply",
            "format binary_little_endian 1.0",
            f"element vertex {len(cloud)}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "end_header",
            "",
        ]
    )
    dtype = np.dtype(
        [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
         ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    )
    table = np.empty(len(cloud), dtype=dtype)
    for i, name in enumerate(("x", "y", "z")):
        table[name] = cloud.coords[:, i].astype(np.float32)
    bytes_rgb = np.clip(round_half_away(cloud.attrs * 255.0), 0, 255).astype(np.uint8)
    for i, name in enumerate(("red", "green", "blue")):
        table[name] = bytes_rgb[:, i]
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(table.tobytes())
