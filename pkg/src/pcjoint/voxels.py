"""Sparse voxel tensor engine.

Coordinates are (N, 3) int64 arrays kept in canonical order: strictly
increasing lexicographically on (x, y, z). Every operation in this module
preserves that order, which is what makes kernels, pruning ties and
entropy-coding scan order deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DomainError

_PACK_BITS = 21  # supports coordinates < 2^21 in a single int64 key


def pack_coords(coords):
    """Map each (x, y, z) row to a single int64 whose order is lexicographic."""
    c = np.asarray(coords, dtype=np.int64)
    if c.ndim == 1:
        c = c.reshape(1, 3)
    return (c[:, 0] << (2 * _PACK_BITS)) | (c[:, 1] << _PACK_BITS) | c[:, 2]


def unpack_coords(keys):
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << _PACK_BITS) - 1
    return np.stack([keys >> (2 * _PACK_BITS), (keys >> _PACK_BITS) & mask, keys & mask], axis=1)


def canonical_order(coords):
    """Permutation that sorts rows lexicographically on (x, y, z)."""
    c = np.asarray(coords)
    return np.lexsort((c[:, 2], c[:, 1], c[:, 0]))


def is_canonical(coords):
    """True when rows are strictly increasing in lexicographic order."""
    if len(coords) <= 1:
        return True
    keys = pack_coords(coords)
    return bool(np.all(np.diff(keys) > 0))


def assert_canonical(coords, what="coordinates"):
    if not is_canonical(coords):
        raise ContractError(f"{what} are not in canonical order or contain duplicates")


def scale_bound(resolution, scale):
    """Coordinate bound ceil(R / 2^scale) at the given dyadic scale."""
    return -(-int(resolution) // (1 << scale))


def lookup_rows(table_coords, query_coords, missing=-1):
    """Index of each query row inside canonical ``table_coords``.

    Missing rows map to ``missing``. The table must be canonical.
    """
    table_keys = pack_coords(table_coords) if len(table_coords) else np.empty(0, np.int64)
    query_keys = pack_coords(query_coords) if len(query_coords) else np.empty(0, np.int64)
    pos = np.searchsorted(table_keys, query_keys)
    pos_clipped = np.minimum(pos, max(len(table_keys) - 1, 0))
    if len(table_keys):
        found = table_keys[pos_clipped] == query_keys
    else:
        found = np.zeros(len(query_keys), dtype=bool)
    out = np.where(found, pos_clipped, missing)
    return out.astype(np.int64)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VoxelCloud:
    """Quantized point locations with per-point RGB attributes in [0, 1]."""

    coords: np.ndarray
    attrs: np.ndarray
    resolution: int

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        attrs = np.asarray(self.attrs, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "attrs", attrs)
        if len(coords) != len(attrs):
            raise ContractError("coords and attrs lengths differ")
        if len(coords):
            if coords.min() < 0 or coords.max() >= self.resolution:
                raise DomainError("coordinates outside [0, resolution)")
            assert_canonical(coords, "cloud coordinates")
        if len(attrs) and (attrs.min() < -1e-9 or attrs.max() > 1.0 + 1e-9):
            raise DomainError("attributes outside [0, 1]")

    def __len__(self):
        return len(self.coords)

    @staticmethod
    def from_points(coords, attrs, resolution=None, dedup=False):
        """Build a canonical cloud from unsorted integer points.

        ``dedup=True`` keeps the first attribute for duplicated coordinates;
        otherwise duplicates raise. Resolution defaults to the smallest
        power of two that bounds the coordinates.
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        attrs = np.asarray(attrs, dtype=np.float64).reshape(-1, 3)
        if len(coords) != len(attrs):
            raise ContractError("coords and attrs lengths differ")
        if len(coords) and coords.min() < 0:
            raise DomainError("negative coordinates")
        if len(coords):
            keys = pack_coords(coords)
            order = np.argsort(keys, kind="stable")
            keys_sorted = keys[order]
            first = np.ones(len(keys_sorted), dtype=bool)
            first[1:] = keys_sorted[1:] != keys_sorted[:-1]
            if not dedup and not first.all():
                raise DomainError("duplicate coordinates")
            order = order[first]
            coords, attrs = coords[order], attrs[order]
        if resolution is None:
            top = int(coords.max()) + 1 if len(coords) else 1
            resolution = 1 << max(0, (top - 1).bit_length())
        return VoxelCloud(coords, attrs, int(resolution))


@dataclass
class SparseFeatureTensor:
    """Canonical coordinate set at a dyadic scale with per-voxel features."""

    coords: np.ndarray
    feats: np.ndarray
    scale: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim == 1:
            self.feats = self.feats.reshape(-1, 1)
        if len(self.coords) != len(self.feats):
            raise ContractError("coords and feature rows differ")
        assert_canonical(self.coords, "tensor coordinates")

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self):
        return self.feats.shape[1]


@dataclass(frozen=True)
class ConvSpec:
    """Shape of a sparse convolution: cubic kernel, stride 1 or 2."""

    kernel_size: int
    stride: int
    in_channels: int
    out_channels: int
    transposed_generative: bool = False

    def __post_init__(self):
        if self.kernel_size < 1:
            raise DomainError("kernel size must be positive")
        if self.stride not in (1, 2):
            raise DomainError("stride must be 1 or 2")
        if self.transposed_generative and self.stride != 2:
            raise DomainError("generative transposed convolutions use stride 2")


def kernel_offsets(kernel_size):
    """Tap offsets in fixed lexicographic order.

    Odd kernels are centred on the voxel. Even kernels use non-negative
    offsets {0..b-1} so that stride-2 windows tile the dyadic children
    exactly, which the upsampling path relies on.
    """
    b = int(kernel_size)
    lo = -(b // 2) if b % 2 == 1 else 0
    axis = np.arange(lo, lo + b, dtype=np.int64)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


# ---------------------------------------------------------------------------
# dyadic scale changes
# ---------------------------------------------------------------------------


def downsample_coords(coords):
    """Floor-divide by two and merge duplicates; canonical order restored."""
    coords = np.asarray(coords, dtype=np.int64)
    if len(coords) == 0:
        return coords.reshape(0, 3)
    parents = coords >> 1
    keys = np.unique(pack_coords(parents))
    return unpack_coords(keys)


def dense_children(coords, child_bound):
    """All dyadic children 2p + {0,1}^3, clipped to the child-scale bound."""
    coords = np.asarray(coords, dtype=np.int64)
    if len(coords) == 0:
        return coords.reshape(0, 3)
    octants = kernel_offsets(2)  # {0,1}^3 in lexicographic order
    children = (coords[:, None, :] << 1) + octants[None, :, :]
    children = children.reshape(-1, 3)
    keep = (children < child_bound).all(axis=1)
    children = children[keep]
    return children[canonical_order(children)]


def parent_indices(child_coords, parent_coords):
    """Index into ``parent_coords`` of each child's dyadic parent.

    Raises when a child has no parent in the set.
    """
    idx = lookup_rows(parent_coords, np.asarray(child_coords, np.int64) >> 1)
    if len(idx) and idx.min() < 0:
        raise ContractError("child coordinate without a parent in the target set")
    return idx


def ancestor_indices(coords, base_coords, levels):
    """Index of each coordinate's ancestor ``levels`` scales up."""
    idx = lookup_rows(base_coords, np.asarray(coords, np.int64) >> levels)
    if len(idx) and idx.min() < 0:
        raise ContractError("coordinate without an ancestor in the base set")
    return idx


# ---------------------------------------------------------------------------
# neighbourhood tap maps (geometry only, no features)
# ---------------------------------------------------------------------------


def conv_tap_map(in_coords, kernel_size, stride):
    """(out_coords, taps) for a sparse convolution.

    ``taps[i, t]`` is the row of ``in_coords`` sitting at kernel offset t
    relative to output i, or ``len(in_coords)`` (zero pad) when absent.
    Stride 2 anchors each output at twice its coordinate.
    """
    in_coords = np.asarray(in_coords, dtype=np.int64)
    offsets = kernel_offsets(kernel_size)
    if stride == 1:
        out_coords = in_coords
        anchors = in_coords
    else:
        out_coords = downsample_coords(in_coords)
        anchors = out_coords << 1
    pad = len(in_coords)
    taps = np.empty((len(out_coords), len(offsets)), dtype=np.int64)
    for t, off in enumerate(offsets):
        idx = lookup_rows(in_coords, anchors + off, missing=pad)
        taps[:, t] = idx
    return out_coords, taps


def generative_tap_map(in_coords, kernel_size, child_bound):
    """(out_coords, taps) for a stride-2 generative transposed convolution.

    Output coordinates are the dense dyadic children of the input set. For
    each kernel offset t, ``taps[i, t]`` addresses the parent at
    ``(child - offset) / 2`` when that division is exact and the parent is
    occupied; otherwise the zero pad row.
    """
    in_coords = np.asarray(in_coords, dtype=np.int64)
    out_coords = dense_children(in_coords, child_bound)
    offsets = kernel_offsets(kernel_size)
    pad = len(in_coords)
    taps = np.full((len(out_coords), len(offsets)), pad, dtype=np.int64)
    for t, off in enumerate(offsets):
        shifted = out_coords - off
        exact = (shifted & 1) == 0
        exact = exact.all(axis=1) & (shifted >= 0).all(axis=1)
        if not exact.any():
            continue
        idx = lookup_rows(in_coords, shifted[exact] >> 1, missing=pad)
        col = np.full(len(out_coords), pad, dtype=np.int64)
        col[exact] = idx
        taps[:, t] = col
    return out_coords, taps


# ---------------------------------------------------------------------------
# public convolution ops on plain numpy tensors
# ---------------------------------------------------------------------------


def _check_conv_args(tensor, spec, weights, bias):
    weights = np.asarray(weights, dtype=np.float64)
    expected = (spec.kernel_size**3, spec.in_channels, spec.out_channels)
    if weights.shape != expected:
        raise ContractError(f"weights shape {weights.shape} != {expected}")
    if tensor.channels != spec.in_channels:
        raise ContractError(
            f"channel mismatch: tensor has {tensor.channels}, spec expects {spec.in_channels}"
        )
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (spec.out_channels,):
            raise ContractError("bias shape mismatch")
    return weights, bias


def sparse_conv(tensor: SparseFeatureTensor, spec: ConvSpec, weights, bias=None):
    """Standard sparse convolution (stride 1 or 2) with zero absent neighbours."""
    if spec.transposed_generative:
        raise ContractError("use generative_transposed_conv for generative specs")
    weights, bias = _check_conv_args(tensor, spec, weights, bias)
    out_coords, taps = conv_tap_map(tensor.coords, spec.kernel_size, spec.stride)
    out = ad.sparse_affine(
        ad.constant(tensor.feats), ad.constant(weights),
        ad.constant(bias) if bias is not None else None,
        taps, len(tensor.coords),
    ).data
    scale = tensor.scale + (1 if spec.stride == 2 else 0)
    return SparseFeatureTensor(out_coords, out, scale)


def generative_transposed_conv(tensor: SparseFeatureTensor, spec: ConvSpec, weights,
                               bias=None, child_bound=None):
    """Generative upsampling: emit every dyadic child of the input set."""
    if not spec.transposed_generative:
        raise ContractError("spec is not transposed_generative")
    weights, bias = _check_conv_args(tensor, spec, weights, bias)
    if child_bound is None:
        child_bound = 1 << 62
    out_coords, taps = generative_tap_map(tensor.coords, spec.kernel_size, child_bound)
    out = ad.sparse_affine(
        ad.constant(tensor.feats), ad.constant(weights),
        ad.constant(bias) if bias is not None else None,
        taps, len(tensor.coords),
    ).data
    return SparseFeatureTensor(out_coords, out, tensor.scale - 1)


# ---------------------------------------------------------------------------
# pooling maps and pruning
# ---------------------------------------------------------------------------


def avg_pool_map(coords, values):
    """Average values of occupied children onto their dyadic parents.

    Returns (parent_coords, parent_values); values may be (N,) or (N, C).
    """
    coords = np.asarray(coords, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values.reshape(-1, 1)
    parents = downsample_coords(coords)
    idx = parent_indices(coords, parents)
    sums = np.zeros((len(parents), values.shape[1]))
    np.add.at(sums, idx, values)
    counts = np.bincount(idx, minlength=len(parents)).astype(np.float64)
    out = sums / counts[:, None]
    return parents, (out[:, 0] if squeeze else out)


def transposed_avg_pool_map(parent_coords, parent_values, target_coords):
    """Copy each parent's value onto every child in the target set."""
    parent_values = np.asarray(parent_values, dtype=np.float64)
    idx = parent_indices(target_coords, parent_coords)
    return parent_values[idx]


def top_k_prune(tensor: SparseFeatureTensor, probs, n):
    """Keep exactly the n most probable voxels.

    Ties are broken in favour of lexicographically smaller coordinates;
    the output stays in canonical order.
    """
    keep = top_k_indices(probs, n)
    return SparseFeatureTensor(tensor.coords[keep], tensor.feats[keep], tensor.scale)


def top_k_indices(probs, n):
    """Sorted indices of the n largest probabilities (canonical tie-break)."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    n = int(n)
    if n > len(probs):
        raise DomainError(f"cannot keep {n} of {len(probs)} voxels")
    if n == len(probs):
        return np.arange(len(probs), dtype=np.int64)
    # lexsort is stable: equal probabilities fall back to ascending index
    order = np.lexsort((np.arange(len(probs)), -probs))
    return np.sort(order[:n]).astype(np.int64)
