"""Quality maps and the conditioning machinery built on them.

A quality map assigns every point a (geometry, attribute) quality pair in
[0, 1]^2. Maps are turned into loss weights by a monotone polynomial
transform and into per-channel feature scales/shifts by a small learned
pointwise network.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DomainError, FormatError
from .nn import ParameterStore
from .voxels import SparseFeatureTensor, avg_pool_map, transposed_avg_pool_map


@dataclass
class QualityMap:
    """Per-point quality pair (qg, qa), aligned with a coordinate set."""

    coords: np.ndarray
    qg: np.ndarray
    qa: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.qg = np.asarray(self.qg, dtype=np.float64).reshape(-1)
        self.qa = np.asarray(self.qa, dtype=np.float64).reshape(-1)
        if len(self.qg) != len(self.coords) or len(self.qa) != len(self.coords):
            raise ContractError("quality map length mismatch")
        for vals in (self.qg, self.qa):
            if len(vals) and (vals.min() < 0.0 or vals.max() > 1.0):
                raise DomainError("quality values outside [0, 1]")

    def __len__(self):
        return len(self.coords)

    @property
    def values(self):
        """(N, 2) array [qg, qa]."""
        return np.stack([self.qg, self.qa], axis=1)

    @staticmethod
    def uniform(coords, qg, qa):
        n = len(coords)
        return QualityMap(coords, np.full(n, float(qg)), np.full(n, float(qa)))


@dataclass(frozen=True)
class WeightTransform:
    """Monotone map from quality in [0,1] to a loss weight in [min, max].

    T(x) = (max - min) * x^exponent + min; exponent 2 by default, 0.5
    selects the root variant.
    """

    lambda_min: float
    lambda_max: float
    exponent: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.lambda_min <= self.lambda_max):
            raise DomainError("need 0 < lambda_min <= lambda_max")
        if self.exponent <= 0.0:
            raise DomainError("exponent must be positive")


def weight_transform(q, wt: WeightTransform):
    q = np.asarray(q, dtype=np.float64)
    if q.size and (q.min() < 0.0 or q.max() > 1.0):
        raise DomainError("quality outside [0, 1]")
    return (wt.lambda_max - wt.lambda_min) * q**wt.exponent + wt.lambda_min


# ---------------------------------------------------------------------------
# map construction
# ---------------------------------------------------------------------------


def _normalized_projection(coords, direction):
    proj = np.asarray(coords, dtype=np.float64) @ np.asarray(direction, dtype=np.float64)
    lo, hi = proj.min(), proj.max()
    if hi - lo < 1e-12:
        return np.zeros(len(proj))
    return (proj - lo) / (hi - lo)


def _random_unit_direction(rng):
    while True:
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
        if norm > 1e-9:
            return v / norm


def sample_quality_map(coords, mode, rng):
    """Draw a training quality map.

    ``uniform``: one (qg, qa) pair shared by all points. ``gradient``: per
    modality a ramp between random endpoints along one random direction
    (shared across modalities).
    """
    coords = np.asarray(coords, dtype=np.int64)
    if len(coords) == 0:
        raise DomainError("empty coordinate set")
    if mode == "uniform":
        qg, qa = rng.uniform(0.0, 1.0, size=2)
        return QualityMap.uniform(coords, qg, qa)
    if mode != "gradient":
        raise DomainError(f"unknown quality map mode {mode!r}")
    direction = _random_unit_direction(rng)
    proj = _normalized_projection(coords, direction)
    channels = []
    for _ in range(2):
        lo, hi = rng.uniform(0.0, 1.0, size=2)
        if lo > hi:
            lo, hi = hi, lo
        channels.append(np.clip(lo + (hi - lo) * proj, 0.0, 1.0))
    return QualityMap(coords, channels[0], channels[1])


def step_quality_map(coords, normal, threshold, q_front, q_back):
    """Half-space split: projection >= threshold gets q_front, else q_back."""
    for pair in (q_front, q_back):
        if not (0.0 <= pair[0] <= 1.0 and 0.0 <= pair[1] <= 1.0):
            raise DomainError("quality pairs must lie in [0, 1]^2")
    proj = np.asarray(coords, dtype=np.float64) @ np.asarray(normal, dtype=np.float64)
    front = proj >= threshold
    qg = np.where(front, q_front[0], q_back[0])
    qa = np.where(front, q_front[1], q_back[1])
    return QualityMap(coords, qg, qa)


def downscale_quality_map(qmap: QualityMap) -> QualityMap:
    """Average-pool both modalities onto the downsampled coordinates."""
    parents, pooled = avg_pool_map(qmap.coords, qmap.values)
    return QualityMap(parents, np.clip(pooled[:, 0], 0.0, 1.0), np.clip(pooled[:, 1], 0.0, 1.0))


def quality_pyramid(qmap: QualityMap, scales):
    """Maps at scales 0..scales, pooled one dyadic level at a time."""
    maps = [qmap]
    for _ in range(scales):
        maps.append(downscale_quality_map(maps[-1]))
    return maps


def loss_weight_map(qmap: QualityMap, wt: WeightTransform, target_scale, target_coords,
                    modality="qg"):
    """Per-point loss weights on a candidate set at a coarser scale.

    The map is pooled down the ground-truth pyramid to the candidates'
    parent scale, transformed, then broadcast to every candidate through
    its dyadic parent. Candidates are children of sets that mirror the
    ground-truth pyramid, so the parent lookup always succeeds.
    """
    coords = qmap.coords
    values = qmap.qg if modality == "qg" else qmap.qa
    for _ in range(target_scale + 1):
        coords, values = avg_pool_map(coords, values)
    weights = weight_transform(np.clip(values, 0.0, 1.0), wt)
    return transposed_avg_pool_map(coords, weights, target_coords)


# ---------------------------------------------------------------------------
# conditional feature extraction
# ---------------------------------------------------------------------------


@dataclass
class ConditionMap:
    """Per-point channel scales (alpha) and shifts (beta)."""

    coords: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


def cfe_apply(features: SparseFeatureTensor, cond: ConditionMap) -> SparseFeatureTensor:
    """Pointwise affine transform alpha * t + beta."""
    if len(cond.coords) != len(features.coords) or not np.array_equal(
        cond.coords, features.coords
    ):
        raise ContractError("condition map geometry differs from the feature tensor")
    alpha = np.asarray(cond.alpha, dtype=np.float64)
    beta = np.asarray(cond.beta, dtype=np.float64)
    if alpha.shape != features.feats.shape or beta.shape != features.feats.shape:
        raise ContractError("condition map channels differ from the feature tensor")
    return SparseFeatureTensor(features.coords, alpha * features.feats + beta, features.scale)


def cfe_apply_t(features: ad.Tensor, alpha: ad.Tensor, beta: ad.Tensor) -> ad.Tensor:
    """Differentiable variant on raw feature tensors."""
    return alpha * features + beta


class ConditionEncoder:
    """Two pointwise (1x1x1) layers mapping (qg, qa) to 2C channels.

    The output splits into alpha (softplus, strictly positive) and beta.
    The final layer starts at zero so an untrained encoder applies the
    fixed scaling softplus(0) with no shift.
    """

    def __init__(self, store: ParameterStore, name, out_channels, hidden=16):
        self.out_channels = out_channels
        self.w1 = store.create(f"{name}.lift.weight", (2, hidden))
        self.b1 = store.create(f"{name}.lift.bias", (hidden,))
        self.w2 = store.create(f"{name}.head.weight", (hidden, 2 * out_channels))
        self.b2 = store.create(f"{name}.head.bias", (2 * out_channels,))
        # zero head => deterministic startup; glorot_init must skip it
        self.zero_init_names = (f"{name}.head.weight",)

    def apply(self, qvalues):
        """qvalues: (N, 2) Tensor or array -> (alpha, beta) Tensors (N, C)."""
        q = ad.as_tensor(qvalues)
        hidden = ad.leaky_relu(ad.matmul(q, self.w1) + self.b1)
        raw = ad.matmul(hidden, self.w2) + self.b2
        alpha = ad.softplus(ad.cols(raw, 0, self.out_channels))
        beta = ad.cols(raw, self.out_channels, 2 * self.out_channels)
        return alpha, beta


def condition_encoder(qmap: QualityMap, encoder: ConditionEncoder) -> ConditionMap:
    """Evaluate the encoder on a quality map (inference convenience)."""
    alpha, beta = encoder.apply(qmap.values)
    return ConditionMap(qmap.coords, alpha.data, beta.data)


# ---------------------------------------------------------------------------
# quality map file format
# ---------------------------------------------------------------------------


def write_quality_map(path, qmap: QualityMap):
    """u32 point count, then float32 little-endian (qg, qa) per point."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(qmap)))
        inter = np.empty((len(qmap), 2), dtype="<f4")
        inter[:, 0] = qmap.qg
        inter[:, 1] = qmap.qa
        fh.write(inter.tobytes())


def read_quality_map(path, coords) -> QualityMap:
    """Attach stored values to a cloud's canonical coordinates."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4:
            raise FormatError("quality map header truncated")
        (count,) = struct.unpack("<I", head)
        raw = fh.read(8 * count)
    if len(raw) < 8 * count:
        raise FormatError("quality map data truncated")
    if count != len(coords):
        raise ContractError(
            f"quality map holds {count} points, cloud has {len(coords)}"
        )
    values = np.frombuffer(raw, dtype="<f4").reshape(-1, 2).astype(np.float64)
    return QualityMap(coords, values[:, 0], values[:, 1])
