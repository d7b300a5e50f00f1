"""Training data: procedural voxel surfaces plus augmentation.

Samples are cube crops with smooth colored shells (spheres, planes,
superquadrics) carrying gradient/noise colors, each paired with a fresh
random quality map. A PLY directory can be substituted for the synthetic
generator.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .conditioning import QualityMap, sample_quality_map
from .errors import DomainError
from .ply_io import load_ply
from .voxels import VoxelCloud, canonical_order

MIN_OCCUPANCY = 200
MAX_OCCUPANCY = 5000


@dataclass
class TrainSample:
    cloud: VoxelCloud
    qmap: QualityMap
    seed: int


def _grid(edge):
    axis = np.arange(edge)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


def _shell_coords(edge, rng):
    """Occupied voxels of one random smooth surface inside the cube."""
    grid = _grid(edge).astype(np.float64) + 0.5
    kind = rng.choice(("sphere", "plane", "superquadric"))
    if kind == "sphere":
        center = rng.uniform(0.3 * edge, 0.7 * edge, size=3)
        radius = rng.uniform(0.2 * edge, 0.45 * edge)
        thickness = rng.uniform(0.5, 0.9)
        dist = np.linalg.norm(grid - center, axis=1)
        mask = np.abs(dist - radius) < thickness
    elif kind == "plane":
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        anchor = rng.uniform(0.3 * edge, 0.7 * edge, size=3)
        thickness = rng.uniform(0.5, 0.8)
        mask = np.abs((grid - anchor) @ normal) < thickness
    else:
        center = rng.uniform(0.35 * edge, 0.65 * edge, size=3)
        radii = rng.uniform(0.2 * edge, 0.45 * edge, size=3)
        p = rng.uniform(1.5, 4.0)
        r = (np.abs((grid - center) / radii) ** p).sum(axis=1)
        band = rng.uniform(0.08, 0.2)
        mask = np.abs(r - 1.0) < band
    return _grid(edge)[mask]


def _procedural_colors(coords, edge, rng):
    """Linear color ramp along a random direction plus mild noise."""
    base = rng.uniform(0.15, 0.85, size=3)
    direction = rng.normal(size=3)
    direction /= max(np.linalg.norm(direction), 1e-9)
    slope = rng.uniform(-0.6, 0.6, size=3)
    ramp = (coords.astype(np.float64) @ direction) / edge
    colors = base[None, :] + ramp[:, None] * slope[None, :]
    colors += rng.normal(scale=rng.uniform(0.0, 0.05), size=colors.shape)
    return np.clip(colors, 0.0, 1.0)


def make_cloud(edge, rng) -> VoxelCloud:
    """One synthetic surface with occupancy in [200, 5000]."""
    if edge & (edge - 1):
        raise DomainError("edge must be a power of two")
    for _ in range(64):
        coords = _shell_coords(edge, rng)
        if MIN_OCCUPANCY <= len(coords) <= MAX_OCCUPANCY:
            break
        if len(coords) > MAX_OCCUPANCY:
            keep = rng.choice(len(coords), size=MAX_OCCUPANCY, replace=False)
            coords = coords[np.sort(keep)]
            break
    else:
        raise DomainError("could not synthesize a surface in the occupancy band")
    coords = coords[canonical_order(coords)]
    attrs = _procedural_colors(coords, edge, rng)
    return VoxelCloud(coords, attrs, edge)


def fresh_quality_map(coords, rng) -> QualityMap:
    """Uniform map with probability 0.5, otherwise a random gradient."""
    mode = "uniform" if rng.uniform() < 0.5 else "gradient"
    return sample_quality_map(coords, mode, rng)


def synth_dataset(count, edge, seed) -> list[TrainSample]:
    """Reproducible list of samples: same seed, same dataset."""
    samples = []
    for i in range(count):
        rng = np.random.default_rng([int(seed), i])
        cloud = make_cloud(edge, rng)
        qmap = fresh_quality_map(cloud.coords, rng)
        samples.append(TrainSample(cloud, qmap, seed=i))
    return samples


def load_ply_dir(path) -> list[TrainSample]:
    """Each PLY file in the directory becomes one sample."""
    files = sorted(
        f for f in os.listdir(path) if f.lower().endswith(".ply")
    )
    if not files:
        raise DomainError(f"no PLY files in {path}")
    samples = []
    for i, name in enumerate(files):
        cloud = load_ply(os.path.join(path, name))
        rng = np.random.default_rng([0xDA7A, i])
        samples.append(TrainSample(cloud, fresh_quality_map(cloud.coords, rng), seed=i))
    return samples


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _cube_symmetries():
    """The 24 orientation-preserving axis permutation/flip combinations."""
    out = []
    perms = (
        (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)
    )
    perm_sign = {p: int(np.linalg.det(np.eye(3)[list(p)])) for p in perms}
    for perm in perms:
        for flips in range(8):
            f = ((flips >> 2) & 1, (flips >> 1) & 1, flips & 1)
            sign = perm_sign[perm] * (-1) ** sum(f)
            if sign == 1:
                out.append((perm, f))
    return out


_SYMMETRIES = _cube_symmetries()


def apply_symmetry(coords, edge, perm, flips):
    c = np.asarray(coords, dtype=np.int64)[:, list(perm)]
    for axis, flip in enumerate(flips):
        if flip:
            c[:, axis] = edge - 1 - c[:, axis]
    return c


def augment(sample: TrainSample, rng) -> TrainSample:
    """Color jitter plus one of the 24 cube rotations; quality values ride
    along with their points."""
    cloud = sample.cloud
    offset = rng.uniform(-0.1, 0.1, size=3)
    scale = rng.uniform(0.9, 1.1, size=3)
    attrs = np.clip(cloud.attrs * scale[None, :] + offset[None, :], 0.0, 1.0)
    perm, flips = _SYMMETRIES[int(rng.integers(len(_SYMMETRIES)))]
    coords = apply_symmetry(cloud.coords, cloud.resolution, perm, flips)
    order = canonical_order(coords)
    new_cloud = VoxelCloud(coords[order], attrs[order], cloud.resolution)
    qmap = QualityMap(new_cloud.coords, sample.qmap.qg[order], sample.qmap.qa[order])
    return TrainSample(new_cloud, qmap, sample.seed)
