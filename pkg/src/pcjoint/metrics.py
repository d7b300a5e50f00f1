"""Rate and quality metrics for voxel clouds.

Geometry quality is point-to-point PSNR against the resolution-derived
peak 3*(R-1)^2; attribute quality is PSNR in BT.709 full-range YUV over
nearest-neighbor associations. All symmetric metrics evaluate both
directions and report the stricter one. Exact matches map to +inf.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError

# BT.709 full-range luma weights
_KR, _KG, _KB = 0.2126, 0.7152, 0.0722

Y_WEIGHTS = (1.0, 0.0, 0.0)
YUV_WEIGHTS = (6.0 / 8.0, 1.0 / 8.0, 1.0 / 8.0)


def bpp(total_bits, cloud_or_count):
    """Bits per point over the original cardinality."""
    count = cloud_or_count if isinstance(cloud_or_count, int) else len(cloud_or_count)
    if count <= 0:
        raise DomainError("bpp needs a nonempty cloud")
    return float(total_bits) / count


# ---------------------------------------------------------------------------
# exact nearest neighbours on integer grids
# ---------------------------------------------------------------------------


def nearest_indices(query, ref, cell_shift=2):
    """Exact nearest ``ref`` row per query row, ties to the smallest index.

    Grid-hash search on integer coordinates: candidates are visited in
    expanding Chebyshev rings of cells until no farther ring can contain a
    closer (or equally close, smaller-index) point.
    """
    query = np.asarray(query, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    if len(ref) == 0 or len(query) == 0:
        raise DomainError("nearest neighbour needs nonempty sets")
    cell = 1 << cell_shift
    origin = (ref >> cell_shift).min(axis=0)
    rc = (ref >> cell_shift) - origin
    dims = rc.max(axis=0) + 1
    cell_key = (rc[:, 0] * dims[1] + rc[:, 1]) * dims[2] + rc[:, 2]
    order = np.argsort(cell_key, kind="stable")
    uniq_keys, starts = np.unique(cell_key[order], return_index=True)
    ends = np.append(starts[1:], len(order))

    qc = (query >> cell_shift) - origin
    best_d2 = np.full(len(query), np.iinfo(np.int64).max, dtype=np.int64)
    best_idx = np.full(len(query), -1, dtype=np.int64)
    active = np.arange(len(query))
    max_ring = int(np.abs(qc).max() + dims.max()) + 2
    ring = 0
    while len(active) and ring <= max_ring:
        for off in _ring_offsets(ring):
            cells = qc[active] + off
            inside = np.all((cells >= 0) & (cells < dims), axis=1)
            if not inside.any():
                continue
            sel = active[inside]
            keys = (cells[inside][:, 0] * dims[1] + cells[inside][:, 1]) * dims[2] \
                + cells[inside][:, 2]
            pos = np.searchsorted(uniq_keys, keys)
            pos = np.minimum(pos, len(uniq_keys) - 1)
            hit = uniq_keys[pos] == keys
            for qi, p in zip(sel[hit], pos[hit]):
                members = order[starts[p] : ends[p]]
                delta = ref[members] - query[qi]
                d2 = np.einsum("ij,ij->i", delta, delta)
                dj = int(d2.min())
                mj = int(members[d2 == dj].min())
                if dj < best_d2[qi] or (dj == best_d2[qi] and mj < best_idx[qi]):
                    best_d2[qi] = dj
                    best_idx[qi] = mj
        ring += 1
        # points in ring r sit at least (r-1)*cell away; keep expanding
        # while that bound could still beat (or tie) the current best
        lower = (ring - 1) * cell
        keep = (best_idx[active] < 0) | (lower * lower <= best_d2[active])
        active = active[keep]
    return best_idx, best_d2


def _ring_offsets(radius):
    if radius == 0:
        return np.zeros((1, 3), dtype=np.int64)
    rng = np.arange(-radius, radius + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    shell = np.abs(grid).max(axis=1) == radius
    return grid[shell]


def nearest_bruteforce(query, ref):
    """O(NM) oracle with identical tie-breaking."""
    query = np.asarray(query, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    idx = np.empty(len(query), dtype=np.int64)
    d2 = np.empty(len(query), dtype=np.int64)
    for i, q in enumerate(query):
        delta = ref - q
        dist = np.einsum("ij,ij->i", delta, delta)
        best = int(dist.min())
        idx[i] = int(np.nonzero(dist == best)[0][0])
        d2[i] = best
    return idx, d2


# ---------------------------------------------------------------------------
# geometry and attribute PSNR
# ---------------------------------------------------------------------------


def d1_psnr(test, ref, resolution):
    """One-directional point-to-point PSNR with peak 3*(R-1)^2."""
    _, d2 = nearest_indices(test.coords, ref.coords)
    mse = float(np.mean(d2))
    if mse == 0.0:
        return math.inf
    peak = 3.0 * (resolution - 1) ** 2
    return 10.0 * math.log10(peak / mse)


def symmetric_d1(test, ref, resolution=None):
    resolution = resolution or max(test.resolution, ref.resolution)
    return min(d1_psnr(test, ref, resolution), d1_psnr(ref, test, resolution))


def d1_mse(test, ref):
    """Mean squared nearest-neighbour distance, stricter direction."""
    _, d2a = nearest_indices(test.coords, ref.coords)
    _, d2b = nearest_indices(ref.coords, test.coords)
    return max(float(np.mean(d2a)), float(np.mean(d2b)))


def rgb_to_yuv(attrs):
    """BT.709 full range; chroma shifted into [0, 1]."""
    attrs = np.asarray(attrs, dtype=np.float64)
    r, g, b = attrs[..., 0], attrs[..., 1], attrs[..., 2]
    y = _KR * r + _KG * g + _KB * b
    u = (b - y) / (2.0 * (1.0 - _KB)) + 0.5
    v = (r - y) / (2.0 * (1.0 - _KR)) + 0.5
    return np.stack([y, u, v], axis=-1)


def _attr_psnr_directed(test, ref, weights):
    idx, _ = nearest_indices(test.coords, ref.coords)
    test_yuv = rgb_to_yuv(test.attrs)
    ref_yuv = rgb_to_yuv(ref.attrs)[idx]
    total = 0.0
    weight_sum = 0.0
    for c, w in enumerate(weights):
        if w == 0.0:
            continue
        mse = float(np.mean((test_yuv[:, c] - ref_yuv[:, c]) ** 2))
        psnr = math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
        total += w * psnr  # an exact channel propagates +inf
        weight_sum += w
    if weight_sum == 0.0:
        raise DomainError("all channel weights are zero")
    return total / weight_sum


def attr_psnr(test, ref, weights):
    """Symmetric channel-weighted attribute PSNR (stricter direction)."""
    return min(
        _attr_psnr_directed(test, ref, weights),
        _attr_psnr_directed(ref, test, weights),
    )


def y_psnr(test, ref):
    return attr_psnr(test, ref, Y_WEIGHTS)


def yuv_psnr(test, ref):
    return attr_psnr(test, ref, YUV_WEIGHTS)


def attr_mse(test, ref):
    """Symmetric mean squared RGB error over nearest-neighbour pairs."""
    out = []
    for a, b in ((test, ref), (ref, test)):
        idx, _ = nearest_indices(a.coords, b.coords)
        out.append(float(np.mean(np.sum((a.attrs - b.attrs[idx]) ** 2, axis=1))))
    return max(out)


# ---------------------------------------------------------------------------
# rate-distortion bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class RDPoint:
    bpp: float
    d1_psnr: float
    y_psnr: float
    yuv_psnr: float
    joint_score: float = None
    config: tuple = (None, None)  # (qg, qa)


@dataclass
class RDCurve:
    points: list = field(default_factory=list)

    def __post_init__(self):
        pts = sorted(self.points, key=lambda p: p.bpp)
        dedup = []
        for p in pts:
            if dedup and p.bpp == dedup[-1].bpp:
                continue
            dedup.append(p)
        self.points = dedup

    def __len__(self):
        return len(self.points)

    def column(self, key):
        return [getattr(p, key) for p in self.points]


CSV_COLUMNS = ("config_qg", "config_qa", "bpp", "d1", "y", "yuv", "joint")


def write_rd_csv(path, points):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for p in points:
            writer.writerow(
                [p.config[0], p.config[1], repr(p.bpp), repr(p.d1_psnr),
                 repr(p.y_psnr), repr(p.yuv_psnr),
                 "" if p.joint_score is None else repr(p.joint_score)]
            )


def read_rd_csv(path):
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ContractError(f"unexpected CSV columns {reader.fieldnames}")
        for row in reader:
            points.append(
                RDPoint(
                    bpp=float(row["bpp"]),
                    d1_psnr=float(row["d1"]),
                    y_psnr=float(row["y"]),
                    yuv_psnr=float(row["yuv"]),
                    joint_score=float(row["joint"]) if row["joint"] else None,
                    config=(float(row["config_qg"]), float(row["config_qa"])),
                )
            )
    return points


# ---------------------------------------------------------------------------
# Bjontegaard deltas
# ---------------------------------------------------------------------------


def bd_delta(curve_a, curve_b, metric="yuv_psnr"):
    """Average rate and distortion differences of curve B against curve A.

    Cubic fits of distortion over log10 rate (and the inverse for the rate
    delta), integrated over the overlapping interval. Returns
    (delta_rate_percent, delta_distortion).
    """
    rate_a, dist_a = _curve_arrays(curve_a, metric)
    rate_b, dist_b = _curve_arrays(curve_b, metric)
    if len(rate_a) < 4 or len(rate_b) < 4:
        raise DomainError("Bjontegaard deltas need at least 4 points per curve")
    log_a, log_b = np.log10(rate_a), np.log10(rate_b)

    # distortion delta over the overlapping log-rate interval
    lo, hi = max(log_a.min(), log_b.min()), min(log_a.max(), log_b.max())
    if hi <= lo:
        raise DomainError("rate ranges do not overlap")
    delta_d = _poly_gap(log_a, dist_a, log_b, dist_b, lo, hi)

    # rate delta over the overlapping distortion interval
    lo, hi = max(dist_a.min(), dist_b.min()), min(dist_a.max(), dist_b.max())
    if hi <= lo:
        raise DomainError("distortion ranges do not overlap")
    gap = _poly_gap(dist_a, log_a, dist_b, log_b, lo, hi)
    delta_rate = (10.0**gap - 1.0) * 100.0
    return delta_rate, delta_d


def _curve_arrays(curve, metric):
    points = curve.points if isinstance(curve, RDCurve) else list(curve)
    rate = np.array([p.bpp for p in points], dtype=np.float64)
    dist = np.array([getattr(p, metric) for p in points], dtype=np.float64)
    if np.any(rate <= 0) or not np.all(np.isfinite(dist)):
        raise DomainError("curves need positive rates and finite distortions")
    order = np.argsort(rate)
    return rate[order], dist[order]


def _poly_gap(xa, ya, xb, yb, lo, hi):
    pa = np.polyfit(xa, ya, 3)
    pb = np.polyfit(xb, yb, 3)
    ia, ib = np.polyint(pa), np.polyint(pb)
    va = np.polyval(ia, hi) - np.polyval(ia, lo)
    vb = np.polyval(ib, hi) - np.polyval(ib, lo)
    return (vb - va) / (hi - lo)
