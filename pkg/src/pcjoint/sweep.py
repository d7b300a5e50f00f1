"""Experiment orchestration: fixed configurations, quality-grid sweeps,
Pareto extraction, view-dependent maps and plot-data emission."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .conditioning import QualityMap, step_quality_map
from .errors import DomainError
from .metrics import (
    CSV_COLUMNS,
    RDCurve,
    RDPoint,
    bpp,
    symmetric_d1,
    write_rd_csv,
    y_psnr,
    yuv_psnr,
)
from .model import CodecModel, decode, encode
from .voxels import VoxelCloud

# the fixed content-independent configuration set (qg, qa)
FIXED_CONFIGS = ((0.05, 0.1), (0.1, 0.2), (0.2, 0.4), (0.4, 0.8))


def evaluate_config(model: CodecModel, cloud: VoxelCloud, qg, qa) -> RDPoint:
    """Encode/decode at one uniform quality pair and measure everything."""
    qmap = QualityMap.uniform(cloud.coords, qg, qa)
    stream = encode(model, cloud, qmap)
    data = stream.to_bytes()
    recon = decode(model, data)
    return RDPoint(
        bpp=bpp(8 * len(data), cloud),
        d1_psnr=symmetric_d1(recon, cloud, cloud.resolution),
        y_psnr=y_psnr(recon, cloud),
        yuv_psnr=yuv_psnr(recon, cloud),
        config=(qg, qa),
    )


def run_fixed_configs(model: CodecModel, cloud: VoxelCloud, csv_path=None) -> RDCurve:
    """The four content-independent quality pairs, as an RD curve."""
    points = [evaluate_config(model, cloud, qg, qa) for qg, qa in FIXED_CONFIGS]
    if csv_path:
        write_rd_csv(csv_path, points)
    return RDCurve(points)


def sweep_grid(step):
    """Quality levels {step, 2 step, ..., 1} (q = 0 is excluded)."""
    if not 0.0 < step <= 1.0:
        raise DomainError("step must be in (0, 1]")
    count = int(np.ceil(1.0 / step - 1e-12))
    return [round((i + 1) * step, 10) for i in range(count)]


def _cloud_hash(cloud: VoxelCloud):
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(cloud.coords).tobytes())
    digest.update(np.ascontiguousarray(cloud.attrs).tobytes())
    digest.update(str(cloud.resolution).encode())
    return digest.hexdigest()[:16]


def run_sweep(model: CodecModel, cloud: VoxelCloud, step, cache_dir=None):
    """Encode at every grid pair; results are cached per (model, cloud, config).

    Returns the list of RDPoints in grid order (qg outer, qa inner). A rerun
    with a warm cache performs no encodes.
    """
    levels = sweep_grid(step)
    cloud_key = _cloud_hash(cloud)
    points = []
    for qg in levels:
        for qa in levels:
            cache_file = None
            if cache_dir:
                os.makedirs(cache_dir, exist_ok=True)
                key = f"{model.hash:016x}_{cloud_key}_{qg:.6f}_{qa:.6f}"
                cache_file = os.path.join(cache_dir, key + ".json")
            if cache_file and os.path.exists(cache_file):
                with open(cache_file) as fh:
                    row = json.load(fh)
                points.append(RDPoint(
                    bpp=row["bpp"], d1_psnr=row["d1"], y_psnr=row["y"],
                    yuv_psnr=row["yuv"],
                    joint_score=row.get("joint"),
                    config=(qg, qa),
                ))
                continue
            point = evaluate_config(model, cloud, qg, qa)
            points.append(point)
            if cache_file:
                with open(cache_file, "w") as fh:
                    json.dump(
                        {"bpp": point.bpp, "d1": point.d1_psnr, "y": point.y_psnr,
                         "yuv": point.yuv_psnr, "joint": point.joint_score}, fh)
    return points


def pareto_front(points, rate_key="bpp", quality_key="yuv_psnr"):
    """Maximal non-dominated subset, sorted by rate.

    A point is dominated when another has rate <= and quality >= with one
    strict; rate ties keep the higher quality.
    """
    if not points:
        raise DomainError("empty point set")
    front = []
    for p in points:
        rp, qp = getattr(p, rate_key), getattr(p, quality_key)
        dominated = False
        for q in points:
            if q is p:
                continue
            rq, qq = getattr(q, rate_key), getattr(q, quality_key)
            if rq <= rp and qq >= qp and (rq < rp or qq > qp):
                dominated = True
                break
        if not dominated:
            front.append(p)
    front.sort(key=lambda p: (getattr(p, rate_key), -_finite(getattr(p, quality_key))))
    dedup = []
    for p in front:
        if dedup and getattr(p, rate_key) == getattr(dedup[-1], rate_key):
            continue
        dedup.append(p)
    return dedup


def _finite(x):
    return 1e300 if x == float("inf") else x


def view_dependent_map(cloud: VoxelCloud, view_direction, q_hi, q_lo,
                       mode="gradient") -> QualityMap:
    """Quality falls off along the viewing direction (front gets q_hi).

    ``q_hi``/``q_lo`` may be scalars (applied to both modalities) or
    (qg, qa) pairs.
    """
    direction = np.asarray(view_direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        raise DomainError("view direction must be nonzero")
    toward_viewer = -direction / norm
    hi = (q_hi, q_hi) if np.isscalar(q_hi) else tuple(q_hi)
    lo = (q_lo, q_lo) if np.isscalar(q_lo) else tuple(q_lo)
    proj = cloud.coords.astype(np.float64) @ toward_viewer
    if mode == "step":
        threshold = float(np.median(proj))
        return step_quality_map(cloud.coords, toward_viewer, threshold, hi, lo)
    if mode != "gradient":
        raise DomainError(f"unknown view map mode {mode!r}")
    span = proj.max() - proj.min()
    t = (proj - proj.min()) / span if span > 1e-12 else np.ones_like(proj)
    qg = np.clip(lo[0] + (hi[0] - lo[0]) * t, 0.0, 1.0)
    qa = np.clip(lo[1] + (hi[1] - lo[1]) * t, 0.0, 1.0)
    return QualityMap(cloud.coords, qg, qa)


def emit_plot_data(curves, directory):
    """Write one CSV per (cloud, metric) plus a manifest of every series.

    ``curves`` maps a cloud name to an RDCurve (or point list). A full
    RD CSV per cloud is emitted alongside the per-metric series so curves
    can be reloaded exactly.
    """
    os.makedirs(directory, exist_ok=True)
    manifest = {"series": []}
    metric_keys = ("d1_psnr", "y_psnr", "yuv_psnr")
    for name, curve in curves.items():
        points = curve.points if isinstance(curve, RDCurve) else list(curve)
        full_path = os.path.join(directory, f"{name}_rd.csv")
        write_rd_csv(full_path, points)
        manifest["series"].append(
            {"cloud": name, "metric": "all", "path": os.path.basename(full_path),
             "points": len(points), "columns": list(CSV_COLUMNS)}
        )
        for metric in metric_keys:
            path = os.path.join(directory, f"{name}_{metric}.csv")
            with open(path, "w", newline="") as fh:
                fh.write("bpp," + metric + "\n")
                for p in points:
                    fh.write(f"{p.bpp!r},{getattr(p, metric)!r}\n")
            manifest["series"].append(
                {"cloud": name, "metric": metric, "path": os.path.basename(path),
                 "points": len(points), "columns": ["bpp", metric]}
            )
    manifest_path = os.path.join(directory, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest_path
