"""Rate-distortion figure rendering for the report paths."""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_METRIC_LABELS = {
    "d1_psnr": "D1-PSNR [dB]",
    "y_psnr": "Y-PSNR [dB]",
    "yuv_psnr": "YUV-PSNR [dB]",
}


def render_rd_figures(curves, directory, metrics=("d1_psnr", "y_psnr", "yuv_psnr")):
    """One PNG per (cloud, metric) next to the delimited output.

    ``curves`` maps cloud names to RDCurve objects or point lists. Points
    with infinite quality (exact reconstructions) are dropped from the
    figure but kept in the CSVs.
    """
    os.makedirs(directory, exist_ok=True)
    written = []
    for name, curve in curves.items():
        points = getattr(curve, "points", curve)
        for metric in metrics:
            xs, ys = [], []
            for p in sorted(points, key=lambda p: p.bpp):
                value = getattr(p, metric)
                if math.isfinite(value):
                    xs.append(p.bpp)
                    ys.append(value)
            fig, ax = plt.subplots(figsize=(4.2, 3.2))
            ax.plot(xs, ys, marker="o", linewidth=1.2, markersize=4)
            ax.set_xlabel("bits per point")
            ax.set_ylabel(_METRIC_LABELS.get(metric, metric))
            ax.set_title(name)
            ax.grid(True, alpha=0.3)
            fig.tight_layout()
            path = os.path.join(directory, f"{name}_{metric}.png")
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    return written


def render_quality_grid(points, directory, name, value_key="bpp"):
    """Contour-style scatter of a sweep over the (qg, qa) plane."""
    os.makedirs(directory, exist_ok=True)
    qg = [p.config[0] for p in points]
    qa = [p.config[1] for p in points]
    values = [getattr(p, value_key) for p in points]
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    sc = ax.scatter(qg, qa, c=values, s=36, cmap="viridis")
    fig.colorbar(sc, ax=ax, label=value_key)
    ax.set_xlabel("geometry quality")
    ax.set_ylabel("attribute quality")
    ax.set_title(name)
    fig.tight_layout()
    path = os.path.join(directory, f"{name}_{value_key}_grid.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
