"""Command line interface.

Report-producing commands (sweep, fixed) write rate-distortion CSVs plus a
manifest and render the matching matplotlib figures next to them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .conditioning import QualityMap, read_quality_map, write_quality_map
from .errors import PcjointError
from .metrics import (
    RDCurve,
    bpp,
    read_rd_csv,
    symmetric_d1,
    write_rd_csv,
    y_psnr,
    yuv_psnr,
)
from .model import CodecModel, decode, encode
from .ply_io import load_ply, write_ply
from .sweep import emit_plot_data, pareto_front, run_fixed_configs, run_sweep, view_dependent_map
from .training import TrainConfig, train


def _load_model(path) -> CodecModel:
    model, _, _ = CodecModel.load(path)
    return model


def cmd_encode(args):
    cloud = load_ply(args.input)
    model = _load_model(args.model)
    if args.quality_map:
        qmap = read_quality_map(args.quality_map, cloud.coords)
    else:
        qmap = QualityMap.uniform(cloud.coords, args.qg, args.qa)
    stream = encode(model, cloud, qmap)
    data = stream.to_bytes()
    with open(args.output, "wb") as fh:
        fh.write(data)
    print(f"{len(data)} bytes, {bpp(8 * len(data), cloud):.4f} bpp over {len(cloud)} points")


def cmd_decode(args):
    model = _load_model(args.model)
    with open(args.input, "rb") as fh:
        data = fh.read()
    cloud = decode(model, data)
    write_ply(cloud, args.output)
    print(f"decoded {len(cloud)} points at resolution {cloud.resolution}")


def cmd_train(args):
    tc = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        data=args.data,
        dataset_size=args.samples,
        edge=args.edge,
        out_path=args.out,
    )
    train(tc, log=lambda msg: print(msg, flush=True))
    print(f"checkpoint written to {args.out}")


def cmd_metrics(args):
    test = load_ply(args.test)
    ref = load_ply(args.ref)
    resolution = args.resolution or max(test.resolution, ref.resolution)
    out = {
        "d1_psnr": symmetric_d1(test, ref, resolution),
        "y_psnr": y_psnr(test, ref),
        "yuv_psnr": yuv_psnr(test, ref),
    }
    if args.bits is not None:
        out["bpp"] = bpp(args.bits, ref)
    print(json.dumps(out, indent=2, sort_keys=True))


def cmd_sweep(args):
    from .plotting import render_quality_grid, render_rd_figures

    model = _load_model(args.model)
    os.makedirs(args.out, exist_ok=True)
    curves = {}
    for path in args.input:
        name = os.path.splitext(os.path.basename(path))[0]
        cloud = load_ply(path)
        points = run_sweep(model, cloud, args.step,
                           cache_dir=os.path.join(args.out, "cache"))
        write_rd_csv(os.path.join(args.out, f"{name}_sweep.csv"), points)
        front = pareto_front(points, quality_key=args.quality)
        write_rd_csv(os.path.join(args.out, f"{name}_pareto.csv"), front)
        curves[name] = RDCurve(front)
        render_quality_grid(points, args.out, name)
        print(f"{name}: {len(points)} configurations, {len(front)} on the front")
    manifest = emit_plot_data(curves, args.out)
    render_rd_figures(curves, args.out)
    print(f"manifest at {manifest}")


def cmd_fixed(args):
    from .plotting import render_rd_figures

    model = _load_model(args.model)
    cloud = load_ply(args.input)
    name = os.path.splitext(os.path.basename(args.input))[0]
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}_fixed.csv")
    curve = run_fixed_configs(model, cloud, csv_path=csv_path)
    emit_plot_data({name: curve}, out_dir)
    render_rd_figures({name: curve}, out_dir)
    for p in read_rd_csv(csv_path):
        print(f"qg={p.config[0]:.2f} qa={p.config[1]:.2f} bpp={p.bpp:.4f} "
              f"d1={p.d1_psnr:.2f} y={p.y_psnr:.2f} yuv={p.yuv_psnr:.2f}")


def cmd_pareto(args):
    points = read_rd_csv(args.infile)
    front = pareto_front(points, rate_key=args.rate, quality_key=args.quality)
    if args.out:
        write_rd_csv(args.out, front)
    for p in front:
        print(f"qg={p.config[0]} qa={p.config[1]} {args.rate}={getattr(p, args.rate)} "
              f"{args.quality}={getattr(p, args.quality)}")


def cmd_viewmap(args):
    cloud = load_ply(args.input)
    direction = np.array([float(v) for v in args.dir.split(",")])
    qmap = view_dependent_map(cloud, direction, args.hi, args.lo, mode=args.mode)
    write_quality_map(args.out, qmap)
    print(f"wrote {len(qmap)}-point quality map to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pcjoint",
        description="Joint geometry+attribute point cloud codec with per-point "
        "quality conditioning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress a PLY cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--qg", type=float, default=0.5)
    p.add_argument("--qa", type=float, default=0.5)
    p.add_argument("--quality-map", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a bitstream")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", default="synthetic", help="'synthetic' or a PLY directory")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--edge", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", help="compare two PLY clouds")
    p.add_argument("--test", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--bits", type=int, default=None,
                   help="optional coded size in bits for the bpp column")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sweep", help="quality grid sweep with Pareto front")
    p.add_argument("--model", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--quality", default="yuv_psnr")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fixed", help="the four fixed quality configurations")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fixed)

    p = sub.add_parser("pareto", help="extract the Pareto front from a CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--rate", default="bpp")
    p.add_argument("--quality", default="yuv_psnr")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("viewmap", help="view-dependent quality map")
    p.add_argument("--input", required=True)
    p.add_argument("--dir", required=True, help="view direction 'x,y,z'")
    p.add_argument("--mode", choices=("gradient", "step"), default="gradient")
    p.add_argument("--hi", type=float, default=0.8)
    p.add_argument("--lo", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viewmap)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except PcjointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
