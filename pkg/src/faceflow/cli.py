"""Command-line entry point: data generation, annotation, training, evaluation, tools.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("faceflow")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def cmd_gen_data(args) -> int:
    from .model import synth_model
    from .synth import Lighting, build_dataset, sample_sequence

    w, h = args.size
    model = synth_model(args.seed, N=args.vertices)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(args.seed).spawn(args.sequences)]
    light = Lighting(mode=args.lighting)
    specs = [sample_sequence(model, s, n_frames=args.frames, width=w, height=h, lighting=light) for s in seeds]
    manifest = build_dataset(model, specs, args.out, model_seed=args.seed, split_seed=args.seed)
    n = len(manifest["pairs"])
    n_train = sum(r[4] == "train" for r in manifest["pairs"])
    if n == 0:
        log.warning("no pairs emitted: every frame gap had mean flow <= 1")
    print(f"wrote {n} pairs ({n_train} train, {n - n_train} test), D = {manifest['D']:.6g}, to {args.out}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    from .annotate import compute_flow_gt, compute_pncc, flow_xy_is_optical_flow
    from .io import write_flow, write_pbm
    from .model import (
        CameraPose,
        ShapeCoefficients,
        eval_shape,
        load_model,
        pose_points,
    )
    from .raster import project_to_pixels, rasterize
    from .synth import read_manifest, read_meta

    pair = Path(args.pair)
    root = pair.parent.parent
    meta = read_meta(pair / "meta.txt")
    model = load_model(root / "model.f3mm")
    D = read_manifest(root / "manifest.txt")["D"]
    vec = lambda key: np.array([float(v) for v in meta[key].split()])  # noqa: E731
    W, H = int(meta["width"]), int(meta["height"])
    ident = vec("identity")
    S1 = eval_shape(model, ShapeCoefficients(ident, vec("expression_i")))
    S2 = eval_shape(model, ShapeCoefficients(ident, vec("expression_j")))
    pose1, pose2 = CameraPose.from_params(vec("pose_i")), CameraPose.from_params(vec("pose_j"))
    xy, z = project_to_pixels(pose_points(S1, pose1), W, H)
    rm1 = rasterize(model.triangles, xy, z, W, H)
    flow = compute_flow_gt(S1, S2, pose1, pose2, rm1)
    pncc = compute_pncc(S1, pose1, rm1, W, H, D)
    ok, dev = flow_xy_is_optical_flow(flow, rm1, S2, pose2)
    write_flow(pair / "pncc.bin", pncc.values)
    write_flow(pair / "flow.f3df", flow)
    write_pbm(pair / "mask.pbm", flow.mask)
    mean = float(np.linalg.norm(flow.vectors[flow.mask], axis=1).mean()) if flow.mask.any() else 0.0
    print(f"{pair}: {int(flow.mask.sum())} foreground pixels, mean |flow| {mean:.4f}, xy diagnostic max dev {dev:.2e}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .train import TrainConfig, save_dffnet, train_loop

    try:
        config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    except (OSError, ValueError, TypeError) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.deterministic:
        config = TrainConfig(**{**config.__dict__, "deterministic": True})
    data = load_dataset(args.data)
    log_path = args.log or str(Path(args.out).with_suffix(".csv"))
    result = train_loop(config, data, log_path=log_path)
    save_dffnet(args.out, result.params, result.net)
    last = result.history[-1] if result.history else {}
    print(f"saved {args.out}; log {log_path}; final val AEPE-3D {last.get('val_aepe3d', float('nan')):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .train import evaluate, load_dffnet, zero_flow_baseline

    params, net = load_dffnet(args.ckpt)
    data = load_dataset(args.data)
    if args.split != "all":
        data = data.subset(args.split)
    if len(data) == 0:
        raise ValueError(f"no pairs in split {args.split!r}")
    if data.size != (net.height, net.width):
        raise ValueError(f"data is {data.size[1]}x{data.size[0]} but the network expects {net.width}x{net.height}")
    r3, r2 = evaluate(params, net, data)
    b3, b2 = zero_flow_baseline(data)
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "aepe3d", "aepe2d", "zero_aepe3d", "zero_aepe2d"])
        for k in range(len(data)):
            w.writerow([k, r3.per_pair[k], r2.per_pair[k], b3.per_pair[k], b2.per_pair[k]])
        w.writerow(["all", r3.mean, r2.mean, b3.mean, b2.mean])
    print(f"AEPE-3D {r3.mean:.4f}  AEPE-2D {r2.mean:.4f}  over {r3.pixels} px in {len(data)} pairs")
    print(f"zero-flow baseline AEPE-3D {b3.mean:.4f}  AEPE-2D {b2.mean:.4f}")
    return EXIT_OK


def cmd_colorize(args) -> int:
    from .io import read_flow, write_ppm
    from .metrics import colorize_flow

    flow = read_flow(args.flow)
    write_ppm(args.out, colorize_flow(flow, rmax=args.rmax))
    return EXIT_OK


def bench_raster(size: int = 224, vertices: int = 1500, iters: int = 1000, seed: int = 0):
    """Time rasterization plus PNCC encoding of one posed mesh; returns per-frame seconds."""
    from threadpoolctl import threadpool_limits

    from .annotate import compute_pncc
    from .model import CameraPose, eval_shape, pose_points, synth_model
    from .raster import project_to_pixels, rasterize

    model = synth_model(seed, N=vertices)
    S = eval_shape(model, model.zero_coefficients())
    scale = 0.4 * size
    pose = CameraPose.from_params([0.1, 0.2, 0.0, size / 2 / scale, size / 2 / scale, 2.0, scale])
    D = float(pose_points(S, pose)[2].max())

    def frame():
        xy, z = project_to_pixels(pose_points(S, pose), size, size)
        rm = rasterize(model.triangles, xy, z, size, size)
        return compute_pncc(S, pose, rm, size, size, D)

    with threadpool_limits(limits=1):
        frame()  # compile
        times = np.empty(iters)
        for k in range(iters):
            t0 = time.perf_counter()
            frame()
            times[k] = time.perf_counter() - t0
    return times


def cmd_bench_raster(args) -> int:
    times = bench_raster(args.size, args.vertices, args.iters, args.seed) * 1e3
    print(
        f"rasterize + PNCC {args.size}x{args.size}, {args.vertices} vertices, {args.iters} iters: "
        f"median {np.median(times):.3f} ms/frame, mean {times.mean():.3f}, p95 {np.percentile(times, 95):.3f}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="faceflow", description="Dense 3D face flow toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic labelled dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--sequences", type=_positive, required=True)
    g.add_argument("--frames", type=_positive, required=True)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--out", required=True)
    g.add_argument("--vertices", type=_positive, default=1500)
    g.add_argument("--lighting", choices=("head", "world"), default="head")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("annotate", help="recompute flow, PNCC and mask of a pair from its metadata")
    a.add_argument("--pair", required=True)
    a.set_defaults(func=cmd_annotate)

    t = sub.add_parser("train", help="train the flow network")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value file of training-config overrides")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="per-epoch CSV log (default: next to the checkpoint)")
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("colorize", help="colour-code an F3DF flow file")
    c.add_argument("--flow", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--rmax", type=float)
    c.set_defaults(func=cmd_colorize)

    b = sub.add_parser("bench-raster", help="time rasterization and PNCC encoding")
    b.add_argument("--size", type=_positive, default=224)
    b.add_argument("--vertices", type=_positive, default=1500)
    b.add_argument("--iters", type=_positive, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench_raster)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .train import NumericalError

    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
