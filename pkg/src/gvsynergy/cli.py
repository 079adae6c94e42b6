"""``gvsynergy`` command-line tool.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 failed
verification. ``GVS_THREADS`` overrides ``--threads``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .detection import (per_class_ap, read_predictions_csv, write_eval_csv,
                        write_predictions_csv)
from .diffcore import TensorFormatError, save_tensor
from .gaussianfield import psnr, ssim
from .parallel import resolve_threads
from .pipeline import (ConfigError, PipelineConfig, TrainingDiverged, feature_cameras, load_checkpoint,
                       predict_scene, render_scene, save_checkpoint, train)
from .scenegen import PlacementError, SceneFormatError, generate_scene, read_scene, write_ppm, write_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# --------------------------------------------------------------------------
# helpers

def _blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(paths) -> str:
    """Git-style hash over files: sha1 of sorted 'relpath blob-sha' lines."""
    lines = []
    for root in paths:
        root = Path(root)
        files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
        for f in files:
            if f.name == MANIFEST_NAME:
                continue
            rel = f.name if f == root else f.relative_to(root).as_posix()
            lines.append(f"{rel} {_blob_hash(f.read_bytes())}")
    return hashlib.sha1("\n".join(sorted(lines)).encode()).hexdigest()


def write_manifest(out_dir, command, argv, config=None, seed=None, inputs=(), outputs=(), started=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "input_hash": content_hash([p for p in inputs if Path(p).exists()]),
        "outputs": [str(p) for p in outputs],
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started or time.time())),
        "duration_s": round(time.time() - (started or time.time()), 6),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def parse_size(text):
    try:
        w, h = text.lower().split("x")
        size = (int(w), int(h))
    except ValueError:
        raise UsageError(f"--size must look like 64x64, got {text!r}") from None
    if min(size) < 4 or size[0] % 4 or size[1] % 4:
        raise UsageError(f"--size sides must be positive multiples of 4, got {text!r}")
    return size


def parse_threads(text):
    env = os.environ.get("GVS_THREADS")
    if env:
        return [resolve_threads(None)]
    try:
        out = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--threads must be a comma list of integers, got {text!r}") from None
    if not out or min(out) < 1:
        raise UsageError("--threads values must be >= 1")
    return out


def load_scenes(path):
    """A scene directory, or a directory of ``scene_*`` directories."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data directory not found: {path}")
    if (path / "scene.json").exists():
        return [read_scene(path)]
    dirs = sorted(p for p in path.iterdir() if p.is_dir() and (p / "scene.json").exists())
    if not dirs:
        raise SceneFormatError(f"{path}: no scene directories found")
    return [read_scene(d) for d in dirs]


# --------------------------------------------------------------------------
# commands

def cmd_gen(args, argv):
    t0 = time.time()
    size = parse_size(args.size)
    out = Path(args.out)
    written = []
    for i in range(args.scenes):
        try:
            scene = generate_scene(args.seed + i, args.objects, size, args.views)
        except PlacementError as e:
            raise PlacementError(f"scene {i} (seed {args.seed + i}): {e}") from None
        written.append(write_scene(scene, out / f"scene_{i:04d}"))
    cfg = {"seed": args.seed, "scenes": args.scenes, "objects": args.objects, "views": args.views,
           "size": list(size)}
    write_manifest(out, "gen", argv, cfg, args.seed, (), written, t0)
    print(f"wrote {len(written)} scene(s) to {out}")
    return EXIT_OK


def cmd_train(args, argv):
    t0 = time.time()
    config = PipelineConfig.load(args.config)
    if os.environ.get("GVS_THREADS") or args.threads:
        config = config.replace(threads=resolve_threads(args.threads))
    scenes = load_scenes(args.data)
    held = load_scenes(args.heldout) if args.heldout else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(row):
        if not args.quiet:
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)

    state, metrics = train(config, scenes, held, out_dir=out, log=log)
    ckpt = save_checkpoint(out / "checkpoint", config, state)
    (out / "metrics.csv").write_text(metrics)
    inputs = [args.config, args.data] + ([args.heldout] if args.heldout else [])
    write_manifest(out, "train", argv, config.to_dict(), config.seed, inputs,
                   [ckpt, out / "metrics.csv"], t0)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args, argv):
    t0 = time.time()
    if (args.ckpt is None) == (args.predictions is None):
        raise UsageError("eval needs exactly one of --ckpt or --predictions")
    if args.iou not in (0.25, 0.5):
        raise UsageError("--iou must be 0.25 or 0.5")
    scenes = load_scenes(args.data)
    gts = {i: s.boxes for i, s in enumerate(scenes)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.ckpt is not None:
        config, state = load_checkpoint(args.ckpt)
        preds = {i: predict_scene(config, s, state) for i, s in enumerate(scenes)}
        write_predictions_csv(out / "predictions.csv", preds)
        outputs.append(out / "predictions.csv")
        inputs = [args.ckpt, args.data]
    else:
        if not Path(args.predictions).exists():
            raise FileNotFoundError(f"predictions file not found: {args.predictions}")
        preds = read_predictions_csv(args.predictions)
        inputs = [args.predictions, args.data]
    aps = per_class_ap(preds, gts, args.iou)
    write_eval_csv(out / "eval.csv", aps)
    outputs.append(out / "eval.csv")
    m = float(np.mean(list(aps.values()))) if aps else 0.0
    print(f"class  AP@{args.iou}")
    for k, ap in sorted(aps.items()):
        print(f"{k:5d}  {ap:.3f}")
    print(f"mAP@{args.iou} = {m:.3f}")
    write_manifest(out, "eval", argv, {"iou": args.iou}, None, inputs, outputs, t0)
    return EXIT_OK


def cmd_render(args, argv):
    t0 = time.time()
    config, state = load_checkpoint(args.ckpt)
    scene = read_scene(args.scene)
    if not 0 <= args.view < scene.n_views:
        raise UsageError(f"--view must be in [0, {scene.n_views}), got {args.view}")
    img = render_scene(config, scene, state, args.view)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ppm = out / f"render_view_{args.view:03d}.ppm"
    write_ppm(ppm, img)
    save_tensor(out / f"render_view_{args.view:03d}.gvt", img)
    gt = scene.images[args.view]
    p, s = psnr(img, gt), ssim(img, gt)
    print(f"PSNR {p:.3f} dB  SSIM {s:.4f}")
    write_manifest(out, "render", argv, {"view": args.view, "psnr": p, "ssim": s}, config.seed,
                   [args.ckpt, args.scene], [ppm], t0)
    return EXIT_OK


def cmd_gradcheck(args, argv):
    from .verify import resolve_checks, run_gradient_suite

    t0 = time.time()
    try:
        names = resolve_checks(args.module)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    results = run_gradient_suite(names)
    print("check,kind,max_rel_err,tolerance,status")
    for r in results:
        print(f"{r.name},{r.kind},{r.max_error:.3e},{r.tolerance:g},{'ok' if r.passed else 'FAIL'}")
    if args.out:
        write_manifest(args.out, "gradcheck", argv, {"module": args.module}, None, (), (), t0)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailed(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def _bench_case(kernel, rng):
    """Returns (callable(threads) -> array, item count, unit)."""
    from .gaussianfield.render import render
    from .lifting import lift_features
    from .pipeline import default_grid
    from .voxelfusion import voxelize

    grid = default_grid()
    if kernel == "lift":
        scene = generate_scene(0)
        cams = feature_cameras(scene, (16, 16))
        maps = rng.normal(size=(scene.n_views, 32, 16, 16))
        return (lambda t: lift_features(maps, cams, grid, t).values), grid.n_voxels, "voxels/s"
    if kernel == "voxelize":
        n = 10_000
        lo, hi = np.array(grid.origin), np.array(grid.origin) + grid.voxel_size * np.array(grid.dims)
        pos = rng.uniform(lo - 0.5, hi + 0.5, size=(n, 3))
        feats = rng.normal(size=(n, 64))
        return (lambda t: voxelize(pos, feats, grid, t).volume), n, "gaussians/s"
    if kernel == "render":
        from .gaussianfield import GaussianSet
        scene = generate_scene(0)
        cam = scene.cameras[0]
        n = 2000
        pos = rng.uniform([0.5, 0.5, 0.2], [5.9, 5.9, 2.3], size=(n, 3))
        q = rng.normal(size=(n, 4))
        gs = GaussianSet(positions=pos, opacity=rng.uniform(0.2, 0.9, n), weight=np.ones(n),
                         latent=np.zeros((n, 64)), source_view=np.zeros(n, dtype=np.int64),
                         pixel=np.arange(n), depth=np.ones(n), sh=rng.normal(0.0, 0.3, (n, 3, 4)),
                         rotation=q / np.linalg.norm(q, axis=1, keepdims=True),
                         scale=rng.uniform(0.03, 0.15, (n, 3)))
        W, H = cam.image_size
        return (lambda t: render(gs, cam, threads=t)), W * H, "pixels/s"
    raise UsageError(f"unknown kernel {kernel!r}")


def cmd_bench(args, argv):
    t0 = time.time()
    threads = parse_threads(args.threads)
    run, items, unit = _bench_case(args.kernel, np.random.default_rng(args.seed))
    reference = None
    rows = []
    for t in threads:
        run(t)  # warm-up
        times, out = [], None
        for _ in range(args.repeats):
            s = time.perf_counter()
            out = np.asarray(run(t))
            times.append(time.perf_counter() - s)
        med = statistics.median(times)
        if reference is None:
            reference = out
        identical = bool(np.array_equal(out, reference))
        rows.append([args.kernel, t, f"{med:.6f}", f"{items / med:.1f}", unit, identical])
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["kernel", "threads", "median_s", "throughput", "unit", "identical"])
    w.writerows(rows)
    if args.out:
        write_manifest(args.out, "bench", argv, {"kernel": args.kernel, "threads": threads,
                                                 "repeats": args.repeats}, args.seed, (), (), t0)
    if not all(r[-1] for r in rows):
        raise VerificationFailed("parallel output differs from the first thread count")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="gvsynergy", description="Gaussian-voxel multi-view 3D detection toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=1)
    g.add_argument("--objects", type=int, default=4)
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--size", default="64x64")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--heldout", default=None, help="scenes used for per-epoch mAP and PSNR")
    t.add_argument("--out", required=True)
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a predictions CSV")
    e.add_argument("--ckpt", default=None)
    e.add_argument("--predictions", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--iou", type=float, default=0.25)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a view from the fused Gaussians")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--out", default=".")
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--module", default="all")
    c.add_argument("--out", default=None, help="directory for the run manifest")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time a parallel kernel at several thread counts")
    b.add_argument("--kernel", required=True, choices=["lift", "voxelize", "render"])
    b.add_argument("--threads", default="1")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None, help="directory for the run manifest")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, argv)
    except UsageError as e:
        print(f"gvsynergy {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailed as e:
        print(f"gvsynergy {args.command}: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except TrainingDiverged as e:
        print(f"gvsynergy {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, ConfigError, SceneFormatError, TensorFormatError, PlacementError,
            ValueError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"gvsynergy {args.command}: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
