"""Command-line interface: the full pipeline as subcommands.

    synth       generate a synthetic dataset directory
    train       optimize a model against a dataset directory
    render      write color/depth/normal/semantic buffers for one view
    mesh        extract a TSDF-fused triangle mesh from a checkpoint
    eval        metric report, from meshes or from a checkpoint + dataset
    check-grad  finite-difference gradient check
    planes      print the plane indicators of a checkpoint

Config precedence for `train`: built-in defaults < config file < flags.
Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset_io import ParseError, read_dataset, read_ply, write_dataset, write_ply
from .evaluate import evaluate_state, fuse_mesh
from .geometry import InvalidInputError
from .losses import LossWeights
from .meshing import TriangleMesh, geo_metrics
from .planes import PlaneFitError
from .synthetic import GenerationError, SceneSpec, generate
from .trainer import TrainConfig, check_gradients, render_view, train

DOMAIN_ERRORS = (
    InvalidInputError,
    ParseError,
    CheckpointError,
    PlaneFitError,
    GenerationError,
    FileNotFoundError,
    NotADirectoryError,
    ValueError,
)

_PRESETS = {"box-room": "indoor", "street": "urban"}

def _read_mesh(path) -> TriangleMesh:
    v, f, _ = read_ply(path)
    if f is None:
        f = np.zeros((0, 3), dtype=np.int64)
    return TriangleMesh(v, f)


# train keys the user can set via config file or flags; `seed` and
# `total_steps` get dedicated flags shared with the other subcommands
_TRAIN_FLAG_SKIP = ("weights", "seed", "total_steps")
_TRAIN_KEYS = [
    f for f in dataclasses.fields(TrainConfig) if f.name != "weights"
]
_TRAIN_FLAG_KEYS = [f for f in _TRAIN_KEYS if f.name not in _TRAIN_FLAG_SKIP]
_WEIGHT_KEYS = list(dataclasses.fields(LossWeights))


def _add_train_keys(p: argparse.ArgumentParser):
    g = p.add_argument_group(
        "training config keys (file keys use the same names)"
    )
    for f in _TRAIN_FLAG_KEYS:
        typ = float if f.type == "float" else int
        g.add_argument(f"--{f.name}", type=typ, default=None,
                       help=f"default {f.default}")
    for f in _WEIGHT_KEYS:
        g.add_argument(f"--weight_{f.name}", type=float, default=None,
                       help=f"default {f.default}")


def _parse_config_file(path: str) -> dict:
    """`key = value` lines; '#' starts a comment; keys mirror the flags."""
    known = {f.name: (float if f.type == "float" else int)
             for f in _TRAIN_KEYS}
    known.update({f"weight_{f.name}": float for f in _WEIGHT_KEYS})
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{ln}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ParseError(f"{path}:{ln}: unknown config key '{key}'")
            try:
                out[key] = known[key](val)
            except ValueError:
                raise ParseError(f"{path}:{ln}: bad value for '{key}': {val}")
    return out


def build_train_config(args) -> TrainConfig:
    """Merge defaults < config file < command-line flags.

    Schedule breakpoints not given explicitly are scaled from the reference
    schedule to the requested number of steps.
    """
    merged = {}
    if getattr(args, "config", None):
        merged.update(_parse_config_file(args.config))
    for f in _TRAIN_KEYS:
        v = getattr(args, f.name, None)
        if v is not None and f.name != "seed":
            merged[f.name] = v
    if args.total_steps is not None:
        merged["total_steps"] = args.total_steps
    wkw = {}
    for f in _WEIGHT_KEYS:
        key = f"weight_{f.name}"
        if key in merged:
            wkw[f.name] = merged.pop(key)
        v = getattr(args, key, None)
        if v is not None:
            wkw[f.name] = v
    total = merged.pop("total_steps", 5000)
    cfg = TrainConfig.scaled(total, **merged)
    if wkw:
        cfg.weights = LossWeights(**{**dataclasses.asdict(cfg.weights), **wkw})
    return cfg


# ------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    spec = SceneSpec(
        mode=_PRESETS[args.preset],
        n_cameras=args.n_cameras, width=args.width, height=args.height,
        hfov_deg=args.hfov_deg, texture=args.texture,
        depth_sigma=args.depth_sigma, normal_sigma_deg=args.normal_sigma_deg,
        label_flip_rate=args.label_flip_rate, n_points=args.n_points,
        seed=args.seed,
    )
    ds = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    write_dataset(ds, args.out)
    print(f"wrote {ds.n_views}-view {spec.mode} dataset to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = read_dataset(args.data)
    cfg = build_train_config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)

    def progress(step, report):
        if args.verbose and (step + 1) % cfg.log_every == 0:
            print(report.log_line(step + 1), flush=True)

    result = train(ds, cfg, progress=progress)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(ckpt, result.state)
    with open(os.path.join(args.out, "loss_log.txt"), "w") as fh:
        fh.write("loss_log v1\n")
        for line in result.log_lines:
            fh.write(line + "\n")
    if result.aborted:
        print(f"training aborted: {result.abort_reason}", file=sys.stderr)
        print(f"last good checkpoint written to {ckpt}", file=sys.stderr)
        return 1
    print(f"trained {cfg.total_steps} steps; checkpoint at {ckpt}")
    return 0


def cmd_render(args) -> int:
    state = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    if not (0 <= args.view < ds.n_views):
        raise InvalidInputError(
            f"view {args.view} out of range (dataset has {ds.n_views})"
        )
    buffers, depth_scale = render_view(state, ds.cameras[args.view])
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"view_{args.view:03d}")
    from PIL import Image

    rgb8 = np.clip(buffers.color * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(rgb8).save(stem + "_color.png")
    acc = buffers.acc_alpha
    valid = acc >= 0.5
    depth = np.where(valid, buffers.depth / np.where(valid, acc, 1.0), 0.0)
    np.save(stem + "_depth.npy", depth * depth_scale)
    np.save(stem + "_normal.npy", buffers.normal)
    np.save(stem + "_acc.npy", acc)
    np.save(stem + "_sem.npy", buffers.sem)
    print(f"wrote {stem}_color.png and buffers")
    return 0


def cmd_mesh(args) -> int:
    state = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    mesh = fuse_mesh(state, ds.cameras, ds.points, voxel_size=args.tsdf_voxel)
    write_ply(args.out, mesh.vertices, faces=mesh.triangles)
    print(f"wrote mesh with {len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles to {args.out}")
    return 0


def _crop_to_gt(pred: TriangleMesh, gt: TriangleMesh,
                margin: float) -> TriangleMesh:
    """Drop predicted triangles whose centroid lies outside the reference
    mesh bounding box plus margin."""
    if len(pred.triangles) == 0:
        return pred
    lo = gt.vertices.min(axis=0) - margin
    hi = gt.vertices.max(axis=0) + margin
    cent = pred.vertices[pred.triangles].mean(axis=1)
    keep = np.all((cent >= lo) & (cent <= hi), axis=1)
    return TriangleMesh(pred.vertices, pred.triangles[keep])


def cmd_eval(args) -> int:
    print("metrics v1")
    if args.pred is not None:
        if args.gt is None:
            raise InvalidInputError("--pred requires --gt")
        pred = _read_mesh(args.pred)
        gt = _read_mesh(args.gt)
        if args.crop_to_gt:
            pred = _crop_to_gt(pred, gt, args.threshold)
        g = geo_metrics(pred, gt, samples=args.samples,
                        threshold=args.threshold, seed=args.seed or 0)
        for name in ("acc", "comp", "cd", "prec", "recall", "f1"):
            print(f"{name} {getattr(g, name):.6g}")
        return 0
    if args.ckpt is None or args.data is None:
        raise InvalidInputError("eval needs --pred/--gt or --ckpt/--data")
    state = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    report = evaluate_state(state, ds, tsdf_voxel=args.tsdf_voxel,
                            threshold=args.threshold, samples=args.samples,
                            seed=args.seed or 0)
    print(f"psnr {report.psnr:.6g}")
    for c, v in sorted(report.iou.items()):
        print(f"iou_{c} {v:.6g}")
    g = report.geo
    for name in ("acc", "comp", "cd", "prec", "recall", "f1"):
        print(f"{name} {getattr(g, name):.6g}")
    return 0


def cmd_check_grad(args) -> int:
    report = check_gradients(seed=args.seed or 0, probes=args.probes,
                             fd_step=args.fd_step, tolerance=args.tolerance)
    worst = report.worst_by_group()
    for (term, group), err in sorted(worst.items()):
        print(f"{term:>20s} {group:<12s} max_rel_err {err:.3e}")
    print(f"overall max_rel_err {report.max_rel_err:.3e} "
          f"(tolerance {report.tolerance:g})")
    if not report.passed:
        for e in report.failures()[:10]:
            print(f"FAIL {e.term}/{e.key}[{e.index}] "
                  f"analytic {e.analytic:.6g} fd {e.fd:.6g}", file=sys.stderr)
        return 1
    return 0


def cmd_planes(args) -> int:
    state = load_checkpoint(args.ckpt)
    p = state.planes
    print("planes v1")
    print(f"n_g {p.n_g[0]:.17g} {p.n_g[1]:.17g} {p.n_g[2]:.17g}")
    print(f"d_f {p.d_f:.17g}")
    print(f"d_c {p.d_c:.17g}")
    print(f"has_ceiling {int(p.has_ceiling)}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = argparse.ArgumentParser(
        prog="structsplat",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="deterministic seed (default: subcommand default)")
        p.add_argument("--threads", type=int, default=1,
                       help="cap on compute threads")
        p.add_argument("--verbose", action="store_true",
                       help="progress output")

    p = sub.add_parser("synth", formatter_class=fmt,
                       help="generate a synthetic dataset directory")
    p.add_argument("--preset", choices=sorted(_PRESETS), default="box-room")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-cameras", dest="n_cameras", type=int, default=24)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--hfov-deg", dest="hfov_deg", type=float, default=70.0)
    p.add_argument("--texture", choices=("checker", "noise"),
                   default="checker")
    p.add_argument("--depth-sigma", dest="depth_sigma", type=float,
                   default=0.0, help="multiplicative depth-prior noise")
    p.add_argument("--normal-sigma-deg", dest="normal_sigma_deg", type=float,
                   default=0.0, help="normal-prior angular noise")
    p.add_argument("--label-flip-rate", dest="label_flip_rate", type=float,
                   default=0.0, help="semantic-prior label flip probability")
    p.add_argument("--n-points", dest="n_points", type=int, default=2000)
    common(p)
    p.set_defaults(func=cmd_synth, seed_default=0)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None,
                   help="text config file, 'key = value' per line")
    p.add_argument("--steps", dest="total_steps", type=int, default=None,
                   help="total optimization steps (default 5000; schedule "
                        "breakpoints scale accordingly)")
    _add_train_keys(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", formatter_class=fmt,
                       help="render one dataset view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", formatter_class=fmt,
                       help="extract a TSDF-fused mesh from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--tsdf-voxel", dest="tsdf_voxel", type=float,
                   default=0.02)
    common(p)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="metric report from meshes or checkpoint+dataset")
    p.add_argument("--pred", default=None, help="predicted mesh PLY")
    p.add_argument("--gt", default=None, help="reference mesh PLY")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--threshold", type=float, default=0.05,
                   help="distance threshold for precision/recall")
    p.add_argument("--samples", type=int, default=200000)
    p.add_argument("--tsdf-voxel", dest="tsdf_voxel", type=float,
                   default=0.02)
    p.add_argument("--crop-to-gt", dest="crop_to_gt", action="store_true",
                   help="crop predicted mesh to the reference bounding box "
                        "before sampling (off by default; metrics are "
                        "reported uncropped unless given)")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-grad", formatter_class=fmt,
                       help="finite-difference gradient check")
    p.add_argument("--probes", type=int, default=3,
                   help="probed entries per term/parameter pair")
    p.add_argument("--fd-step", dest="fd_step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    common(p)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("planes", formatter_class=fmt,
                       help="print the plane indicators of a checkpoint")
    p.add_argument("--ckpt", required=True)
    common(p)
    p.set_defaults(func=cmd_planes)

    return ap


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    if getattr(args, "seed", None) is None and hasattr(args, "seed_default"):
        args.seed = args.seed_default
    if getattr(args, "threads", 1) != 1:
        try:
            import numba

            numba.set_num_threads(max(1, args.threads))
        except (ImportError, ValueError):
            pass
    try:
        return args.func(args)
    except DOMAIN_ERRORS as e:
        print(f"error [{type(e).__name__}]: {e}", file=sys.stderr)
        return 1


def main():  # console entry point
    sys.exit(run())


if __name__ == "__main__":
    main()
