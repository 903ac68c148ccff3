"""Command-line front end tying the modules into reproducible commands.

Exit codes: 0 success, 1 for bad arguments or unreadable inputs, 2 when a
computation fails numerically (non-invertible distortion, divergence, a
gradient suite over tolerance). Every command is deterministic given its
inputs and seed, and none writes into its input files.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import camera as cam
from . import checks
from . import fileio
from . import metrics
from . import renderer
from . import sampler
from . import trainer
from .errors import (DistortionDomainError, DivergenceError, InversionError,
                     ValidationError)

# figures cited elsewhere for cropping the 1392x512 raw KITTI frame to the
# common 1242x375 rectified size; printed for comparison, never asserted
_CITED_CROP = (1392, 512, 1242, 375)
_CITED_WIDTH_LOSS_PCT = 10.77
_CITED_HEIGHT_LOSS_PCT = 27.34


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on unknown flags; here 2 is reserved for numerical
    # failures, so argument problems are remapped to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _cmd_build_map(a) -> int:
    intr, co = fileio.load_camera(a.camera)
    t0 = time.perf_counter()
    umap = cam.build_undistortion_map(intr, co, tol=a.tol)
    dt = time.perf_counter() - t0
    fileio.save_undistortion_map(a.out, umap)
    print(f"map {umap.width}x{umap.height} built in {dt:.2f} s, "
          f"worst residual {umap.residual:.3e} (tol {umap.tolerance:g})")
    print(f"wrote {a.out}_x.pfm {a.out}_y.pfm {a.out}.json")
    return 0


def _cmd_warp(a) -> int:
    intr, co = fileio.load_camera(a.camera)
    umap = fileio.load_undistortion_map(a.map)
    src = fileio.read_image(a.src)
    depth = fileio.read_pfm(a.depth)
    pose = fileio.read_poses(a.pose)[0]
    out = sampler.synthesize_view(src, intr, co, depth, pose, umap)
    fileio.write_image(a.out, np.clip(out.image.data, 0.0, 1.0))
    mask_path = os.path.splitext(a.out)[0] + "_mask.pfm"
    fileio.write_pfm(mask_path, out.valid.astype(np.float64))
    print(f"synthesized view -> {a.out} ({out.valid.mean() * 100:.1f}% of "
          f"pixels valid, mask in {mask_path})")
    return 0


def _cmd_grad_check(a) -> int:
    reports = checks.run_scope(a.scope, a.seed)
    scope_max: dict = {}
    rows = []
    failed = False
    for name, rep in reports:
        sc = checks.CHECKS[name][0]
        scope_max[sc] = max(scope_max.get(sc, 0.0), rep.max_rel_err)
        rows.append((name, sc, rep.max_rel_err, rep.n_checked, rep.n_failed,
                     rep.passed))
        failed = failed or not rep.passed
        print(f"{name:18s} {'ok' if rep.passed else 'FAIL':4s} "
              f"max rel err {rep.max_rel_err:.3e} over {rep.n_checked} coords")
    for sc, mx in scope_max.items():
        print(f"scope {sc}: max rel err {mx:.3e}")
    if a.csv:
        with open(a.csv, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["check", "scope", "max_rel_err", "n_checked",
                         "n_failed", "passed"])
            for r in rows:
                wr.writerow(list(r))
        print(f"report written to {a.csv}")
    return 2 if failed else 0


def _cmd_synth(a) -> int:
    scene = renderer.scene_from_json(Path(a.scene).read_text())
    intr, co = fileio.load_camera(a.camera)
    poses = fileio.read_poses(a.poses)
    umap = cam.build_undistortion_map(intr, co)
    os.makedirs(a.out, exist_ok=True)
    for i, pose in enumerate(poses):
        view = renderer.render_view(scene, intr, co, pose, umap)
        fileio.write_image(os.path.join(a.out, f"frame_{i:04d}.ppm"), view.image)
        fileio.write_pfm(os.path.join(a.out, f"frame_{i:04d}.pfm"), view.depth_gt)
    print(f"rendered {len(poses)} views of {len(scene.primitives)} primitives "
          f"to {a.out}")
    return 0


def _cmd_train_toy(a) -> int:
    cfg = trainer.TrainConfig.from_json(Path(a.config).read_text())
    res = trainer.train(cfg)
    print(f"{res.iterations} iterations: loss {res.early_mean:.4f} around "
          f"iteration 10 -> {res.final_loss:.4f} final")
    print(f"checkpoint {res.checkpoint_path}")
    print(f"loss curve {res.csv_path}")
    return 0


def _cmd_eval(a) -> int:
    intr, co = fileio.load_camera(a.camera)
    per_frame, agg = metrics.evaluate_directories(
        a.pred, a.gt, intr, co, median_scale=not a.no_median_scale,
        csv_path=a.csv)
    cols = fileio.METRIC_COLUMNS
    width = max([len("frame")] + [len(n) for n, _ in per_frame])
    print(f"{'frame':<{width}} " + " ".join(f"{c:>8s}" for c in cols))
    for name, m in per_frame:
        d = m.as_dict()
        print(f"{name:<{width}} " + " ".join(f"{d[c]:8.4f}" for c in cols))
    print(f"{'aggregate':<{width}} " + " ".join(f"{agg[c]:8.4f}" for c in cols))
    if a.csv:
        print(f"report written to {a.csv}")
    return 0


def _parse_size(text: str, flag: str) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValidationError(f"{flag} must look like 1392x512, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ValidationError(f"{flag} must look like 1392x512, got {text!r}")


def _cmd_pixel_loss(a) -> int:
    rw, rh = _parse_size(a.raw, "--raw")
    cw, ch = _parse_size(a.rect, "--rect")
    rep = cam.rectification_pixel_loss(rw, rh, cw, ch)
    print(f"width:  {rw} -> {cw} columns, {rep.width_loss_pct:.2f}% lost")
    print(f"height: {rh} -> {ch} rows, {rep.height_loss_pct:.2f}% lost")
    if (rw, rh, cw, ch) == _CITED_CROP:
        print(f"cited figures for this crop: width {_CITED_WIDTH_LOSS_PCT}%, "
              f"height {_CITED_HEIGHT_LOSS_PCT}%")
    return 0


def _build_parser() -> _Parser:
    p = _Parser(prog="unrect",
                description="Depth and ego-motion tooling for unrectified, "
                            "lens-distorted video.")
    sub = p.add_subparsers(dest="command", metavar="command")

    b = sub.add_parser("build-map", parents=[], prog="unrect build-map",
                       help="precompute the per-pixel undistortion map",
                       description="Invert the lens distortion at every pixel "
                                   "and write xu/yu PFM rasters plus a JSON "
                                   "manifest under the given prefix.")
    b.add_argument("--camera", required=True, help="camera parameter JSON file")
    b.add_argument("--out", required=True, help="output path prefix for the map files")
    b.add_argument("--tol", type=float, default=1e-9,
                   help="convergence tolerance in normalized units (default 1e-9)")
    b.set_defaults(fn=_cmd_build_map)

    w = sub.add_parser("warp", prog="unrect warp",
                       help="synthesize a view from a source frame, depth, and pose",
                       description="Reconstruct the target frame by warping the "
                                   "source through the depth map and relative "
                                   "pose; writes the image and a validity mask.")
    w.add_argument("--camera", required=True, help="camera parameter JSON file")
    w.add_argument("--map", required=True, help="undistortion map prefix from build-map")
    w.add_argument("--src", required=True, help="source image (PPM/PGM)")
    w.add_argument("--depth", required=True, help="target-frame depth raster (PFM)")
    w.add_argument("--pose", required=True, help="pose file; first line is used")
    w.add_argument("--out", required=True, help="output image path")
    w.set_defaults(fn=_cmd_warp)

    g = sub.add_parser("grad-check", prog="unrect grad-check",
                       help="verify analytic gradients against central differences",
                       description="Run the seeded gradient suites and print the "
                                   "max relative error per check and per scope; "
                                   "exits 2 if any check is over tolerance.")
    g.add_argument("--scope", default="all",
                   choices=list(checks.SCOPES) + ["all"],
                   help="which module's checks to run (default all)")
    g.add_argument("--seed", type=int, default=0, help="problem seed (default 0)")
    g.add_argument("--csv", default=None, help="optional CSV report path")
    g.set_defaults(fn=_cmd_grad_check)

    s = sub.add_parser("synth", prog="unrect synth",
                       help="render a synthetic scene from given poses",
                       description="Ray-cast the scene through the distorted "
                                   "camera at each pose; writes frame_NNNN.ppm "
                                   "images and frame_NNNN.pfm depth rasters.")
    s.add_argument("--scene", required=True, help="scene description JSON file")
    s.add_argument("--camera", required=True, help="camera parameter JSON file")
    s.add_argument("--poses", required=True, help="pose file, one 3x4 row-major line per view")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=_cmd_synth)

    t = sub.add_parser("train-toy", prog="unrect train-toy",
                       help="run the small-scale training loop",
                       description="Train depth and pose networks per the JSON "
                                   "config; writes checkpoints and a loss CSV "
                                   "to the configured output directory.")
    t.add_argument("--config", required=True, help="training config JSON file")
    t.set_defaults(fn=_cmd_train_toy)

    e = sub.add_parser("eval", prog="unrect eval",
                       help="score predicted depth against ground truth",
                       description="Pair same-named PFM rasters across the two "
                                   "directories, resample each prediction onto "
                                   "the undistorted grid, and print capped "
                                   "depth-error and accuracy statistics.")
    e.add_argument("--pred", required=True, help="directory of predicted depth PFMs")
    e.add_argument("--gt", required=True, help="directory of ground-truth depth PFMs")
    e.add_argument("--camera", required=True, help="camera parameter JSON file")
    e.add_argument("--no-median-scale", action="store_true",
                   help="skip per-frame median scale alignment")
    e.add_argument("--csv", default=None, help="optional CSV report path")
    e.set_defaults(fn=_cmd_eval)

    x = sub.add_parser("pixel-loss", prog="unrect pixel-loss",
                       help="report how much of the raw sensor a rectifying crop discards",
                       description="Print the percentage of columns and rows "
                                   "lost when cropping a raw frame to a "
                                   "rectified resolution.")
    x.add_argument("--raw", required=True, help="raw sensor size as WxH, e.g. 1392x512")
    x.add_argument("--rect", required=True, help="rectified size as WxH, e.g. 1242x375")
    x.set_defaults(fn=_cmd_pixel_loss)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not hasattr(args, "fn"):
        parser.print_help()
        return 1
    try:
        return args.fn(args)
    except (DistortionDomainError, InversionError, DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
