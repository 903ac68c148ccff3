"""Depth evaluation: capped, optionally median-scaled error and accuracy
statistics, computed after resampling unrectified predictions onto the
undistorted grid so they compare against rectified ground truth.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import camera as cam
from . import fileio
from . import util
from .errors import ValidationError

DEPTH_CAP = 80.0
PRED_FLOOR = 1e-3


@dataclass(frozen=True)
class DepthEvalResult:
    abs_rel: float
    sq_rel: float
    rmse: float          # meters; everything else dimensionless
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int

    def __post_init__(self):
        if not (0.0 <= self.delta1 <= self.delta2 <= self.delta3 <= 1.0):
            raise ValidationError(
                f"delta accuracies must be monotone in [0,1], got "
                f"{self.delta1}, {self.delta2}, {self.delta3}")
        for name in ("abs_rel", "sq_rel", "rmse", "rmse_log"):
            if getattr(self, name) < 0.0:
                raise ValidationError(f"{name} must be >= 0")
        if self.n_valid < 1:
            raise ValidationError("metrics need at least one valid pixel")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("abs_rel", "sq_rel", "rmse", "rmse_log",
                 "delta1", "delta2", "delta3", "n_valid")}


def eigen_metrics(pred: np.ndarray, gt: np.ndarray,
                  valid: np.ndarray | None = None,
                  cap: float = DEPTH_CAP,
                  median_scale: bool = True) -> DepthEvalResult:
    """Standard error/accuracy statistics on the valid, capped pixels.

    Evaluation restricts to valid ground-truth pixels at or below the cap.
    With median_scale the prediction is globally rescaled by
    median(gt)/median(pred) before clamping to [1e-3, cap]; monocular
    predictions are scale-ambiguous, so this is on by default.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if valid is None:
        valid = np.isfinite(gt) & (gt > 0)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != gt.shape:
            raise ValidationError(f"valid mask shape {valid.shape} != {gt.shape}")
    sel = valid & (gt <= cap)
    if not sel.any():
        raise ValidationError("no valid ground-truth pixels at or below the cap")

    p = pred[sel]
    g = gt[sel]
    if median_scale:
        med_p = np.median(p)
        if med_p <= 0:
            raise ValidationError("median scaling needs a positive prediction median")
        p = p * (np.median(g) / med_p)
    p = np.clip(p, PRED_FLOOR, cap)

    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthEvalResult(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_valid=int(sel.sum()),
    )


def undistort_depth_for_eval(pred: np.ndarray, intr: cam.CameraIntrinsics,
                             coeffs: cam.DistortionCoeffs) -> np.ndarray:
    """Resample a distorted-grid depth raster onto the undistorted grid.

    Nearest-neighbor on purpose: interpolating depth across an occlusion
    boundary would invent surfaces that exist in neither view. Metric
    values are preserved exactly.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != (intr.height, intr.width):
        raise ValidationError(
            f"depth raster {pred.shape} does not match camera "
            f"({intr.height}, {intr.width})")
    xd, yd = cam.distortion_lookup(intr, coeffs)
    iu = np.clip(np.rint(xd).astype(int), 0, intr.width - 1)
    iv = np.clip(np.rint(yd).astype(int), 0, intr.height - 1)
    return pred[iv, iu]


def _matched_names(pred_dir: str, gt_dir: str) -> list:
    preds = {n for n in os.listdir(pred_dir) if n.endswith(".pfm")}
    gts = {n for n in os.listdir(gt_dir) if n.endswith(".pfm")}
    return sorted(preds & gts)


def evaluate_directories(pred_dir: str, gt_dir: str,
                         intr: cam.CameraIntrinsics | None = None,
                         coeffs: cam.DistortionCoeffs | None = None,
                         cap: float = DEPTH_CAP,
                         median_scale: bool = True,
                         csv_path: str | None = None,
                         workers: int | None = None) -> tuple:
    """Score every prediction PFM against the same-named ground truth PFM.

    Predictions live on the distorted pixel grid; when a camera is given
    each is resampled onto the undistorted grid before scoring, so the
    comparison happens in the geometry the ground truth was produced in.

    Returns (per_frame, aggregate): a list of (name, DepthEvalResult) and
    the unweighted frame mean. Optionally writes the CSV report with one
    row per frame plus the aggregate row.
    """
    names = _matched_names(pred_dir, gt_dir)
    if not names:
        raise ValidationError(
            f"no .pfm filenames shared by {pred_dir!r} and {gt_dir!r}")
    if (intr is None) != (coeffs is None):
        raise ValidationError("intrinsics and coefficients go together")

    def one(name: str):
        pred = fileio.read_pfm(os.path.join(pred_dir, name))
        gt = fileio.read_pfm(os.path.join(gt_dir, name))
        if intr is not None:
            pred = undistort_depth_for_eval(pred, intr, coeffs)
        return name, eigen_metrics(pred, gt, cap=cap, median_scale=median_scale)

    n = util.worker_count(workers)
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            per_frame = list(pool.map(one, names))
    else:
        per_frame = [one(s) for s in names]

    keys = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
    agg = {k: float(np.mean([getattr(m, k) for _, m in per_frame])) for k in keys}
    agg["n_valid"] = int(sum(m.n_valid for _, m in per_frame))
    if csv_path is not None:
        fileio.write_metrics_csv(csv_path,
                                 [(s, m.as_dict()) for s, m in per_frame], agg)
    return per_frame, agg
