"""Direct optimization oracles: fit a raw depth raster or a single pose to
two rendered views by gradient descent on photometric objectives built
from the same warp stack the trainer uses. No networks involved, so these
runs referee the geometry, sampling, and loss modules end to end against
ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import camera as cam
from . import geometry as geo
from . import losses
from . import renderer as rd
from . import sampler
from .errors import DivergenceError, ValidationError
from .networks import disparity_to_depth
from .optim import Adam

_SIGMA_MIN = 1e-6

# Residual gate for the pose fit's second stage: pixels above this multiple
# of the median residual are treated as occlusion fallout and dropped.
_POSE_MASK_K = 2.5


def _box3_blur(img: np.ndarray) -> np.ndarray:
    """3x3 box low-pass, edge-replicated. Plain numpy, constants only."""
    c, h, w = img.shape
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += p[:, di:di + h, dj:dj + w]
    return out / 9.0


def _depth_to_logit(depth: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.asarray(depth, dtype=float)
    sigma = (inv - 1.0 / geo.DEPTH_MAX) / (1.0 / geo.DEPTH_MIN - 1.0 / geo.DEPTH_MAX)
    sigma = np.clip(sigma, _SIGMA_MIN, 1.0 - _SIGMA_MIN)
    return np.log(sigma / (1.0 - sigma))


@dataclass
class DepthRecoveryReport:
    abs_rel: float              # on textured, source-visible pixels
    initial_loss: float
    final_loss: float
    mask_ratio: float
    iterations: int
    degenerate: bool            # auto-mask kept (almost) nothing
    loss_trace: list


@dataclass
class PoseRecoveryReport:
    rotation_error_deg: float
    translation_error_rel: float
    initial_loss: float
    final_loss: float
    iterations: int
    pose: geo.PoseParams6
    loss_trace: list


def _check_finite(value: float, iteration: int, trace: list):
    if not math.isfinite(value):
        raise DivergenceError(f"loss became non-finite at iteration {iteration}",
                              iteration=iteration, trace=trace)


def _automask_ratio(target_view, source_view, disp_const, pose, intr, coeffs,
                    umap, src_und) -> float:
    """Fraction of pixels the static-pixel mask would keep for this fit.

    Evaluated once on constants; a ratio near zero means the warped view
    beats the raw source almost nowhere, the signature of a textureless or
    motionless pair where the photometric objective constrains nothing.
    """
    cfg = losses.LossConfig(scales=1, automask=True)
    bd = losses.total_loss(target_view.image, [source_view.image],
                           [ad.constant(disp_const)], [pose],
                           intr, coeffs, umap, cfg, sources_undistorted=[src_und])
    return bd.mask_ratio


def direct_depth_recovery(target_view: rd.RenderedView, source_view: rd.RenderedView,
                          intr: cam.CameraIntrinsics, coeffs: cam.DistortionCoeffs,
                          iters: int = 500, lr: float = 1e-2,
                          depth_init: float = 20.0,
                          umap: cam.UndistortionMap | None = None,
                          cfg: losses.LossConfig | None = None) -> tuple:
    """Fit a per-pixel depth raster to the photometric objective.

    The true relative pose is taken from the views. Depth is parameterized
    as logit-disparity so the (0.1, 100) m bounds hold by construction.
    Returns (recovered depth raster, DepthRecoveryReport).

    The default objective runs with the static-pixel mask off and a strong
    smoothness weight. Without a network there is nothing tying neighboring
    pixels together, so locally flat texture leaves single pixels
    unconstrained unless smoothness propagates their depth; and a masked
    mean would let the fit improve by shrinking its own support instead of
    matching the image. The mask statistic is still evaluated on the final
    fit and reported, so degenerate (textureless) pairs are flagged.
    """
    if iters < 1:
        raise ValidationError("direct_depth_recovery: iters must be >= 1")
    if umap is None:
        umap = cam.build_undistortion_map(intr, coeffs)
    if cfg is None:
        cfg = losses.LossConfig(scales=1, automask=False, lambda_smooth=0.1)
    if cfg.scales != 1:
        raise ValidationError("direct_depth_recovery: single-scale objective expected")
    h, w = target_view.depth_gt.shape
    pose = geo.relative_pose(target_view.pose, source_view.pose)
    src_und = cam.undistort_image(source_view.image, intr, coeffs)

    logit = np.full((h, w), float(_depth_to_logit(depth_init)))
    opt = Adam(lr=lr)
    trace = []
    for it in range(iters):
        tape = ad.Tape()
        leaf = ad.leaf(logit.copy(), tape)
        disp = ad.sigmoid(leaf)
        bd = losses.total_loss(target_view.image, [source_view.image], [disp], [pose],
                               intr, coeffs, umap, cfg, sources_undistorted=[src_und])
        trace.append(bd.total)
        _check_finite(bd.total, it, trace)
        if bd.loss.tape is None:
            break  # objective constant (e.g. fully masked): nothing to fit
        tape.backward(bd.loss)
        opt.step({"logit": logit}, {"logit": leaf.grad})

    sigma = 1.0 / (1.0 + np.exp(-logit))
    depth = disparity_to_depth(sigma)
    mask_ratio = _automask_ratio(target_view, source_view, sigma, pose,
                                 intr, coeffs, umap, src_und)
    textured = rd.texture_mask(target_view.image)
    visible = rd.cross_view_visibility(target_view, source_view, intr, coeffs, umap)
    sel = textured & visible & target_view.occlusion_mask
    degenerate = mask_ratio < 0.01 or not sel.any()
    if sel.any():
        abs_rel = float(np.mean(np.abs(depth[sel] - target_view.depth_gt[sel])
                                / target_view.depth_gt[sel]))
    else:
        abs_rel = float("inf")
    report = DepthRecoveryReport(abs_rel=abs_rel, initial_loss=trace[0],
                                 final_loss=trace[-1], mask_ratio=mask_ratio,
                                 iterations=len(trace), degenerate=degenerate,
                                 loss_trace=trace)
    return depth, report


def direct_pose_recovery(target_view: rd.RenderedView, source_view: rd.RenderedView,
                         intr: cam.CameraIntrinsics, coeffs: cam.DistortionCoeffs,
                         true_depth: np.ndarray | None = None,
                         iters: int = 500, lr: float = 1e-3,
                         init: geo.PoseParams6 | None = None,
                         umap: cam.UndistortionMap | None = None) -> tuple:
    """Fit the 6-DoF relative pose holding depth at ground truth.

    Returns (PoseParams6, PoseRecoveryReport); errors are measured against
    the views' true relative pose.

    The objective differs from the training loss in three deliberate ways,
    each worth a few tenths of a percent of translation accuracy:

    * Bidirectional: the source is warped into the target under the pose
      and the target into the source under its inverse, and both absolute
      differences count. One-sided alignment leaves an odd-order sampling
      bias that shifts the minimum off the true pose; the symmetric sum
      cancels most of it.
    * Plain absolute difference on 3x3 box prefiltered images. The
      windowed similarity term correlates neighboring residuals and biases
      subpixel registration, and unfiltered point-sampled texture aliases
      under interpolation.
    * Two stages: after three fifths of the budget, per-pixel residuals of
      the current fit freeze a keep-mask at 2.5x their median, and the
      rest of the budget refits on that mask. This drops the occlusion
      bands a rigid warp cannot explain. The mask is frozen, never
      recomputed inside the fitted objective, so the optimizer cannot
      improve by shrinking its own support.

    The problem is only well-posed on scenes with depth variation: on a
    single fronto-parallel plane, sideways translation and a small
    rotation produce first-order identical warps, so the objective has a
    flat valley and the split between them is arbitrary.
    """
    if iters < 1:
        raise ValidationError("direct_pose_recovery: iters must be >= 1")
    if umap is None:
        umap = cam.build_undistortion_map(intr, coeffs)
    if true_depth is None:
        true_depth = target_view.depth_gt
    true_rel = geo.relative_pose(target_view.pose, source_view.pose)

    img_t = _box3_blur(target_view.image)
    img_s = _box3_blur(source_view.image)
    und_t = cam.undistort_image(img_t, intr, coeffs)
    und_s = cam.undistort_image(img_s, intr, coeffs)
    const_t = ad.constant(img_t)
    const_s = ad.constant(img_s)
    dep_t = ad.constant(disparity_to_depth(_depth_to_sigma(true_depth)))
    dep_s = ad.constant(disparity_to_depth(_depth_to_sigma(source_view.depth_gt)))

    def bidir_residuals(leaf):
        fwd = geo.pose_tensors(leaf)
        r_inv = ad.rot_from_axis_angle(-leaf[0:3])
        t_inv = -(ad.matmul(r_inv, leaf[3:6].reshape((3, 1))).reshape((3,)))
        recon_t = sampler.synthesize_view(img_s, intr, coeffs, dep_t, fwd, umap,
                                          src_undistorted=und_s).image
        recon_s = sampler.synthesize_view(img_t, intr, coeffs, dep_s, (r_inv, t_inv),
                                          umap, src_undistorted=und_t).image
        err_t = ad.abs_(const_t - recon_t).mean(axis=0)
        err_s = ad.abs_(const_s - recon_s).mean(axis=0)
        return err_t, err_s

    vec = (init.as_vector() if init is not None else np.zeros(6)).astype(float).copy()
    stage1 = max(1, (3 * iters) // 5)
    opt = Adam(lr=lr)
    trace = []
    mask_t = mask_s = None
    for it in range(iters):
        if it == stage1:
            err_t, err_s = bidir_residuals(ad.constant(vec))
            mask_t = err_t.data < _POSE_MASK_K * np.median(err_t.data)
            mask_s = err_s.data < _POSE_MASK_K * np.median(err_s.data)
            opt = Adam(lr=lr)  # fresh moments for the reweighted objective
        tape = ad.Tape()
        leaf = ad.leaf(vec.copy(), tape)
        err_t, err_s = bidir_residuals(leaf)
        if mask_t is None:
            loss = err_t.mean() + err_s.mean()
        else:
            loss = losses.masked_mean(err_t, mask_t) + losses.masked_mean(err_s, mask_s)
        trace.append(loss.item())
        _check_finite(trace[-1], it, trace)
        if loss.tape is None:
            break
        tape.backward(loss)
        opt.step({"pose": vec}, {"pose": leaf.grad})

    recovered = geo.pose_from_params(geo.PoseParams6.from_vector(vec))
    err = recovered.compose(true_rel.inverse())
    cos_angle = (np.trace(err.R) - 1.0) / 2.0
    rot_deg = math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))
    t_true = true_rel.t
    t_norm = np.linalg.norm(t_true)
    trans_rel = (np.linalg.norm(recovered.t - t_true) / t_norm if t_norm > 1e-12
                 else np.linalg.norm(recovered.t))
    report = PoseRecoveryReport(rotation_error_deg=rot_deg,
                                translation_error_rel=float(trans_rel),
                                initial_loss=trace[0], final_loss=trace[-1],
                                iterations=len(trace),
                                pose=geo.PoseParams6.from_vector(vec),
                                loss_trace=trace)
    return geo.PoseParams6.from_vector(vec), report


def _depth_to_sigma(depth: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.asarray(depth, dtype=float)
    sigma = (inv - 1.0 / geo.DEPTH_MAX) / (1.0 / geo.DEPTH_MIN - 1.0 / geo.DEPTH_MAX)
    return np.clip(sigma, _SIGMA_MIN, 1.0 - _SIGMA_MIN)
