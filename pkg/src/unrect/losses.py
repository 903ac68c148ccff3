"""Training objective: auto-masked SSIM+L1 photometric error over warped
views plus edge-aware disparity smoothness, combined across scales.

Every term is built from tape ops so the total differentiates w.r.t. depth,
pose vectors, and network parameters. Image-side quantities (identity
errors, edge weights) are deliberately plain arrays: gradients flow through
reconstructions and disparities only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import sampler
from .autodiff import DiffTensor
from .errors import ShapeError, ValidationError
from .networks import disparity_to_depth


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 0.85
    alpha2: float = 0.15
    lambda_smooth: float = 1e-3
    scales: int = 4
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    automask: bool = True  # η off turns the mask into all-ones

    def __post_init__(self):
        if abs(self.alpha1 + self.alpha2 - 1.0) > 1e-12:
            raise ValidationError("LossConfig: alpha1 + alpha2 must equal 1")
        if self.lambda_smooth < 0:
            raise ValidationError("LossConfig: lambda_smooth must be non-negative")
        if self.scales < 1:
            raise ValidationError("LossConfig: scales must be at least 1")
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise ValidationError("LossConfig: SSIM stabilizers must be positive")


@dataclass
class LossBreakdown:
    """Scalar summaries of one objective evaluation.

    total = photometric + smoothness, where smoothness already carries the
    per-scale lambda/2^s weights; per_scale holds the raw unweighted terms
    (scale, photometric_s, smoothness_s). loss is the differentiable total.
    """

    photometric: float
    smoothness: float
    total: float
    per_scale: list
    mask_ratio: float
    loss: DiffTensor = field(repr=False, default=None)

    def __post_init__(self):
        if not (0.0 <= self.mask_ratio <= 1.0):
            raise ValidationError(f"LossBreakdown: mask_ratio {self.mask_ratio} outside [0,1]")
        if self.photometric < 0 or self.smoothness < 0 or self.total < 0:
            raise ValidationError("LossBreakdown: terms must be non-negative")


def _lift(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else ad.constant(np.asarray(x))


def _box3_mean(x: DiffTensor) -> DiffTensor:
    """3x3 uniform filter over the last two axes with reflection padding."""
    p = ad.pad_reflect2d(x, 1)
    h, w = x.data.shape[-2], x.data.shape[-1]
    acc = None
    for di in range(3):
        for dj in range(3):
            s = p[..., di:di + h, dj:dj + w]
            acc = s if acc is None else acc + s
    return acc * (1.0 / 9.0)


def ssim(a, b, c1: float = 1e-4, c2: float = 9e-4) -> DiffTensor:
    """Per-pixel structural similarity in [-1, 1].

    3x3 uniform window, reflection padding, stabilizers sized for unit
    dynamic range. Channel axes pass through untouched.
    """
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("ssim", a.data.shape, b.data.shape)
    if a.data.ndim < 2:
        raise ShapeError("ssim", a.data.shape)
    mu_a = _box3_mean(a)
    mu_b = _box3_mean(b)
    var_a = _box3_mean(a * a) - mu_a * mu_a
    var_b = _box3_mean(b * b) - mu_b * mu_b
    cov = _box3_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def photometric_error(target, recon, cfg: LossConfig = LossConfig()) -> DiffTensor:
    """alpha1 * (1 - SSIM)/2 + alpha2 * L1, channel-averaged to (H, W)."""
    target, recon = _lift(target), _lift(recon)
    if target.data.shape != recon.data.shape:
        raise ShapeError("photometric_error", target.data.shape, recon.data.shape)
    s = ssim(target, recon, cfg.ssim_c1, cfg.ssim_c2)
    err = cfg.alpha1 * (1.0 - s) * 0.5 + cfg.alpha2 * ad.abs_(target - recon)
    if err.data.ndim == 3:
        err = err.mean(axis=0)
    return err


@dataclass
class MaskedReprojection:
    """Per-pixel minimum over sources plus the static-pixel mask."""

    loss: DiffTensor            # masked mean, scalar
    loss_map: DiffTensor        # (H, W) min over sources
    mask: np.ndarray            # binary, True where the pixel counts
    mask_ratio: float


def _min_reduce(maps):
    out = maps[0]
    for m in maps[1:]:
        out = ad.minimum(out, m)
    return out


def masked_mean(x: DiffTensor, mask: np.ndarray) -> DiffTensor:
    """Mean of x over True pixels; an all-false mask yields exactly 0."""
    n = int(np.count_nonzero(mask))
    if n == 0:
        return ad.constant(np.zeros((), dtype=x.data.dtype))
    return (x * mask.astype(x.data.dtype)).sum() / float(n)


def min_reprojection_with_automask(target, recons, raw_sources=None,
                                   cfg: LossConfig = LossConfig(),
                                   identity_error: np.ndarray | None = None) -> MaskedReprojection:
    """Score reconstructions against the target with the static-pixel mask.

    Per pixel the loss is the minimum photometric error over sources; the
    mask keeps a pixel only where that minimum is strictly below the
    minimum error of the raw (unwarped) sources, so pixels that do not
    change across time steps drop out. identity_error short-circuits the
    raw-source term with a precomputed map; the mask is a fixed binary
    raster, never differentiated through.
    """
    if not recons:
        raise ValidationError("min_reprojection_with_automask: no reconstructions")
    target = _lift(target)
    warped = _min_reduce([photometric_error(target, r, cfg) for r in recons])
    if cfg.automask:
        if identity_error is None:
            if not raw_sources:
                raise ValidationError(
                    "min_reprojection_with_automask: automask needs raw_sources "
                    "or a precomputed identity_error")
            identity_error = np.minimum.reduce(
                [photometric_error(target, ad.constant(np.asarray(s)), cfg).data
                 for s in raw_sources])
        mask = warped.data < identity_error
    else:
        mask = np.ones(warped.data.shape, dtype=bool)
    ratio = float(np.count_nonzero(mask)) / mask.size
    return MaskedReprojection(loss=masked_mean(warped, mask), loss_map=warped,
                              mask=mask, mask_ratio=ratio)


def smoothness_loss(disp, img) -> DiffTensor:
    """Edge-aware first-order smoothness of mean-normalized disparity.

    Forward differences; the image-gradient weights e^{-|dI|} are
    channel-averaged and enter as constants, so the gradient is w.r.t. the
    disparity alone.
    """
    disp = _lift(disp)
    if disp.data.ndim != 2:
        raise ShapeError("smoothness_loss", disp.data.shape)
    arr = img.data if isinstance(img, DiffTensor) else np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[1:] != disp.data.shape:
        raise ShapeError("smoothness_loss", disp.data.shape, arr.shape)
    d = disp / (disp.mean() + 1e-7)
    dx = ad.abs_(d[:, 1:] - d[:, :-1])
    dy = ad.abs_(d[1:, :] - d[:-1, :])
    wx = np.exp(-np.mean(np.abs(arr[:, :, 1:] - arr[:, :, :-1]), axis=0))
    wy = np.exp(-np.mean(np.abs(arr[:, 1:, :] - arr[:, :-1, :]), axis=0))
    return (dx * wx).mean() + (dy * wy).mean()


def _image_pyramid(img: np.ndarray, levels: int) -> list:
    pyr = [img]
    for _ in range(1, levels):
        prev = pyr[-1]
        c, h, w = prev.shape
        pyr.append(prev.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)))
    return pyr


def total_loss(target, sources, disparities, poses, intr, coeffs, umap,
               cfg: LossConfig = LossConfig(), lookup=None,
               sources_undistorted=None) -> LossBreakdown:
    """Full multi-scale objective for one target frame.

    sources are raw distorted frames; poses map target camera coordinates to
    each source, given as PoseSE3, (R, t) tensor pairs, or differentiable
    6-vectors. Each scale's disparity is upsampled to full resolution and
    converted to depth before synthesis; smoothness is evaluated at the
    disparity's native scale against the box-downsampled image, weighted by
    lambda_smooth / 2^s.
    """
    target_arr = np.asarray(target, dtype=float)
    if target_arr.ndim != 3:
        raise ShapeError("total_loss", target_arr.shape)
    if len(sources) != len(poses) or not sources:
        raise ValidationError("total_loss: sources and poses must pair up, at least one each")
    if len(disparities) != cfg.scales:
        raise ValidationError(
            f"total_loss: expected {cfg.scales} disparity scales, got {len(disparities)}")
    h, w = target_arr.shape[1:]

    pose_rt = []
    for p in poses:
        if isinstance(p, DiffTensor):
            pose_rt.append(geo.pose_tensors(p))
        else:
            pose_rt.append(p)
    if sources_undistorted is None:
        sources_undistorted = [None] * len(sources)

    identity_error = None
    if cfg.automask:
        tconst = ad.constant(target_arr)
        identity_error = np.minimum.reduce(
            [photometric_error(tconst, ad.constant(np.asarray(s, dtype=float)), cfg).data
             for s in sources])
    pyramid = _image_pyramid(target_arr, cfg.scales)

    photo_terms = []
    smooth_terms = []
    per_scale = []
    ratios = []
    for s, disp in enumerate(disparities):
        d = _lift(disp)
        if d.data.ndim != 2:
            raise ShapeError("total_loss", d.data.shape)
        full = d if d.data.shape == (h, w) else sampler.resize_bilinear(d, (h, w))
        depth = disparity_to_depth(full)
        recons = []
        for src, rt, und in zip(sources, pose_rt, sources_undistorted):
            synth = sampler.synthesize_view(src, intr, coeffs, depth, rt, umap,
                                            lookup=lookup, src_undistorted=und)
            recons.append(synth.image)
        rep = min_reprojection_with_automask(target_arr, recons, cfg=cfg,
                                             identity_error=identity_error)
        smooth = smoothness_loss(d, pyramid[s])
        photo_terms.append(rep.loss)
        smooth_terms.append(smooth * (cfg.lambda_smooth / (2.0 ** s)))
        per_scale.append((s, float(rep.loss.data), float(smooth.data)))
        ratios.append(rep.mask_ratio)

    photometric = photo_terms[0]
    for t in photo_terms[1:]:
        photometric = photometric + t
    smoothness = smooth_terms[0]
    for t in smooth_terms[1:]:
        smoothness = smoothness + t
    loss = photometric + smoothness
    return LossBreakdown(photometric=float(photometric.data),
                         smoothness=float(smoothness.data),
                         total=float(loss.data),
                         per_scale=per_scale,
                         mask_ratio=float(np.mean(ratios)),
                         loss=loss)
