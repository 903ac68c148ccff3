"""Differentiable bilinear sampling and distorted-view synthesis.

Synthesis reconstructs the distorted target frame from a distorted source:
the source is first resampled onto the undistorted grid (training-time only,
a plain image-space detour), then sampled bilinearly at the undistorted
coordinates produced by the warp chain. Gradients reach depth and pose
through the sample coordinates; the undistorted source is constant data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import camera as cam
from . import geometry as geo
from .autodiff import DiffTensor
from .errors import ShapeError, ValidationError


def bilinear_sample(img, coords: geo.SampleCoords):
    """Sample img (C,H,W) at coords; returns (values, valid).

    Border policy is clamp-to-edge; valid is false where the query leaves
    the image rectangle (inclusive of the border line) or was already
    invalid upstream. Differentiable w.r.t. the image and the coordinates.
    """
    img_t = img if isinstance(img, DiffTensor) else ad.constant(np.asarray(img))
    if img_t.data.ndim != 3:
        raise ShapeError("bilinear_sample", img_t.data.shape)
    xs = coords.xs if isinstance(coords.xs, DiffTensor) else ad.constant(np.asarray(coords.xs))
    ys = coords.ys if isinstance(coords.ys, DiffTensor) else ad.constant(np.asarray(coords.ys))
    if xs.data.shape != ys.data.shape:
        raise ShapeError("bilinear_sample coords", xs.data.shape, ys.data.shape)
    _, h, w = img_t.data.shape
    out = ad.grid_sample(img_t, xs, ys)
    inside = ((xs.data >= 0.0) & (xs.data <= w - 1.0)
              & (ys.data >= 0.0) & (ys.data <= h - 1.0))
    valid = inside if coords.valid is None else (coords.valid & inside)
    return out, valid


def resize_bilinear(x, out_hw):
    """Resize a (H,W) or (C,H,W) tensor with corner-aligned bilinear
    interpolation; corners map to corners exactly."""
    xt = x if isinstance(x, DiffTensor) else ad.constant(np.asarray(x))
    squeeze = xt.data.ndim == 2
    if squeeze:
        xt = xt.reshape((1,) + xt.data.shape)
    if xt.data.ndim != 3:
        raise ShapeError("resize_bilinear", xt.data.shape)
    _, h, w = xt.data.shape
    ho, wo = out_hw
    if ho < 2 or wo < 2:
        raise ValidationError(f"resize_bilinear: output size {out_hw} too small")
    ys = np.arange(ho, dtype=np.float64) * ((h - 1.0) / (ho - 1.0))
    xs = np.arange(wo, dtype=np.float64) * ((w - 1.0) / (wo - 1.0))
    gx, gy = np.meshgrid(xs, ys)
    out = ad.grid_sample(xt, ad.constant(gx), ad.constant(gy))
    return out.reshape((ho, wo)) if squeeze else out


@dataclass
class SynthesisResult:
    """Reconstructed target view plus its per-pixel validity mask."""

    image: DiffTensor  # (C,H,W)
    valid: np.ndarray  # (H,W) bool
    coords: geo.SampleCoords


def synthesize_view(src_dist: np.ndarray, intr: cam.CameraIntrinsics,
                    coeffs: cam.DistortionCoeffs, depth, pose,
                    umap: cam.UndistortionMap, lookup=None,
                    src_undistorted=None) -> SynthesisResult:
    """Reconstruct the distorted target frame from a distorted source view.

    src_undistorted short-circuits the per-call source undistortion when the
    caller caches it across iterations (the result is identical either way).
    """
    src_dist = np.asarray(src_dist)
    if src_dist.ndim != 3 or src_dist.shape[1:] != (umap.height, umap.width):
        raise ShapeError("synthesize_view", src_dist.shape, (umap.height, umap.width))
    if src_undistorted is None:
        src_undistorted = cam.undistort_image(src_dist, intr, coeffs, lookup=lookup)
    coords = geo.warp_coordinates(depth, intr, umap, pose)
    image, valid = bilinear_sample(src_undistorted, coords)
    return SynthesisResult(image=image, valid=valid, coords=coords)
