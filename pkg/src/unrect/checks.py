"""Seeded gradient verification for every differentiable operation.

Each named check builds a deterministic problem from its seed, runs one
reverse pass, and compares against central differences coordinate by
coordinate. The registry is shared by the grad-check command and the test
suite so both report on exactly the same problems.

Probes are screened away from known non-smooth points: a central difference
straddling a bilinear cell edge or an |x| kink measures the slope jump
there rather than the derivative, and would fail any tolerance no matter
how correct the backward rules are.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import camera as cam
from . import geometry as geo
from . import losses
from . import networks as nets
from . import sampler
from .errors import ValidationError

TOL = 1e-4
STEP = 1e-6


def _weights(rng: np.random.Generator, shape) -> np.ndarray:
    # strictly positive so no coordinate's gradient is hidden by a zero weight
    return rng.uniform(0.5, 1.5, size=shape)


def _smooth_image(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    """Band-limited test image: sums of sinusoids, everywhere differentiable."""
    ys, xs = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    img = np.zeros((c, h, w))
    for ch in range(c):
        for _ in range(4):
            fx, fy = rng.uniform(0.05, 0.45, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            img[ch] += rng.uniform(0.1, 0.3) * np.sin(2 * np.pi * (fx * xs + fy * ys) + ph)
    return 0.5 + 0.4 * np.tanh(img)


def _check_distort_point(seed: int) -> ad.GradCheckReport:
    rng = np.random.default_rng([seed, 1])
    n = 520
    pts = rng.uniform(-0.65, 0.65, size=(2, n))
    co = cam.DistortionCoeffs(k1=float(rng.uniform(-0.3, 0.3)),
                              k2=float(rng.uniform(-0.1, 0.1)),
                              k3=float(rng.uniform(-0.03, 0.03)),
                              p1=float(rng.uniform(-3e-3, 3e-3)),
                              p2=float(rng.uniform(-3e-3, 3e-3)))
    wx = _weights(rng, n)
    wy = _weights(rng, n)

    def f(p):
        xd, yd = cam.distort(p[0], p[1], co)
        return (xd * wx).sum() + (yd * wy).sum()

    return ad.gradient_check(f, pts, step=STEP, tol=TOL)


def _warp_problem(seed: int):
    rng = np.random.default_rng([seed, 2])
    h, w = 24, 48
    intr = cam.CameraIntrinsics(fx=w / 2.0, fy=w / 2.0,
                                cx=w / 2.0 - 0.5, cy=h / 2.0 - 0.5,
                                width=w, height=h)
    co = cam.DistortionCoeffs(k1=-0.12, k2=0.015, k3=0.0, p1=8e-4, p2=-4e-4)
    umap = cam.build_undistortion_map(intr, co)
    depth = rng.uniform(0.4, 2.5, size=(h, w))
    vec = np.concatenate([rng.uniform(-0.03, 0.03, size=3),
                          rng.uniform(-0.05, 0.05, size=3)])
    return rng, intr, co, umap, depth, vec


def _check_warp_depth(seed: int) -> ad.GradCheckReport:
    rng, intr, _, umap, depth, vec = _warp_problem(seed)
    pose = geo.pose_from_params(geo.PoseParams6(vec[0:3], vec[3:6]))
    base = geo.warp_coordinates(ad.constant(depth), intr, umap, pose)
    wx = _weights(rng, depth.shape) * base.valid
    wy = _weights(rng, depth.shape) * base.valid
    # summing raw pixel coordinates makes f ~ 1e4 while one probe moves it
    # by ~1e-8, losing the difference to roundoff; subtracting the base
    # coordinates keeps f near zero without touching the gradient
    x0, y0 = base.xs.data, base.ys.data

    def f(d):
        c = geo.warp_coordinates(d, intr, umap, pose)
        return ((c.xs - x0) * wx).sum() + ((c.ys - y0) * wy).sum()

    return ad.gradient_check(f, depth, step=STEP, tol=TOL)


def _check_warp_pose(seed: int) -> ad.GradCheckReport:
    rng, intr, _, umap, depth, vec = _warp_problem(seed)
    pose0 = geo.pose_from_params(geo.PoseParams6(vec[0:3], vec[3:6]))
    base = geo.warp_coordinates(ad.constant(depth), intr, umap, pose0)
    wx = _weights(rng, depth.shape) * base.valid
    wy = _weights(rng, depth.shape) * base.valid
    x0, y0 = base.xs.data, base.ys.data
    dconst = ad.constant(depth)

    def f(v):
        c = geo.warp_coordinates(dconst, intr, umap, geo.pose_tensors(v))
        return ((c.xs - x0) * wx).sum() + ((c.ys - y0) * wy).sum()

    # 6 coordinates total: the axis-angle and translation parameters
    return ad.gradient_check(f, vec, step=STEP, tol=TOL)


def _check_bilinear_sample(seed: int) -> ad.GradCheckReport:
    rng = np.random.default_rng([seed, 3])
    h, w = 32, 32
    img = _smooth_image(rng, 1, h, w)
    n = 1200
    coords = np.stack([rng.uniform(1.0, w - 2.0, size=n),
                       rng.uniform(1.0, h - 2.0, size=n)])
    wv = _weights(rng, n)
    base_out, _ = sampler.bilinear_sample(
        img, geo.SampleCoords(xs=ad.constant(coords[0]), ys=ad.constant(coords[1]),
                              valid=None))
    v0 = base_out.data.reshape((n,))

    # image direction: sampling is linear in intensities, smooth everywhere
    def f_img(im):
        out, _ = sampler.bilinear_sample(
            im.reshape((1, h, w)),
            geo.SampleCoords(xs=ad.constant(coords[0]), ys=ad.constant(coords[1]),
                             valid=None))
        return ((out.reshape((n,)) - v0) * wv).sum()

    rep_img = ad.gradient_check(f_img, img[0], step=STEP, tol=TOL)

    # coordinate direction: piecewise bilinear; probe only queries whose
    # fractional part sits clear of the cell lattice
    img_c = ad.constant(img)

    def f_xy(c):
        out, _ = sampler.bilinear_sample(
            img_c, geo.SampleCoords(xs=c[0], ys=c[1], valid=None))
        return ((out.reshape((n,)) - v0) * wv).sum()

    fr = coords - np.floor(coords)
    safe = (fr > 1e-3) & (fr < 1.0 - 1e-3)
    rep_xy = ad.gradient_check(f_xy, coords, step=STEP, tol=TOL,
                               indices=np.flatnonzero(safe.ravel()))
    return _merge(rep_img, rep_xy)


def _merge(a: ad.GradCheckReport, b: ad.GradCheckReport) -> ad.GradCheckReport:
    return ad.GradCheckReport(
        passed=a.passed and b.passed,
        max_rel_err=max(a.max_rel_err, b.max_rel_err),
        n_checked=a.n_checked + b.n_checked,
        n_failed=a.n_failed + b.n_failed,
        tol=a.tol, step=a.step,
        failures=a.failures + b.failures)


def _check_ssim(seed: int) -> ad.GradCheckReport:
    rng = np.random.default_rng([seed, 4])
    a = _smooth_image(rng, 3, 19, 18)
    b = np.clip(a + rng.normal(0, 0.05, size=a.shape), 0.05, 0.95)
    wv = _weights(rng, a.shape)

    def f(x):
        return (losses.ssim(x, b) * wv).mean()

    return ad.gradient_check(f, a, step=STEP, tol=TOL)


def _check_smoothness(seed: int) -> ad.GradCheckReport:
    rng = np.random.default_rng([seed, 5])
    h, w = 34, 34
    img = _smooth_image(rng, 3, h, w)
    disp = rng.uniform(0.1, 0.9, size=(h, w))

    def f(d):
        return losses.smoothness_loss(d, img)

    # |x| kinks where neighboring disparities tie; skip the handful of
    # pixels touching a near-zero difference instead of probing across them
    dn = disp / disp.mean()
    unsafe = np.zeros((h, w), dtype=bool)
    tiny_x = np.abs(np.diff(dn, axis=1)) < 100 * STEP
    tiny_y = np.abs(np.diff(dn, axis=0)) < 100 * STEP
    unsafe[:, :-1] |= tiny_x
    unsafe[:, 1:] |= tiny_x
    unsafe[:-1, :] |= tiny_y
    unsafe[1:, :] |= tiny_y
    idx = np.flatnonzero(~unsafe.ravel())
    if idx.size < 1000:
        raise ValidationError(f"smoothness check kept only {idx.size} probe points")
    return ad.gradient_check(f, disp, step=STEP, tol=TOL, indices=idx)


def _check_total_loss(seed: int) -> ad.GradCheckReport:
    rng = np.random.default_rng([seed, 6])
    h, w = 28, 88
    intr = cam.CameraIntrinsics(fx=w / 2.0, fy=w / 2.0,
                                cx=w / 2.0 - 0.5, cy=h / 2.0 - 0.5,
                                width=w, height=h)
    co = cam.DistortionCoeffs(k1=-0.12, k2=0.015, k3=0.0, p1=8e-4, p2=-4e-4)
    umap = cam.build_undistortion_map(intr, co)
    target = _smooth_image(rng, 3, h, w)
    source = _smooth_image(rng, 3, h, w)
    src_und = cam.undistort_image(source, intr, co)
    disp = rng.uniform(0.25, 0.75, size=(h, w))
    vec = np.concatenate([rng.uniform(-0.02, 0.02, size=3),
                          rng.uniform(-0.03, 0.03, size=3)])
    pose = geo.pose_from_params(geo.PoseParams6(vec[0:3], vec[3:6]))
    cfg = losses.LossConfig(scales=1, automask=False)

    def f(d):
        out = losses.total_loss(target, [source], [d], [pose], intr, co, umap,
                                cfg=cfg, sources_undistorted=[src_und])
        return out.loss

    # a probe of one disparity pixel moves exactly that pixel's warp query,
    # so eligibility is per pixel: the base query must sit inside its
    # bilinear cell, clear of the projection validity boundary, and clear
    # of the |x| kinks in the L1 and smoothness terms
    base = geo.warp_coordinates(
        losses.disparity_to_depth(ad.constant(disp)), intr, umap, pose)
    synth = sampler.synthesize_view(source, intr, co,
                                    losses.disparity_to_depth(ad.constant(disp)),
                                    pose, umap, src_undistorted=src_und)
    l1_clear = np.abs(target - synth.image.data).min(axis=0) > 1e-3
    fx = base.xs.data - np.floor(base.xs.data)
    fy = base.ys.data - np.floor(base.ys.data)
    interior = ((base.xs.data > 2.0) & (base.xs.data < w - 3.0)
                & (base.ys.data > 2.0) & (base.ys.data < h - 3.0))
    dn = disp / disp.mean()
    unsafe = np.zeros((h, w), dtype=bool)
    tiny_x = np.abs(np.diff(dn, axis=1)) < 1e-3
    tiny_y = np.abs(np.diff(dn, axis=0)) < 1e-3
    unsafe[:, :-1] |= tiny_x
    unsafe[:, 1:] |= tiny_x
    unsafe[:-1, :] |= tiny_y
    unsafe[1:, :] |= tiny_y
    safe = (base.valid & interior & ~unsafe & l1_clear
            & (fx > 1e-3) & (fx < 1.0 - 1e-3)
            & (fy > 1e-3) & (fy < 1.0 - 1e-3))
    idx = np.flatnonzero(safe.ravel())
    if idx.size < 1000:
        raise ValidationError(f"total_loss check kept only {idx.size} probe points")
    # wider step than elsewhere: the loss is a mean over thousands of terms
    # whose evaluation noise sits near 1e-13, and a 1e-6 probe would divide
    # that noise by too small a distance to clear the tolerance
    return ad.gradient_check(f, disp, step=1e-5, tol=TOL, indices=idx)


def _check_instance_norm(seed: int) -> ad.GradCheckReport:
    rng = np.random.default_rng([seed, 7])
    x = rng.normal(0, 1.2, size=(1, 4, 16, 16))
    scale = ad.constant(rng.uniform(0.5, 1.5, size=4))
    shift = ad.constant(rng.uniform(-0.5, 0.5, size=4))
    wv = _weights(rng, x.shape)
    base = nets.instance_norm(ad.constant(x), scale=scale, shift=shift).data

    def f(t):
        return ((nets.instance_norm(t, scale=scale, shift=shift) - base) * wv).sum()

    return ad.gradient_check(f, x, step=STEP, tol=TOL)


def _check_self_attention(seed: int) -> ad.GradCheckReport:
    rng = np.random.default_rng([seed, 8])
    c, h, w = 4, 16, 16
    x = rng.normal(0, 0.8, size=(1, c, h, w))
    wq = ad.constant(rng.normal(0, 0.4, size=(1, c, 1, 1)))
    wk = ad.constant(rng.normal(0, 0.4, size=(1, c, 1, 1)))
    wv_ = ad.constant(rng.normal(0, 0.4, size=(c, c, 1, 1)))
    wo = ad.constant(rng.normal(0, 0.4, size=(c, c, 1, 1)))
    gamma = ad.constant(np.array([0.7]))
    wv = _weights(rng, x.shape)
    base, _ = nets.self_attention(ad.constant(x), wq, wk, wv_, wo, gamma)
    base = base.data

    def f(t):
        out, _ = nets.self_attention(t, wq, wk, wv_, wo, gamma)
        return ((out - base) * wv).sum()

    return ad.gradient_check(f, x, step=STEP, tol=TOL)


CHECKS = {
    "distort_point": ("camera", _check_distort_point),
    "warp_depth": ("geometry", _check_warp_depth),
    "warp_pose": ("geometry", _check_warp_pose),
    "bilinear_sample": ("geometry", _check_bilinear_sample),
    "ssim": ("losses", _check_ssim),
    "smoothness_loss": ("losses", _check_smoothness),
    "total_loss": ("losses", _check_total_loss),
    "instance_norm": ("networks", _check_instance_norm),
    "self_attention": ("networks", _check_self_attention),
}

SCOPES = ("camera", "geometry", "losses", "networks")


def run_check(name: str, seed: int = 0) -> ad.GradCheckReport:
    if name not in CHECKS:
        raise ValidationError(f"unknown check {name!r}")
    return CHECKS[name][1](seed)


def run_scope(scope: str, seed: int = 0) -> list:
    """Run every check in a scope ('all' for the full suite).

    Returns [(name, GradCheckReport)] in registry order.
    """
    if scope != "all" and scope not in SCOPES:
        raise ValidationError(f"unknown scope {scope!r}; pick from "
                              f"{', '.join(SCOPES)} or all")
    out = []
    for name, (sc, fn) in CHECKS.items():
        if scope == "all" or sc == scope:
            out.append((name, fn(seed)))
    return out
