"""Pinhole intrinsics and the radial-tangential lens distortion model.

Distortion is evaluated in normalized image coordinates (pixel coordinates
mapped through the inverse intrinsic matrix). The forward model follows the
usual five-coefficient convention:

    r2 = x^2 + y^2
    g  = 1 + k1*r2 + k2*r2^2 + k3*r2^3
    xd = x*g + 2*p1*x*y + p2*(r2 + 2*x^2)
    yd = y*g + p1*(r2 + y^2) + 2*p2*x*y

Note the tangential terms are not mirror images: the y equation carries a
single y^2 next to r2. That asymmetric form is what this package is built
against and what all frozen test values assume.

The inverse has no closed form; undistort() inverts it iteratively.

Every public entry point bumps a call counter, so callers can assert that a
given code path (for example plain depth inference) never touches the
distortion machinery.
"""
from __future__ import annotations

import collections
from dataclasses import dataclass

import numpy as np

from .errors import DistortionDomainError, InversionError, ValidationError

_calls = collections.Counter()


def call_counts() -> dict:
    """Copy of the per-function distortion call counters."""
    return dict(_calls)


def calls_total() -> int:
    return sum(_calls.values())


def reset_call_counts() -> None:
    _calls.clear()


def _count(name: str) -> None:
    _calls[name] += 1


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with optional axis skew, sizes in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 2 or self.height < 2:
            raise ValidationError(f"image size must be at least 2x2, got {self.width}x{self.height}")
        for name in ("fx", "fy", "cx", "cy", "skew"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"intrinsic {name} must be finite")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        # closed-form inverse of the upper-triangular intrinsic matrix
        return np.array([[1.0 / self.fx, -self.skew / (self.fx * self.fy),
                          (self.skew * self.cy - self.cx * self.fy) / (self.fx * self.fy)],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def normalize(self, x, y):
        """Pixel coordinates to normalized coordinates. Works on arrays and
        on differentiable tensors (arithmetic only)."""
        yn = (y - self.cy) / self.fy
        xn = (x - self.cx - self.skew * yn) / self.fx
        return xn, yn

    def denormalize(self, xn, yn):
        """Normalized coordinates back to pixel coordinates."""
        return self.fx * xn + self.skew * yn + self.cx, self.fy * yn + self.cy


@dataclass(frozen=True)
class DistortionCoeffs:
    """Radial (k1,k2,k3) and tangential (p1,p2) coefficients."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "p1", "p2"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"distortion coefficient {name} must be finite")

    def is_zero(self) -> bool:
        return self.k1 == self.k2 == self.k3 == self.p1 == self.p2 == 0.0


def radial_factor(x, y, c: DistortionCoeffs):
    """g(r2) evaluated with Horner's scheme; arithmetic only, so it accepts
    numpy arrays and differentiable tensors alike."""
    r2 = x * x + y * y
    return 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * c.k3))


def _distort_raw(x, y, c: DistortionCoeffs):
    r2 = x * x + y * y
    g = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * c.k3))
    xy = x * y
    xd = x * g + 2.0 * c.p1 * xy + c.p2 * (r2 + 2.0 * x * x)
    yd = y * g + c.p1 * (r2 + y * y) + 2.0 * c.p2 * xy
    return xd, yd


def distort(x, y, c: DistortionCoeffs):
    """Apply the forward distortion model in normalized coordinates.

    Accepts scalars, numpy arrays, or differentiable tensors; the tensor
    path is what lets synthesis gradients flow through the lens model.
    """
    _count("distort")
    return _distort_raw(x, y, c)


def distort_jacobian(x, y, c: DistortionCoeffs):
    """Partial derivatives of the distorted w.r.t. undistorted coordinates.

    Returns (dxd_dx, dxd_dy, dyd_dx, dyd_dy); the cross terms are equal by
    symmetry of the model.
    """
    _count("distort_jacobian")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r2 = x * x + y * y
    g = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * c.k3))
    gp = c.k1 + r2 * (2.0 * c.k2 + r2 * (3.0 * c.k3))  # dg/dr2
    dxdx = g + 2.0 * x * x * gp + 2.0 * c.p1 * y + 6.0 * c.p2 * x
    dxdy = 2.0 * x * y * gp + 2.0 * c.p1 * x + 2.0 * c.p2 * y
    dydy = g + 2.0 * y * y * gp + 4.0 * c.p1 * y + 2.0 * c.p2 * x
    return dxdx, dxdy, dxdy.copy(), dydy


_DAMP_MIN = 1.0 / 64.0


def _undistort_core(xd: np.ndarray, yd: np.ndarray, c: DistortionCoeffs,
                    tol: float, max_iter: int):
    """Vectorized inversion shared by the scalar API and the map builder.

    Damped fixed-point iteration; elements freeze the moment they converge,
    so each element's arithmetic trajectory is independent of how the batch
    is laid out. Elements still active after half the iteration budget
    switch to Newton steps using the analytic Jacobian. Steps that do not
    reduce the residual are rejected and retried with a halved damping
    factor.
    """
    x = xd.astype(np.float64).copy()
    y = yd.astype(np.float64).copy()

    def residual(xs, ys, txd, tyd):
        fx_, fy_ = _distort_raw(xs, ys, c)
        return np.maximum(np.abs(fx_ - txd), np.abs(fy_ - tyd))

    err = residual(x, y, xd, yd)
    damp = np.ones_like(x)
    newton_from = max_iter // 2
    for it in range(max_iter):
        idx = np.flatnonzero(err >= tol)
        if idx.size == 0:
            break
        xa, ya = x.flat[idx], y.flat[idx]
        txd, tyd = xd.flat[idx].astype(np.float64), yd.flat[idx].astype(np.float64)
        if it < newton_from:
            r2 = xa * xa + ya * ya
            g = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * c.k3))
            xy = xa * ya
            tx = 2.0 * c.p1 * xy + c.p2 * (r2 + 2.0 * xa * xa)
            ty = c.p1 * (r2 + ya * ya) + 2.0 * c.p2 * xy
            with np.errstate(divide="ignore", invalid="ignore"):
                fp_x = (txd - tx) / g
                fp_y = (tyd - ty) / g
            ok = np.isfinite(fp_x) & np.isfinite(fp_y)
            da = damp.flat[idx]
            x_new = np.where(ok, xa + da * (fp_x - xa), xa)
            y_new = np.where(ok, ya + da * (fp_y - ya), ya)
        else:
            fx_, fy_ = _distort_raw(xa, ya, c)
            j11, j12, j21, j22 = distort_jacobian(xa, ya, c)
            _calls["distort_jacobian"] -= 1  # internal use, not a user call
            rx, ry = fx_ - txd, fy_ - tyd
            det = j11 * j22 - j12 * j21
            ok = np.abs(det) > 1e-12
            det_safe = np.where(ok, det, 1.0)
            da = damp.flat[idx]
            x_new = xa - da * np.where(ok, (j22 * rx - j12 * ry) / det_safe, 0.0)
            y_new = ya - da * np.where(ok, (-j21 * rx + j11 * ry) / det_safe, 0.0)
        new_err = residual(x_new, y_new, txd, tyd)
        improved = new_err < err.flat[idx]
        take = idx[improved]
        x.flat[take] = x_new[improved]
        y.flat[take] = y_new[improved]
        err.flat[take] = new_err[improved]
        damp.flat[take] = 1.0
        stuck = idx[~improved]
        damp.flat[stuck] = np.maximum(damp.flat[stuck] * 0.5, _DAMP_MIN)
    return x, y, err


def undistort(xd, yd, c: DistortionCoeffs, tol: float = 1e-9, max_iter: int = 50):
    """Invert the distortion model at the given normalized coordinates.

    Raises InversionError if any element fails to reach tol (normalized
    units) within max_iter iterations.
    """
    _count("undistort")
    if tol <= 0 or max_iter < 1:
        raise ValidationError(f"undistort: bad tol={tol} or max_iter={max_iter}")
    xd_a = np.asarray(xd, dtype=np.float64)
    yd_a = np.asarray(yd, dtype=np.float64)
    if xd_a.shape != yd_a.shape:
        raise ValidationError(f"undistort: coordinate shapes differ, {xd_a.shape} vs {yd_a.shape}")
    scalar = xd_a.ndim == 0
    x, y, err = _undistort_core(np.atleast_1d(xd_a), np.atleast_1d(yd_a), c, tol, max_iter)
    bad = err >= tol
    if bad.any():
        raise InversionError(
            f"undistortion did not converge for {int(bad.sum())} of {err.size} points, "
            f"worst residual {float(err.max()):.3e} (tol {tol:g})",
            worst_residual=float(err.max()), n_failed=int(bad.sum()))
    if scalar:
        return float(x[0]), float(y[0])
    return x.reshape(xd_a.shape), y.reshape(yd_a.shape)


def validate_distortion(intr: CameraIntrinsics, c: DistortionCoeffs) -> float:
    """Check that the radial mapping r -> r*g(r^2) is strictly increasing
    over (a margin beyond) the image footprint.

    Returns the largest undistorted radius needed to cover the footprint.
    Raises DistortionDomainError when the coefficients fold the footprint
    onto itself and no unique inverse exists.
    """
    _count("validate_distortion")
    w, h = intr.width - 1.0, intr.height - 1.0
    xs = np.array([0.0, w, 0.0, w, w / 2, 0.0, w, w / 2])
    ys = np.array([0.0, 0.0, h, h, 0.0, h / 2, h / 2, h])
    xn, yn = intr.normalize(xs, ys)
    r_need = float(np.sqrt(xn * xn + yn * yn).max()) * 1.02
    rs = np.linspace(0.0, max(3.0 * r_need, 1e-3), 8192)
    r2 = rs * rs
    psi = rs * (1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * c.k3)))
    dpsi = np.diff(psi)
    nonmono = np.flatnonzero(dpsi <= 0.0)
    limit = nonmono[0] + 1 if nonmono.size else psi.size
    if psi[:limit].max() < r_need:
        raise DistortionDomainError(
            f"distortion not invertible over the image footprint: radial map covers "
            f"radius {psi[:limit].max():.4f} but the footprint needs {r_need:.4f}")
    covered = np.flatnonzero(psi[:limit] >= r_need)
    return float(rs[covered[0]])


@dataclass
class UndistortionMap:
    """Per distorted pixel, the undistorted pixel coordinates.

    xu, yu are (height, width) float64 rasters. tolerance is the normalized
    convergence threshold used at build time and residual the worst forward
    remap error actually achieved (also normalized units).
    """

    width: int
    height: int
    xu: np.ndarray
    yu: np.ndarray
    tolerance: float
    residual: float

    def __post_init__(self):
        expect = (self.height, self.width)
        if self.xu.shape != expect or self.yu.shape != expect:
            raise ValidationError(f"map rasters must be {expect}, got {self.xu.shape} and {self.yu.shape}")
        if not (np.isfinite(self.xu).all() and np.isfinite(self.yu).all()):
            raise ValidationError("map rasters must be finite")


def pixel_grid(intr: CameraIntrinsics):
    """Pixel-center coordinate rasters, x varying along width."""
    ys, xs = np.meshgrid(np.arange(intr.height, dtype=np.float64),
                         np.arange(intr.width, dtype=np.float64), indexing="ij")
    return xs, ys


def build_undistortion_map(intr: CameraIntrinsics, c: DistortionCoeffs,
                           tol: float = 1e-9, max_iter: int = 50) -> UndistortionMap:
    """Invert the distortion at every pixel of the sensor grid.

    Runs the same vectorized core as undistort(), so the result agrees with
    pointwise calls bit for bit.
    """
    _count("build_undistortion_map")
    validate_distortion(intr, c)
    _calls["validate_distortion"] -= 1  # internal use
    xs, ys = pixel_grid(intr)
    xn, yn = intr.normalize(xs, ys)
    xu_n, yu_n, err = _undistort_core(xn, yn, c, tol, max_iter)
    if (err >= tol).any():
        raise InversionError(
            f"map build failed to converge for {int((err >= tol).sum())} pixels, "
            f"worst residual {float(err.max()):.3e}",
            worst_residual=float(err.max()), n_failed=int((err >= tol).sum()))
    xu, yu = intr.denormalize(xu_n, yu_n)
    return UndistortionMap(width=intr.width, height=intr.height, xu=xu, yu=yu,
                           tolerance=tol, residual=float(err.max()))


def distortion_lookup(intr: CameraIntrinsics, c: DistortionCoeffs):
    """For every pixel of an undistorted output grid, the distorted source
    pixel position. Pure forward evaluation, no iteration involved."""
    _count("distortion_lookup")
    xs, ys = pixel_grid(intr)
    xn, yn = intr.normalize(xs, ys)
    xd_n, yd_n = _distort_raw(xn, yn, c)
    return intr.denormalize(xd_n, yd_n)


def undistort_image(img: np.ndarray, intr: CameraIntrinsics, c: DistortionCoeffs,
                    lookup=None) -> np.ndarray:
    """Resample a distorted image onto the undistorted grid.

    img is (C,H,W). Each output pixel pulls from the forward-distorted
    source position with bilinear interpolation, border queries clamped.
    """
    _count("undistort_image")
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[1] != intr.height or img.shape[2] != intr.width:
        raise ValidationError(
            f"undistort_image: expected (C,{intr.height},{intr.width}), got {img.shape}")
    if lookup is None:
        validate_distortion(intr, c)
        _calls["validate_distortion"] -= 1
        xd, yd = distortion_lookup(intr, c)
        _calls["distortion_lookup"] -= 1
    else:
        xd, yd = lookup
    from . import autodiff as ad
    return ad.grid_sample(ad.constant(img), ad.constant(xd), ad.constant(yd)).data


@dataclass(frozen=True)
class PixelLossReport:
    """How much of the raw sensor a rectifying crop throws away."""

    raw_width: int
    raw_height: int
    rect_width: int
    rect_height: int
    width_loss_pct: float
    height_loss_pct: float


def rectification_pixel_loss(raw_width: int, raw_height: int,
                             rect_width: int, rect_height: int) -> PixelLossReport:
    """Percentage of columns and rows lost when cropping a raw frame to a
    rectified resolution."""
    for name, v in (("raw_width", raw_width), ("raw_height", raw_height),
                    ("rect_width", rect_width), ("rect_height", rect_height)):
        if int(v) != v or v <= 0:
            raise ValidationError(f"{name} must be a positive integer, got {v}")
    if rect_width > raw_width or rect_height > raw_height:
        raise ValidationError(
            f"rectified size {rect_width}x{rect_height} exceeds raw size {raw_width}x{raw_height}")
    return PixelLossReport(
        raw_width=int(raw_width), raw_height=int(raw_height),
        rect_width=int(rect_width), rect_height=int(rect_height),
        width_loss_pct=100.0 * (raw_width - rect_width) / raw_width,
        height_loss_pct=100.0 * (raw_height - rect_height) / raw_height)
