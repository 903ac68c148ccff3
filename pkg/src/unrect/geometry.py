"""Rigid-body poses and the projection chain.

The chain maps distorted target pixels to undistorted source-view pixel
coordinates: undistort via a precomputed map, unproject through the inverse
intrinsics scaled by depth, rigidly transform, project through the
intrinsics, dehomogenize.

Pose convention: world-to-camera, p_cam = R @ p_world + t. A relative pose
taking points from view A's camera frame into view B's is T_B compose
inverse(T_A).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .camera import CameraIntrinsics, UndistortionMap
from .errors import ShapeError, ValidationError

DEPTH_MIN = 0.1
DEPTH_MAX = 100.0

Z_EPS = 1e-5
PROJECT_MARGIN = 1.0


@dataclass
class PoseSE3:
    """World-to-camera rigid transform, R (3,3) and t (3,) in meters."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.R.shape != (3, 3) or self.t.shape != (3,):
            raise ShapeError("PoseSE3", self.R.shape, self.t.shape)
        if not (np.isfinite(self.R).all() and np.isfinite(self.t).all()):
            raise ValidationError("PoseSE3: non-finite entries")
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > 1e-10:
            raise ValidationError(f"PoseSE3: R not orthonormal, max deviation {err:.3e}")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-10:
            raise ValidationError("PoseSE3: det(R) != +1")

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other: (self.compose(other))(p) = self(other(p))."""
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform points shaped (..., 3)."""
        return pts @ self.R.T + self.t

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.R, self.t[:, None]])

    @staticmethod
    def from_matrix34(m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 4):
            raise ShapeError("PoseSE3.from_matrix34", m.shape)
        return PoseSE3(m[:, :3], m[:, 3])


@dataclass
class PoseParams6:
    """Six-parameter pose: axis-angle rotation (radians) plus translation."""

    axis_angle: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.axis_angle.shape != (3,) or self.translation.shape != (3,):
            raise ShapeError("PoseParams6", self.axis_angle.shape, self.translation.shape)
        if not (np.isfinite(self.axis_angle).all() and np.isfinite(self.translation).all()):
            raise ValidationError("PoseParams6: non-finite entries")

    @staticmethod
    def identity() -> "PoseParams6":
        return PoseParams6(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.axis_angle, self.translation])

    @staticmethod
    def from_vector(v) -> "PoseParams6":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (6,):
            raise ShapeError("PoseParams6.from_vector", v.shape)
        return PoseParams6(v[:3], v[3:])


def pose_from_params(p: PoseParams6) -> PoseSE3:
    """Exponential map of the axis-angle parameters, exact through zero."""
    return PoseSE3(ad.rotation_forward(p.axis_angle), p.translation)


def params_from_pose(pose: PoseSE3) -> PoseParams6:
    """Log map; canonical angle in [0, pi). Rejects half-turn rotations
    where the axis sign is ambiguous."""
    r = pose.R
    cos_t = (np.trace(r) - 1.0) / 2.0
    cos_t = min(1.0, max(-1.0, cos_t))
    theta = float(np.arccos(cos_t))
    if theta > np.pi - 1e-6:
        raise ValidationError("params_from_pose: rotation too close to a half turn")
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-6:
        # sin(t)/t ~ 1 - t^2/6, so w/2 * (1 + t^2/6) to second order
        axis_angle = 0.5 * w * (1.0 + theta * theta / 6.0)
    else:
        axis_angle = w * (theta / (2.0 * np.sin(theta)))
    return PoseParams6(axis_angle, pose.t.copy())


def relative_pose(t_from: PoseSE3, t_to: PoseSE3) -> PoseSE3:
    """Transform taking points in t_from's camera frame into t_to's."""
    return t_to.compose(t_from.inverse())


def pose_tensors(vec: DiffTensor):
    """Split a differentiable 6-vector into (R, t) tensors.

    The rotation goes through the dedicated axis-angle primitive so the
    gradient stays exact at zero rotation.
    """
    if vec.data.shape != (6,):
        raise ShapeError("pose_tensors", vec.data.shape)
    return ad.rot_from_axis_angle(vec[0:3]), vec[3:6]


@dataclass
class DepthMap:
    """Per-pixel depth in meters on the distorted target grid."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError("DepthMap", self.values.shape)
        if not np.isfinite(self.values).all():
            raise ValidationError("DepthMap: non-finite values")
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo <= DEPTH_MIN or hi >= DEPTH_MAX:
            raise ValidationError(
                f"DepthMap: values must lie strictly inside ({DEPTH_MIN}, {DEPTH_MAX}), "
                f"got range [{lo:.4g}, {hi:.4g}]")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class WorldPoints:
    """Three rasters of 3-D point coordinates in a camera frame."""

    x: object  # ndarray or DiffTensor, (H,W)
    y: object
    z: object


@dataclass
class SampleCoords:
    """Undistorted source-view pixel coordinates plus a validity mask.

    xs and ys are finite wherever valid is set; invalid entries hold zeros.
    """

    xs: object  # ndarray or DiffTensor, (H,W)
    ys: object
    valid: np.ndarray


def _raster(depth) -> object:
    if isinstance(depth, DepthMap):
        return ad.constant(depth.values)
    if isinstance(depth, DiffTensor):
        return depth
    return ad.constant(np.asarray(depth))


def _pose_rt(pose):
    if isinstance(pose, PoseSE3):
        return ad.constant(pose.R), ad.constant(pose.t)
    r, t = pose
    if not isinstance(r, DiffTensor):
        r = ad.constant(np.asarray(r))
    if not isinstance(t, DiffTensor):
        t = ad.constant(np.asarray(t))
    return r, t


def unproject(depth, intr: CameraIntrinsics, umap: UndistortionMap) -> WorldPoints:
    """Back-project each distorted pixel along its undistorted ray.

    depth may be a DepthMap, a raw raster, or a differentiable tensor; the
    z output is the depth itself, bit for bit.
    """
    d = _raster(depth)
    if d.data.shape != (umap.height, umap.width):
        raise ShapeError("unproject", d.data.shape, (umap.height, umap.width))
    yn = (umap.yu - intr.cy) / intr.fy
    xn = (umap.xu - intr.cx - intr.skew * yn) / intr.fx
    return WorldPoints(x=d * xn, y=d * yn, z=d)


def transform_points(w: WorldPoints, pose) -> WorldPoints:
    """Apply a rigid transform to point rasters.

    pose is a PoseSE3 (fixed) or an (R, t) pair of tensors from
    pose_tensors() (differentiable).
    """
    r, t = _pose_rt(pose)
    x, y, z = w.x, w.y, w.z
    return WorldPoints(
        x=r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0],
        y=r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1],
        z=r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2])


def project(w: WorldPoints, intr: CameraIntrinsics,
            margin: float = PROJECT_MARGIN, z_eps: float = Z_EPS) -> SampleCoords:
    """Pinhole projection to undistorted pixel coordinates.

    Points at or behind z_eps, and projections landing outside the image
    rectangle grown by margin pixels, are masked invalid rather than
    raised; masked entries are zeroed so nothing non-finite escapes.
    """
    x = w.x if isinstance(w.x, DiffTensor) else ad.constant(np.asarray(w.x))
    y = w.y if isinstance(w.y, DiffTensor) else ad.constant(np.asarray(w.y))
    z = w.z if isinstance(w.z, DiffTensor) else ad.constant(np.asarray(w.z))
    in_front = z.data > z_eps
    z_safe = ad.where(in_front, z, 1.0)
    u = (intr.fx * x + intr.skew * y + intr.cx * z) / z_safe
    v = (intr.fy * y + intr.cy * z) / z_safe
    xs = ad.where(in_front, u, 0.0)
    ys = ad.where(in_front, v, 0.0)
    valid = in_front & _inside(intr, xs.data, ys.data, margin)
    return SampleCoords(xs=xs, ys=ys, valid=valid)


def _inside(intr: CameraIntrinsics, xs: np.ndarray, ys: np.ndarray, margin: float) -> np.ndarray:
    return ((xs >= -margin) & (xs <= intr.width - 1 + margin)
            & (ys >= -margin) & (ys <= intr.height - 1 + margin))


def warp_coordinates(depth, intr: CameraIntrinsics, umap: UndistortionMap, pose,
                     margin: float = PROJECT_MARGIN, z_eps: float = Z_EPS) -> SampleCoords:
    """Full chain from distorted target pixels to undistorted source
    coordinates, differentiable w.r.t. depth and pose tensors.

    A fixed pose that is exactly the identity collapses the chain to the
    undistortion map itself. The collapse is mathematically exact (the warp
    does not depend on depth then) and sidesteps rounding noise from the
    multiply-then-divide round trip; differentiable poses never take this
    path, so training gradients are unaffected.
    """
    if (isinstance(pose, PoseSE3) and pose.t.shape == (3,) and not pose.t.any()
            and np.array_equal(pose.R, np.eye(3))):
        d = _raster(depth)
        if d.data.shape != (umap.height, umap.width):
            raise ShapeError("warp_coordinates", d.data.shape, (umap.height, umap.width))
        valid = (d.data > z_eps) & _inside(intr, umap.xu, umap.yu, margin)
        return SampleCoords(xs=ad.constant(umap.xu), ys=ad.constant(umap.yu), valid=valid)
    return project(transform_points(unproject(depth, intr, umap), pose),
                   intr, margin=margin, z_eps=z_eps)
