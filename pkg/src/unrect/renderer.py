"""Synthetic distorted-camera scene renderer.

Scenes are a handful of analytic primitives (fronto-parallel rectangles,
axis-aligned boxes) carrying procedural value-noise textures. Views are
ray-cast per distorted pixel, so ground-truth depth is exact: each pixel's
undistorted coordinate defines a ray, and the depth is the analytic
intersection parameter, with no rasterization or z-buffer in between.

Poses follow the extrinsic convention used everywhere else in the package:
a view's pose maps world coordinates into that camera's frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import camera as cam
from .errors import ValidationError
from .geometry import DEPTH_MAX, DEPTH_MIN, PoseSE3, relative_pose

_HASH_A = np.uint64(0x9E3779B97F4A7C15)
_HASH_B = np.uint64(0xC2B2AE3D27D4EB4F)
_HASH_C = np.uint64(0x165667B19E3779F9)


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> uniform [0,1). Pure integer mixing, so
    the same lattice point always gets the same value on every platform."""
    seed_term = np.uint64((int(seed) * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF)
    h = (ix.astype(np.int64).view(np.uint64) * _HASH_A
         ^ iy.astype(np.int64).view(np.uint64) * _HASH_B
         ^ seed_term)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass(frozen=True)
class Texture:
    """Smoothed value noise; scale is the lattice cell size in meters and
    octaves add finer detail, so gradient energy is tunable."""

    seed: int = 0
    scale: float = 1.0
    octaves: int = 2
    contrast: float = 0.8
    base: float = 0.5

    def __post_init__(self):
        if self.scale <= 0 or not (0 < self.octaves <= 8):
            raise ValidationError("Texture: scale must be positive, octaves in 1..8")

    def sample(self, u: np.ndarray, v: np.ndarray, channel: int) -> np.ndarray:
        total = np.zeros_like(u, dtype=float)
        norm = 0.0
        amp = 1.0
        freq = 1.0 / self.scale
        for o in range(self.octaves):
            uu, vv = u * freq, v * freq
            iu, iv = np.floor(uu).astype(np.int64), np.floor(vv).astype(np.int64)
            fu, fv = uu - iu, vv - iv
            fu = fu * fu * (3.0 - 2.0 * fu)
            fv = fv * fv * (3.0 - 2.0 * fv)
            s = self.seed * 97 + channel * 131 + o * 7919
            v00 = _hash01(iu, iv, s)
            v10 = _hash01(iu + 1, iv, s)
            v01 = _hash01(iu, iv + 1, s)
            v11 = _hash01(iu + 1, iv + 1, s)
            val = (v00 * (1 - fu) * (1 - fv) + v10 * fu * (1 - fv)
                   + v01 * (1 - fu) * fv + v11 * fu * fv)
            total += amp * val
            norm += amp
            amp *= 0.5
            freq *= 2.0
        noise = total / norm
        return np.clip(self.base + self.contrast * (noise - 0.5), 0.0, 1.0)


@dataclass(frozen=True)
class Plane:
    """Fronto-parallel textured rectangle at world depth z; ranges of None
    extend to infinity (background walls)."""

    z: float
    texture: Texture
    x_range: tuple | None = None
    y_range: tuple | None = None

    def __post_init__(self):
        if not (DEPTH_MIN < self.z < DEPTH_MAX):
            raise ValidationError(f"Plane: z={self.z} outside ({DEPTH_MIN}, {DEPTH_MAX})")


@dataclass(frozen=True)
class Box:
    """Axis-aligned textured box given by two corners."""

    lo: tuple
    hi: tuple
    texture: Texture

    def __post_init__(self):
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ValidationError("Box: corners must be 3-vectors")
        if any(l >= h for l, h in zip(self.lo, self.hi)):
            raise ValidationError("Box: lo must be strictly below hi per axis")
        if not (DEPTH_MIN < self.lo[2] and self.hi[2] < DEPTH_MAX):
            raise ValidationError("Box: z extent outside the depth range")


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    background_depth: float = 80.0

    def __post_init__(self):
        if not self.primitives:
            raise ValidationError("SceneSpec: at least one primitive required")
        if not (DEPTH_MIN < self.background_depth < DEPTH_MAX):
            raise ValidationError("SceneSpec: background depth outside range")


@dataclass
class RenderedView:
    image: np.ndarray           # (3, H, W) in [0,1]
    depth_gt: np.ndarray        # (H, W) meters, positive
    pose: PoseSE3               # world -> this camera
    occlusion_mask: np.ndarray  # True where a ray actually hit a surface

    def __post_init__(self):
        if not np.isfinite(self.depth_gt).all() or (self.depth_gt <= 0).any():
            raise ValidationError("RenderedView: depth must be finite and positive")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValidationError("RenderedView: image values outside [0,1]")


def _intersect_plane(prim: Plane, ox, oy, oz, dx, dy, dz):
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (prim.z - oz) / dz
    hit = np.isfinite(lam) & (lam > 1e-9)
    px, py = ox + lam * dx, oy + lam * dy
    if prim.x_range is not None:
        hit &= (px >= prim.x_range[0]) & (px <= prim.x_range[1])
    if prim.y_range is not None:
        hit &= (py >= prim.y_range[0]) & (py <= prim.y_range[1])
    return np.where(hit, lam, np.inf), px, py, np.full_like(lam, prim.z)


def _intersect_box(prim: Box, ox, oy, oz, dx, dy, dz):
    lo, hi = np.asarray(prim.lo, dtype=float), np.asarray(prim.hi, dtype=float)
    origin = (ox, oy, oz)
    direc = (dx, dy, dz)
    t_near = np.full(ox.shape, -np.inf)
    t_far = np.full(ox.shape, np.inf)
    axis_entry = np.zeros(ox.shape, dtype=np.int8)
    for a in range(3):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[a] - origin[a]) / direc[a]
            t2 = (hi[a] - origin[a]) / direc[a]
        # parallel ray outside the slab never hits
        parallel = direc[a] == 0.0
        outside = parallel & ((origin[a] < lo[a]) | (origin[a] > hi[a]))
        near = np.where(parallel, -np.inf, np.minimum(t1, t2))
        far = np.where(parallel, np.inf, np.maximum(t1, t2))
        far = np.where(outside, -np.inf, far)
        take = near > t_near
        axis_entry = np.where(take, a, axis_entry)
        t_near = np.maximum(t_near, near)
        t_far = np.minimum(t_far, far)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    lam = np.where(hit, t_near, np.inf)
    px, py, pz = ox + lam * dx, oy + lam * dy, oz + lam * dz
    return lam, px, py, pz, axis_entry


def render_view(scene: SceneSpec, intr: cam.CameraIntrinsics,
                coeffs: cam.DistortionCoeffs, pose: PoseSE3,
                umap: cam.UndistortionMap | None = None) -> RenderedView:
    """Ray-cast one distorted view of the scene.

    pose maps world coordinates to camera coordinates. Pixels whose ray
    misses every primitive get the scene background depth and a mid-gray
    color, flagged False in occlusion_mask.
    """
    if umap is None:
        umap = cam.build_undistortion_map(intr, coeffs)
    h, w = umap.height, umap.width
    yn = (umap.yu - intr.cy) / intr.fy
    xn = (umap.xu - intr.cx - intr.skew * yn) / intr.fx
    rt = pose.inverse()
    center = rt.t
    ox = np.full((h, w), center[0])
    oy = np.full((h, w), center[1])
    oz = np.full((h, w), center[2])
    dx = rt.R[0, 0] * xn + rt.R[0, 1] * yn + rt.R[0, 2]
    dy = rt.R[1, 0] * xn + rt.R[1, 1] * yn + rt.R[1, 2]
    dz = rt.R[2, 0] * xn + rt.R[2, 1] * yn + rt.R[2, 2]

    best = np.full((h, w), np.inf)
    image = np.full((3, h, w), 0.5)
    for prim in scene.primitives:
        if isinstance(prim, Plane):
            lam, px, py, _ = _intersect_plane(prim, ox, oy, oz, dx, dy, dz)
            closer = lam < best
            if closer.any():
                u = np.where(closer, px, 0.0)
                v = np.where(closer, py, 0.0)
                for c in range(3):
                    tex = prim.texture.sample(u, v, c)
                    image[c] = np.where(closer, tex, image[c])
                best = np.where(closer, lam, best)
        elif isinstance(prim, Box):
            lam, px, py, pz, axis_entry = _intersect_box(prim, ox, oy, oz, dx, dy, dz)
            closer = lam < best
            if closer.any():
                # parameterize the texture on the entry face's two free axes
                u = np.where(closer, np.where(axis_entry == 0, py, px), 0.0)
                v = np.where(closer, np.where(axis_entry == 2, py, pz), 0.0)
                for c in range(3):
                    tex = prim.texture.sample(u, v, c)
                    image[c] = np.where(closer, tex, image[c])
                best = np.where(closer, lam, best)
        else:
            raise ValidationError(f"render_view: unknown primitive {type(prim).__name__}")
    hit_any = np.isfinite(best)
    depth = np.where(hit_any, best, scene.background_depth)
    # rays exactly along the camera plane produce lam=inf -> background
    return RenderedView(image=image, depth_gt=depth, pose=pose, occlusion_mask=hit_any)


def cross_view_visibility(view_a: RenderedView, view_b: RenderedView,
                          intr: cam.CameraIntrinsics, coeffs: cam.DistortionCoeffs,
                          umap: cam.UndistortionMap, depth_tol: float = 0.05) -> np.ndarray:
    """True where view A's surface point is visible (not occluded, in frame)
    in view B, judged by a depth test against B's ground truth."""
    h, w = view_a.depth_gt.shape
    yn = (umap.yu - intr.cy) / intr.fy
    xn = (umap.xu - intr.cx - intr.skew * yn) / intr.fx
    d = view_a.depth_gt
    rel = relative_pose(view_a.pose, view_b.pose)
    pts = np.stack([d * xn, d * yn, d], axis=0).reshape(3, -1)
    moved = rel.R @ pts + rel.t[:, None]
    px, py, pz = (m.reshape(h, w) for m in moved)
    ok = pz > 1e-5
    zs = np.where(ok, pz, 1.0)
    xb = px / zs
    yb = py / zs
    xd, yd = cam.distort(xb, yb, coeffs)
    ub = intr.fx * xd + intr.skew * yd + intr.cx
    vb = intr.fy * yd + intr.cy
    iu = np.rint(ub).astype(int)
    iv = np.rint(vb).astype(int)
    inside = ok & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    iu_c, iv_c = np.clip(iu, 0, w - 1), np.clip(iv, 0, h - 1)
    seen = view_b.depth_gt[iv_c, iu_c]
    visible = inside & (pz <= seen * (1.0 + depth_tol) + depth_tol)
    return visible & view_a.occlusion_mask


def texture_mask(image: np.ndarray, threshold: float = 0.02) -> np.ndarray:
    """True where the local image gradient carries enough energy for the
    photometric loss to constrain depth."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    gx = np.abs(np.diff(img, axis=2)).mean(axis=0)
    gy = np.abs(np.diff(img, axis=1)).mean(axis=0)
    e = np.zeros(img.shape[1:])
    e[:, :-1] += gx
    e[:, 1:] += gx
    e[:-1, :] += gy
    e[1:, :] += gy
    k = np.ones(3) / 3.0
    e = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, e)
    e = np.apply_along_axis(lambda c: np.convolve(c, k, mode="same"), 0, e)
    return e > threshold


def make_reference_scene(seed: int = 0) -> SceneSpec:
    """Single textured fronto-parallel plane: the benchmark for recovery."""
    return SceneSpec(primitives=(
        Plane(z=10.0, texture=Texture(seed=seed, scale=1.5, octaves=3, contrast=0.9)),),
        background_depth=80.0)


def make_parallax_scene(seed: int = 3) -> SceneSpec:
    """Backdrop plane plus two near boxes at staggered depths.

    Pose fitting needs depth variation across the frame: without it,
    sideways translation and small rotations trade off along a flat
    valley. The near boxes provide the parallax contrast that pins the
    translation scale split per axis.
    """
    return SceneSpec(primitives=(
        Plane(z=20.0, texture=Texture(seed=seed, scale=3.0, octaves=3, contrast=0.9)),
        Box(lo=(-5.0, -2.5, 3.0), hi=(-1.0, 2.5, 6.0),
            texture=Texture(seed=seed + 1, scale=0.8, octaves=3, contrast=0.9)),
        Box(lo=(1.0, -3.0, 7.0), hi=(6.0, 2.0, 10.0),
            texture=Texture(seed=seed + 2, scale=1.0, octaves=3, contrast=0.9)),
    ), background_depth=80.0)


def make_scene_set(n: int, seed: int = 0) -> list:
    """Deterministic family of box-and-plane scenes for toy training.

    Desk scale on purpose: the disparity head is a sigmoid whose zero-init
    predicts roughly 0.2 m everywhere, and the pose network immediately
    locks onto whatever joint depth/translation scale that implies. Scenes
    built around the same scale start that coupled system near truth; scenes
    tens of meters out leave it stuck in a collapsed minimum where the
    compensating translations are so small the depth gradients starve.
    """
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        # depth band is deliberately narrow: photometric pull on a surface
        # falls off as 1/z^2, and planes much past 0.35 m get squeezed
        # toward the near cluster instead of fit
        prims = [Plane(z=float(rng.uniform(0.26, 0.34)),
                       texture=Texture(seed=int(rng.integers(1 << 30)),
                                       scale=float(rng.uniform(0.06, 0.12)),
                                       octaves=1, contrast=0.9))]
        for _ in range(int(rng.integers(3, 5))):
            cx_, cy_ = rng.uniform(-0.2, 0.2), rng.uniform(-0.08, 0.08)
            z0 = float(rng.uniform(0.13, 0.22))
            sx, sy = rng.uniform(0.07, 0.13, size=2)
            sz = float(rng.uniform(0.04, 0.1))
            # single-octave texture: the reconstruction is two bilinear
            # resamples deep, and multi-octave detail near the pixel scale
            # pays an irreducible blur penalty that swamps the depth signal
            prims.append(Box(lo=(cx_ - sx, cy_ - sy, z0),
                             hi=(cx_ + sx, cy_ + sy, z0 + sz),
                             texture=Texture(seed=int(rng.integers(1 << 30)),
                                             scale=float(rng.uniform(0.02, 0.06)),
                                             octaves=1, contrast=0.9)))
        scenes.append(SceneSpec(primitives=tuple(prims)))
    return scenes


def scene_to_json(scene: SceneSpec) -> str:
    prims = []
    for p in scene.primitives:
        t = {"seed": p.texture.seed, "scale": p.texture.scale,
             "octaves": p.texture.octaves, "contrast": p.texture.contrast,
             "base": p.texture.base}
        if isinstance(p, Plane):
            prims.append({"kind": "plane", "z": p.z, "x_range": p.x_range,
                          "y_range": p.y_range, "texture": t})
        else:
            prims.append({"kind": "box", "lo": list(p.lo), "hi": list(p.hi),
                          "texture": t})
    return json.dumps({"background_depth": scene.background_depth,
                       "primitives": prims}, indent=2)


def scene_from_json(text: str) -> SceneSpec:
    try:
        doc = json.loads(text)
        prims = []
        for p in doc["primitives"]:
            tex = Texture(**p["texture"])
            if p["kind"] == "plane":
                xr = tuple(p["x_range"]) if p.get("x_range") else None
                yr = tuple(p["y_range"]) if p.get("y_range") else None
                prims.append(Plane(z=float(p["z"]), texture=tex, x_range=xr, y_range=yr))
            elif p["kind"] == "box":
                prims.append(Box(lo=tuple(p["lo"]), hi=tuple(p["hi"]), texture=tex))
            else:
                raise ValidationError(f"scene: unknown primitive kind {p['kind']!r}")
        return SceneSpec(primitives=tuple(prims),
                         background_depth=float(doc.get("background_depth", 80.0)))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ValidationError(f"scene: malformed document ({e})") from e
