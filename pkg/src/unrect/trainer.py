"""Desk-scale self-supervised training on unrectified frame triplets.

The loop joins the depth and pose networks, the warp stack, and the
photometric objective. Data is synthetic by default (rendered triplets
with known ground truth for held-out evaluation); a directory of frames
plus a camera file trains on real sequences.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import camera as cam
from . import fileio
from . import geometry as geo
from . import losses
from . import networks as nets
from . import renderer as rd
from .errors import DivergenceError, ValidationError
from .optim import Adam

# House coefficient set for the default synthetic camera: barrel-dominant
# with mild decentering, inside the monotonic domain at every raster corner.
DEFAULT_COEFFS = dict(k1=-0.12, k2=0.015, k3=0.0, p1=8e-4, p2=-4e-4)


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 200
    lr: float = 1e-4
    batch_size: int = 1
    height: int = 32
    width: int = 96
    # Static synthetic scenes have no moving objects for the mask to cut,
    # and a masked mean lets a young network grade its own homework by
    # warping badly enough that pixels drop out; off by default here.
    loss: losses.LossConfig = field(
        default_factory=lambda: losses.LossConfig(automask=False))
    camera_path: str | None = None    # None: built-in synthetic camera
    data_kind: str = "synthetic"      # "synthetic" | "directory"
    data_path: str | None = None      # frame directory when data_kind=directory
    scene_count: int = 5
    views_per_scene: int = 3          # triplets rendered per synthetic scene
    checkpoint_every: int = 500
    out_dir: str = "runs/toy"

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValidationError(
                f"image dims must be divisible by 16, got {self.height}x{self.width}")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be >= 1")
        if self.data_kind not in ("synthetic", "directory"):
            raise ValidationError(f"unknown data_kind {self.data_kind!r}")
        if self.data_kind == "directory" and not self.data_path:
            raise ValidationError("data_kind=directory needs data_path")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.views_per_scene < 1:
            raise ValidationError("views_per_scene must be >= 1")

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError(f"train config: {e}")
        if not isinstance(d, dict):
            raise ValidationError("train config must be a JSON object")
        if "loss" in d:
            if not isinstance(d["loss"], dict):
                raise ValidationError("train config: loss must be an object")
            try:
                d["loss"] = losses.LossConfig(**d["loss"])
            except TypeError as e:
                raise ValidationError(f"train config: {e}")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"train config: unknown fields {sorted(extra)}")
        return cls(**d)


@dataclass
class FrameTriplet:
    prev: np.ndarray
    cur: np.ndarray
    nxt: np.ndarray

    def __post_init__(self):
        shapes = {self.prev.shape, self.cur.shape, self.nxt.shape}
        if len(shapes) != 1:
            raise ValidationError(f"triplet frames must share one shape, got {shapes}")
        if self.cur.ndim != 3:
            raise ValidationError("triplet frames must be (channels, H, W)")


@dataclass
class CameraSetup:
    intr: cam.CameraIntrinsics
    coeffs: cam.DistortionCoeffs
    umap: cam.UndistortionMap


@dataclass
class SyntheticSample:
    """One training triplet plus the ground truth the renderer knows."""
    triplet: FrameTriplet
    depth_gt: np.ndarray
    prev_undistorted: np.ndarray
    next_undistorted: np.ndarray
    scene_index: int
    # true cur->prev / cur->next motions as (axis-angle, translation) vectors
    pose_prev_gt: np.ndarray | None = None
    pose_next_gt: np.ndarray | None = None


def default_camera(height: int, width: int) -> tuple:
    intr = cam.CameraIntrinsics(fx=width / 2.0, fy=width / 2.0,
                                cx=width / 2.0 - 0.5, cy=height / 2.0 - 0.5,
                                width=width, height=height)
    return intr, cam.DistortionCoeffs(**DEFAULT_COEFFS)


def make_camera_setup(cfg: TrainConfig) -> CameraSetup:
    if cfg.camera_path:
        intr, coeffs = fileio.load_camera(cfg.camera_path)
        if (intr.height, intr.width) != (cfg.height, cfg.width):
            raise ValidationError(
                f"camera raster {intr.height}x{intr.width} does not match "
                f"config dims {cfg.height}x{cfg.width}")
    else:
        intr, coeffs = default_camera(cfg.height, cfg.width)
    return CameraSetup(intr, coeffs, cam.build_undistortion_map(intr, coeffs))


def make_synthetic_dataset(cfg: TrainConfig, setup: CameraSetup) -> list:
    """Render triplets per scene with a small forward-backward motion.

    Within a triplet the camera sits at +delta at t-1 and -delta at t+1, so
    the target frame sees both sources with opposite parallax. Each scene is
    covered from views_per_scene base viewpoints; a single viewpoint per
    scene lets the depth network memorize five pictures instead of learning
    structure that survives a camera shift. All rendering happens up front;
    the training loop never touches the RNG.
    """
    scenes = rd.make_scene_set(cfg.scene_count, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    samples = []
    for idx, scene in enumerate(scenes):
        bases = [geo.PoseSE3.identity()]
        for _ in range(cfg.views_per_scene - 1):
            brot = rng.uniform(-0.012, 0.012, 3)
            bt = np.array([rng.uniform(-0.012, 0.012),
                           rng.uniform(-0.005, 0.005),
                           rng.uniform(-0.006, 0.006)])
            bases.append(geo.pose_from_params(geo.PoseParams6(brot, bt)))
        for base in bases:
            # one motion draw per triplet, not per scene: a scene that always
            # moves the same way lets the pose regressor serve a memorized
            # answer keyed on scene appearance, with the source-min in the
            # loss hiding whichever branch that answer gets wrong
            tx = float(rng.uniform(0.03, 0.045)) * (1 if rng.random() < 0.5 else -1)
            ty = float(rng.uniform(-0.008, 0.008))
            tz = float(rng.uniform(-0.012, 0.012))
            rot = rng.uniform(-0.02, 0.02, 3)
            vec = np.concatenate([rot, [tx, ty, tz]])
            fwd = geo.pose_from_params(geo.PoseParams6(rot, vec[3:6]))
            bwd = geo.pose_from_params(geo.PoseParams6(-rot, -vec[3:6]))
            cur = rd.render_view(scene, setup.intr, setup.coeffs, base, setup.umap)
            prv = rd.render_view(scene, setup.intr, setup.coeffs,
                                 fwd.compose(base), setup.umap)
            nxt = rd.render_view(scene, setup.intr, setup.coeffs,
                                 bwd.compose(base), setup.umap)
            samples.append(SyntheticSample(
                triplet=FrameTriplet(prv.image, cur.image, nxt.image),
                depth_gt=cur.depth_gt,
                prev_undistorted=cam.undistort_image(prv.image, setup.intr, setup.coeffs),
                next_undistorted=cam.undistort_image(nxt.image, setup.intr, setup.coeffs),
                scene_index=idx,
                pose_prev_gt=vec,
                pose_next_gt=-vec))
    return samples


def load_directory_dataset(cfg: TrainConfig, setup: CameraSetup) -> list:
    """Consecutive triplets from a directory of image frames, sorted by name."""
    names = sorted(n for n in os.listdir(cfg.data_path)
                   if n.lower().endswith(".ppm"))
    if len(names) < 3:
        raise ValidationError(
            f"directory {cfg.data_path!r} holds {len(names)} .ppm frames; need >= 3")
    frames = [fileio.read_image(os.path.join(cfg.data_path, n)) for n in names]
    for n, f in zip(names, frames):
        if f.shape != (3, cfg.height, cfg.width):
            raise ValidationError(f"frame {n}: shape {f.shape} does not match "
                                  f"(3, {cfg.height}, {cfg.width})")
    samples = []
    for i in range(1, len(frames) - 1):
        samples.append(SyntheticSample(
            triplet=FrameTriplet(frames[i - 1], frames[i], frames[i + 1]),
            depth_gt=np.array([]),
            prev_undistorted=cam.undistort_image(frames[i - 1], setup.intr, setup.coeffs),
            next_undistorted=cam.undistort_image(frames[i + 1], setup.intr, setup.coeffs),
            scene_index=i))
    return samples


def _quantize(params: dict) -> None:
    """Round parameters to float32 grid, in place.

    Checkpoints store float32; keeping live parameters on that grid makes
    save -> load -> forward bit-identical to the pre-save forward.
    """
    for k in params:
        params[k] = params[k].astype(np.float32).astype(np.float64)


def train_step(triplet: FrameTriplet, depth_params: dict, pose_params: dict,
               camera: CameraSetup, loss_cfg: losses.LossConfig,
               opt: Adam, net_cfg: nets.NetConfig = nets.NetConfig(),
               sources_undistorted=None):
    """One optimization step; mutates the parameter dicts in place.

    Returns the LossBreakdown of the step. Raises DivergenceError on a
    non-finite loss before any parameter is touched.
    """
    tape = ad.Tape()
    dp = nets.wrap_params(depth_params, tape)
    pp = nets.wrap_params(pose_params, tape)
    disparities = nets.depth_net_forward(triplet.cur, dp, net_cfg)
    pose_prev, pose_next = nets.pose_net_forward(
        (triplet.prev, triplet.cur, triplet.nxt), pp, net_cfg)
    bd = losses.total_loss(triplet.cur, [triplet.prev, triplet.nxt], disparities,
                           [pose_prev, pose_next], camera.intr, camera.coeffs,
                           camera.umap, loss_cfg,
                           sources_undistorted=sources_undistorted)
    if not math.isfinite(bd.total):
        raise DivergenceError("training loss is non-finite", iteration=-1)
    tape.backward(bd.loss)
    params = {}
    grads = {}
    for k, v in dp.items():
        params["depth/" + k] = depth_params[k]
        grads["depth/" + k] = v.grad
    for k, v in pp.items():
        params["pose/" + k] = pose_params[k]
        grads["pose/" + k] = v.grad
    opt.step(params, grads)
    for k in depth_params:
        depth_params[k] = params["depth/" + k]
    for k in pose_params:
        pose_params[k] = params["pose/" + k]
    _quantize(depth_params)
    _quantize(pose_params)
    return bd


@dataclass
class TrainResult:
    checkpoint_path: str
    csv_path: str
    iterations: int
    final_loss: float
    early_mean: float       # average total loss around iteration 10
    trace: list


def _save(prefix, depth_params, pose_params, meta):
    fileio.save_checkpoint(prefix, {"depth": depth_params, "pose": pose_params}, meta)
    return str(prefix)


def train(cfg: TrainConfig, net_cfg: nets.NetConfig = nets.NetConfig()) -> TrainResult:
    """Run the full seeded loop; writes loss CSV and checkpoints to out_dir."""
    setup = make_camera_setup(cfg)
    if cfg.data_kind == "synthetic":
        dataset = make_synthetic_dataset(cfg, setup)
    else:
        dataset = load_directory_dataset(cfg, setup)
    os.makedirs(cfg.out_dir, exist_ok=True)

    depth_params = nets.init_depth_params(net_cfg, cfg.seed)
    pose_params = nets.init_pose_params(net_cfg, cfg.seed + 1)
    _quantize(depth_params)
    _quantize(pose_params)
    opt = Adam(lr=cfg.lr)

    rows = []
    last_good = None
    n = len(dataset)
    for it in range(cfg.iterations):
        totals = []
        bd = None
        for b in range(cfg.batch_size):
            s = dataset[(it * cfg.batch_size + b) % n]
            try:
                bd = train_step(s.triplet, depth_params, pose_params, setup,
                                cfg.loss, opt, net_cfg,
                                sources_undistorted=[s.prev_undistorted,
                                                     s.next_undistorted])
            except DivergenceError:
                raise DivergenceError(
                    f"training diverged at iteration {it}", iteration=it,
                    trace=[r[3] for r in rows], checkpoint_path=last_good)
            totals.append(bd.total)
        rows.append((it, bd.photometric, bd.smoothness,
                     float(np.mean(totals)), bd.mask_ratio))
        if (it + 1) % cfg.checkpoint_every == 0 and (it + 1) < cfg.iterations:
            last_good = _save(os.path.join(cfg.out_dir, f"checkpoint-{it + 1:06d}"),
                              depth_params, pose_params,
                              {"iteration": it + 1, "seed": cfg.seed})
    csv_path = os.path.join(cfg.out_dir, "loss.csv")
    fileio.write_loss_csv(csv_path, rows)
    final = _save(os.path.join(cfg.out_dir, "checkpoint-final"),
                  depth_params, pose_params,
                  {"iteration": cfg.iterations, "seed": cfg.seed,
                   "final_loss": rows[-1][3]})
    early = [r[3] for r in rows if 5 <= r[0] <= 15] or [rows[0][3]]
    return TrainResult(checkpoint_path=final, csv_path=csv_path,
                       iterations=cfg.iterations, final_loss=rows[-1][3],
                       early_mean=float(np.mean(early)), trace=rows)


def inference(depth_params: dict, img: np.ndarray,
              net_cfg: nets.NetConfig = nets.NetConfig()) -> np.ndarray:
    """Depth from a single frame: one forward pass, finest scale only.

    No pose network, no undistortion map, no distortion model anywhere on
    this path; the camera module's call counter can certify that.
    """
    img = np.asarray(img, dtype=np.float64)
    sigs = nets.depth_net_forward(img, depth_params, net_cfg)
    return nets.disparity_to_depth(sigs[0].data)
