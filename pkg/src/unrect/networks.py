"""Toy depth and pose networks: residual encoder with instance
normalization after every convolution, self-attention at the two coarsest
stages, a skip-connected decoder with four sigmoid disparity heads, and a
three-frame pose regressor.

Parameters live in flat name->array dicts so checkpointing, optimization,
and gradient bookkeeping stay trivial. Callers wrap them onto a tape with
wrap_params() for training; raw arrays run forward-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ShapeError, ValidationError
from .geometry import DEPTH_MAX, DEPTH_MIN

ROT_SCALE = 0.01


@dataclass(frozen=True)
class NetConfig:
    """Shared architecture knobs for the depth and pose networks."""

    channels: tuple = (16, 32, 64, 128)
    qk_reduction: int = 8
    attention_stages: tuple = (3, 4)  # 1-based encoder stage indices
    attention_max_positions: int = 4096
    norm: str = "instance"  # or "batch" for the ablation path
    norm_affine: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValidationError("NetConfig: exactly four encoder stages expected")
        if self.norm not in ("instance", "batch"):
            raise ValidationError(f"NetConfig: unknown norm kind {self.norm!r}")
        for s in self.attention_stages:
            if s not in (1, 2, 3, 4):
                raise ValidationError(f"NetConfig: attention stage {s} out of range")
        if min(self.channels) < self.qk_reduction:
            raise ValidationError("NetConfig: qk_reduction exceeds the narrowest stage")


def instance_norm(x, eps: float = 1e-5, scale=None, shift=None, kind: str = "instance"):
    """Per-sample, per-channel standardization of a 4-D activation.

    kind "batch" pools statistics over the batch axis too (the ablation
    path; no running statistics, training-mode semantics only).
    """
    xt = x if isinstance(x, DiffTensor) else ad.constant(np.asarray(x))
    if xt.data.ndim != 4:
        raise ShapeError("instance_norm", xt.data.shape)
    axes = (2, 3) if kind == "instance" else (0, 2, 3)
    mu = xt.mean(axis=axes, keepdims=True)
    centered = xt - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    out = centered / ad.sqrt(var + eps)
    if scale is not None:
        c = xt.data.shape[1]
        out = out * scale.reshape((1, c, 1, 1)) + shift.reshape((1, c, 1, 1))
    return out


def self_attention(x, wq, wk, wv, wo, gamma, max_positions: int = 4096):
    """Non-local block over all spatial positions of a 4-D activation.

    q and k are channel-reduced 1x1 projections; A = softmax over the last
    axis of q^T k, one row per position, rows summing to one. The output is
    x + gamma * Wo(v A). With gamma = 0 the block is an exact identity.

    Returns (output, attention) where attention is the (N,N) map as a plain
    array for visualization.
    """
    xt = x if isinstance(x, DiffTensor) else ad.constant(np.asarray(x))
    if xt.data.ndim != 4 or xt.data.shape[0] != 1:
        raise ShapeError("self_attention", xt.data.shape)
    _, c, h, w = xt.data.shape
    n = h * w
    if n > max_positions:
        raise ValidationError(
            f"self_attention: {n} positions exceed the configured limit {max_positions}; "
            "apply the block at a coarser encoder stage")
    if not isinstance(gamma, DiffTensor):
        gamma = ad.constant(np.asarray(gamma))
    q = ad.conv2d(xt, wq).reshape((-1, n))
    k = ad.conv2d(xt, wk).reshape((-1, n))
    v = ad.conv2d(xt, wv).reshape((c, n))
    logits = ad.matmul(ad.transpose2d(q), k)
    attn = ad.softmax_rows(logits)
    feat = ad.matmul(v, attn).reshape((1, c, h, w))
    out = xt + gamma.reshape(()) * ad.conv2d(feat, wo)
    return out, attn.data


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


def _conv_init(rng, params, name, c_out, c_in, k):
    params[name + ".w"] = _kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
    params[name + ".b"] = np.zeros(c_out)


def _norm_init(cfg, params, name, c):
    if cfg.norm_affine:
        params[name + ".scale"] = np.ones(c)
        params[name + ".shift"] = np.zeros(c)


def init_depth_params(cfg: NetConfig, seed: int, in_channels: int = 3) -> dict:
    """Deterministic parameter dict for the depth network."""
    rng = np.random.default_rng(seed)
    p: dict = {}
    c_prev = in_channels
    for s, c in enumerate(cfg.channels, start=1):
        _conv_init(rng, p, f"enc{s}.down", c, c_prev, 3)
        _norm_init(cfg, p, f"enc{s}.down.norm", c)
        _conv_init(rng, p, f"enc{s}.res1", c, c, 3)
        _norm_init(cfg, p, f"enc{s}.res1.norm", c)
        _conv_init(rng, p, f"enc{s}.res2", c, c, 3)
        _norm_init(cfg, p, f"enc{s}.res2.norm", c)
        if s in cfg.attention_stages:
            cr = max(c // cfg.qk_reduction, 1)
            p[f"att{s}.wq"] = _kaiming_uniform(rng, (cr, c, 1, 1), c)
            p[f"att{s}.wk"] = _kaiming_uniform(rng, (cr, c, 1, 1), c)
            p[f"att{s}.wv"] = _kaiming_uniform(rng, (c, c, 1, 1), c)
            p[f"att{s}.wo"] = _kaiming_uniform(rng, (c, c, 1, 1), c)
            p[f"att{s}.gamma"] = np.zeros(1)
        c_prev = c
    ch = cfg.channels
    dec_in = (ch[3], ch[2], ch[1], ch[0])
    dec_out = (ch[2], ch[1], ch[0], ch[0])
    skip = (ch[2], ch[1], ch[0], 0)
    for lvl in range(4):
        ci, co = dec_in[lvl], dec_out[lvl]
        p[f"dec{lvl}.up.w"] = _kaiming_uniform(rng, (ci, co, 2, 2), ci * 4)
        p[f"dec{lvl}.up.b"] = np.zeros(co)
        _conv_init(rng, p, f"dec{lvl}.fuse", co, co + skip[lvl], 3)
        _norm_init(cfg, p, f"dec{lvl}.fuse.norm", co)
    for s in range(4):
        _conv_init(rng, p, f"head{s}", 1, dec_out[3 - s], 3)
    return p


def init_pose_params(cfg: NetConfig, seed: int, in_channels: int = 6) -> dict:
    """Deterministic parameter dict for the pose network; the final linear
    layer starts at zero so the initial prediction is the identity pose.

    The network scores one (target, source) frame pair at a time and is run
    twice per triple with these same weights, so in_channels covers two
    stacked frames.
    """
    rng = np.random.default_rng(seed)
    p: dict = {}
    c_prev = in_channels
    for s, c in enumerate(cfg.channels, start=1):
        _conv_init(rng, p, f"pose{s}", c, c_prev, 3)
        _norm_init(cfg, p, f"pose{s}.norm", c)
        c_prev = c
    p["head.w"] = np.zeros((6, cfg.channels[-1]))
    p["head.b"] = np.zeros(6)
    return p


def wrap_params(params: dict, tape: ad.Tape) -> dict:
    """Lift every parameter array onto a tape as a trainable leaf."""
    return {k: ad.leaf(v, tape) for k, v in params.items()}


def _p(params, name):
    v = params[name]
    return v if isinstance(v, DiffTensor) else ad.constant(v)


def _norm(x, cfg: NetConfig, params, name):
    scale = shift = None
    if cfg.norm_affine:
        scale, shift = _p(params, name + ".scale"), _p(params, name + ".shift")
    return instance_norm(x, eps=cfg.norm_eps, scale=scale, shift=shift, kind=cfg.norm)


def _conv_block(x, cfg, params, name, stride):
    h = ad.conv2d(x, _p(params, name + ".w"), _p(params, name + ".b"),
                  stride=stride, padding=1)
    return ad.elu(_norm(h, cfg, params, name + ".norm"))


def _encoder_stage(x, cfg, params, s):
    d = _conv_block(x, cfg, params, f"enc{s}.down", stride=2)
    h = _conv_block(d, cfg, params, f"enc{s}.res1", stride=1)
    h = ad.conv2d(h, _p(params, f"enc{s}.res2.w"), _p(params, f"enc{s}.res2.b"), padding=1)
    h = _norm(h, cfg, params, f"enc{s}.res2.norm")
    out = ad.elu(d + h)
    if s in cfg.attention_stages:
        out, attn = self_attention(out, _p(params, f"att{s}.wq"), _p(params, f"att{s}.wk"),
                                   _p(params, f"att{s}.wv"), _p(params, f"att{s}.wo"),
                                   _p(params, f"att{s}.gamma"),
                                   max_positions=cfg.attention_max_positions)
        return out, attn
    return out, None


def depth_net_forward(img, params: dict, cfg: NetConfig = NetConfig(),
                      return_attention: bool = False):
    """Multi-scale disparity prediction.

    img is (3,H,W) or (1,3,H,W) with H, W divisible by 16. Returns four
    (H/2^s, W/2^s) sigmoid disparity rasters, finest first; optionally also
    the attention maps keyed by encoder stage.
    """
    x = img if isinstance(img, DiffTensor) else ad.constant(np.asarray(img))
    if x.data.ndim == 3:
        x = x.reshape((1,) + x.data.shape)
    if x.data.ndim != 4:
        raise ShapeError("depth_net_forward", x.data.shape)
    h, w = x.data.shape[2:]
    if h % 16 or w % 16:
        raise ValidationError(f"depth_net_forward: spatial size {h}x{w} not divisible by 16")
    feats = []
    attns = {}
    cur = x
    for s in range(1, 5):
        cur, attn = _encoder_stage(cur, cfg, params, s)
        if attn is not None:
            attns[s] = attn
        feats.append(cur)
    disparities = [None] * 4
    cur = feats[3]
    for lvl in range(4):
        cur = ad.conv_transpose2d(cur, _p(params, f"dec{lvl}.up.w"))
        cur = cur + _p(params, f"dec{lvl}.up.b").reshape((1, -1, 1, 1))
        if lvl < 3:
            cur = ad.concat([cur, feats[2 - lvl]], axis=1)
        cur = _conv_block(cur, cfg, params, f"dec{lvl}.fuse", stride=1)
        scale = 3 - lvl
        head = ad.conv2d(cur, _p(params, f"head{scale}.w"), _p(params, f"head{scale}.b"), padding=1)
        hs, ws = head.data.shape[2:]
        disparities[scale] = ad.sigmoid(head.reshape((hs, ws)))
    if return_attention:
        return disparities, attns
    return disparities


def disparity_to_depth(sigma):
    """Map sigmoid disparity in (0,1) to metric depth in (0.1, 100) m."""
    inv = 1.0 / DEPTH_MAX + (1.0 / DEPTH_MIN - 1.0 / DEPTH_MAX) * sigma
    return 1.0 / inv


def depth_from_disparity_raster(sigma: np.ndarray):
    """Convenience for plain arrays; clips away exact endpoint values so the
    result satisfies the open-interval depth contract."""
    sigma = np.clip(np.asarray(sigma), 1e-7, 1.0 - 1e-7)
    return disparity_to_depth(sigma)


def pose_net_forward(frames, params: dict, cfg: NetConfig = NetConfig()):
    """Predict the two relative poses from a (prev, cur, next) frame triple.

    frames: sequence of three (3,H,W) images, or one (9,H,W) stack. Returns
    two differentiable 6-vectors (axis-angle then translation), for
    cur->prev and cur->next; the rotation part is pre-scaled by 0.01.

    Each pose is the antisymmetrized score of the (cur, other) pair under
    one shared conv stack: pose(a, b) = g(a,b) - g(b,a). Relative motion
    obeys pose(a,b) = -pose(b,a) to first order, and baking that in forces
    the regressor to read frame order. Without it the net converged to
    predicting one direction for both sources of a triple; the per-pixel
    source minimum in the loss keeps the wrongly-warped source out of the
    objective, so nothing ever corrects the mistake.
    """
    if isinstance(frames, (list, tuple)):
        if len(frames) != 3:
            raise ValidationError(f"pose_net_forward: expected 3 frames, got {len(frames)}")
        parts = [f if isinstance(f, DiffTensor) else ad.constant(np.asarray(f)) for f in frames]
        if any(p.data.ndim != 3 for p in parts) or len({p.data.shape for p in parts}) != 1:
            raise ShapeError("pose_net_forward", *[p.data.shape for p in parts])
    else:
        x = frames if isinstance(frames, DiffTensor) else ad.constant(np.asarray(frames))
        if x.data.ndim != 3 or x.data.shape[0] != 9:
            raise ShapeError("pose_net_forward", x.data.shape)
        parts = [x[0:3], x[3:6], x[6:9]]
    prv, cur, nxt = parts

    def score(a, b):
        h = ad.concat([a, b], axis=0)
        h = h.reshape((1,) + h.data.shape)
        for s in range(1, 5):
            h = _conv_block(h, cfg, params, f"pose{s}", stride=2)
        feat = h.mean(axis=(2, 3)).reshape((cfg.channels[-1], 1))
        return ad.matmul(_p(params, "head.w"), feat).reshape((6,)) + _p(params, "head.b")

    def pair_pose(a, b):
        v6 = score(a, b) - score(b, a)
        return ad.concat([v6[0:3] * ROT_SCALE, v6[3:6]], axis=0)

    return pair_pose(cur, prv), pair_pose(cur, nxt)


def attention_heatmap(attn: np.ndarray, hw, query_yx) -> np.ndarray:
    """Row of the attention map for one query pixel, reshaped to the stage's
    spatial grid and normalized to [0,1] for PGM export."""
    h, w = hw
    attn = np.asarray(attn)
    if attn.shape != (h * w, h * w):
        raise ShapeError("attention_heatmap", attn.shape, (h * w, h * w))
    qy, qx = query_yx
    if not (0 <= qy < h and 0 <= qx < w):
        raise ValidationError(f"attention_heatmap: query {query_yx} outside {h}x{w}")
    row = attn[qy * w + qx].reshape(h, w)
    top = row.max()
    return row / top if top > 0 else row
