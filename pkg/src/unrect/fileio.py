"""File formats: PFM/PPM/PGM rasters, PNG via Pillow, camera JSON, pose
text files, checkpoints, and CSV reports.

Conventions:
  - PFM: grayscale "Pf", scale -1.0 (little-endian), scanlines bottom-up.
  - PPM P6 maxval 255 / PGM P5 maxval 255; images as float arrays in [0,1],
    channel-first (C,H,W).
  - Pose files: one pose per line, twelve whitespace-separated numbers, the
    row-major 3x4 [R|t] world-to-camera matrix.
  - Checkpoints: a JSON manifest (names, shapes, dtype, byte offsets) next
    to a single blob of little-endian float32 parameter data.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, DistortionCoeffs, UndistortionMap
from .errors import ValidationError

_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "skew", "k1", "k2", "k3", "p1", "p2", "width", "height")


def save_camera(path, intr: CameraIntrinsics, coeffs: DistortionCoeffs) -> None:
    doc = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "skew": intr.skew,
           "k1": coeffs.k1, "k2": coeffs.k2, "k3": coeffs.k3, "p1": coeffs.p1, "p2": coeffs.p2,
           "width": intr.width, "height": intr.height}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_camera(path):
    """Read a camera parameter file; returns (CameraIntrinsics, DistortionCoeffs)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"camera file {path}: {e}")
    missing = [k for k in _CAMERA_KEYS if k not in doc]
    if missing:
        raise ValidationError(f"camera file {path}: missing keys {missing}")
    try:
        intr = CameraIntrinsics(fx=float(doc["fx"]), fy=float(doc["fy"]),
                                cx=float(doc["cx"]), cy=float(doc["cy"]),
                                width=int(doc["width"]), height=int(doc["height"]),
                                skew=float(doc["skew"]))
        coeffs = DistortionCoeffs(k1=float(doc["k1"]), k2=float(doc["k2"]), k3=float(doc["k3"]),
                                  p1=float(doc["p1"]), p2=float(doc["p2"]))
    except (TypeError, ValueError) as e:
        raise ValidationError(f"camera file {path}: {e}")
    return intr, coeffs


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, values: np.ndarray) -> None:
    """Grayscale PFM, float32 little-endian, rows written bottom-up."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValidationError(f"write_pfm: expected a 2-D raster, got shape {values.shape}")
    h, w = values.shape
    data = values[::-1].astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(data)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ValidationError(f"{path}: not a grayscale PFM (magic {magic!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValidationError(f"{path}: malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        endian = "<" if scale < 0 else ">"
        raw = f.read(4 * w * h)
    if len(raw) != 4 * w * h:
        raise ValidationError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(raw, dtype=endian + "f4").reshape(h, w)
    return arr[::-1].astype(np.float32)


def save_undistortion_map(prefix, umap: UndistortionMap) -> dict:
    """Write xu/yu PFM rasters plus a JSON manifest; returns the manifest."""
    prefix = Path(prefix)
    x_name, y_name = prefix.name + "_x.pfm", prefix.name + "_y.pfm"
    write_pfm(prefix.parent / x_name, umap.xu)
    write_pfm(prefix.parent / y_name, umap.yu)
    manifest = {"width": umap.width, "height": umap.height,
                "tolerance": umap.tolerance, "residual": umap.residual,
                "x_raster": x_name, "y_raster": y_name}
    (prefix.parent / (prefix.name + ".json")).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_undistortion_map(prefix) -> UndistortionMap:
    """Load a map written by save_undistortion_map.

    PFM storage is float32, so a loaded map carries ~1e-4 px quantization
    relative to the float64 build; the manifest's residual refers to build
    time precision.
    """
    prefix = Path(prefix)
    man_path = prefix.parent / (prefix.name + ".json")
    try:
        man = json.loads(man_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"map manifest {man_path}: {e}")
    xu = read_pfm(prefix.parent / man["x_raster"]).astype(np.float64)
    yu = read_pfm(prefix.parent / man["y_raster"]).astype(np.float64)
    return UndistortionMap(width=int(man["width"]), height=int(man["height"]),
                           xu=xu, yu=yu, tolerance=float(man["tolerance"]),
                           residual=float(man["residual"]))


# ---------------------------------------------------------------------------
# images


def write_image(path, img: np.ndarray) -> None:
    """Write a float image in [0,1]: (3,H,W) as PPM/PNG, (H,W) as PGM/PNG."""
    path = Path(path)
    img = np.asarray(img)
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    if path.suffix.lower() == ".png":
        from PIL import Image
        if q.ndim == 3:
            Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)
        else:
            Image.fromarray(q, mode="L").save(path)
        return
    if q.ndim == 3:
        if q.shape[0] != 3:
            raise ValidationError(f"write_image: expected (3,H,W), got {img.shape}")
        h, w = q.shape[1:]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode())
            f.write(q.transpose(1, 2, 0).tobytes())
    elif q.ndim == 2:
        h, w = q.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(q.tobytes())
    else:
        raise ValidationError(f"write_image: bad shape {img.shape}")


def _read_pnm_header(f):
    # header tokens may be separated by arbitrary whitespace and comments
    tokens = []
    while len(tokens) < 3:
        line = f.readline()
        if not line:
            raise ValidationError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return int(tokens[0]), int(tokens[1]), int(tokens[2])


def read_image(path) -> np.ndarray:
    """Read PPM/PGM/PNG to float in [0,1]; color gives (3,H,W), gray (H,W)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return arr.transpose(2, 0, 1)
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic == b"P6":
            w, h, maxval = _read_pnm_header(f)
            raw = f.read(w * h * 3)
            if len(raw) != w * h * 3:
                raise ValidationError(f"{path}: truncated PPM payload")
            arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
            return arr.transpose(2, 0, 1).astype(np.float64) / float(maxval)
        if magic == b"P5":
            w, h, maxval = _read_pnm_header(f)
            raw = f.read(w * h)
            if len(raw) != w * h:
                raise ValidationError(f"{path}: truncated PGM payload")
            return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / float(maxval)
    raise ValidationError(f"{path}: unsupported image format (magic {magic!r})")


# ---------------------------------------------------------------------------
# poses


def write_poses(path, poses) -> None:
    lines = []
    for p in poses:
        lines.append(" ".join(repr(float(v)) for v in p.matrix34().ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path):
    from .geometry import PoseSE3
    poses = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 12:
            raise ValidationError(f"{path}:{ln}: expected 12 numbers per pose line, got {len(parts)}")
        try:
            vals = np.array([float(v) for v in parts]).reshape(3, 4)
        except ValueError as e:
            raise ValidationError(f"{path}:{ln}: {e}")
        poses.append(PoseSE3.from_matrix34(vals))
    if not poses:
        raise ValidationError(f"{path}: no poses found")
    return poses


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(prefix, params: dict, meta: dict | None = None) -> None:
    """params maps group name -> {tensor name -> ndarray}; the blob stores
    every tensor as little-endian float32 in manifest order."""
    prefix = Path(prefix)
    entries = []
    offset = 0
    blob = bytearray()
    for group in params:
        for name, arr in params[group].items():
            arr = np.asarray(arr)
            raw = arr.astype("<f4").tobytes()
            entries.append({"group": group, "name": name, "shape": list(arr.shape),
                            "dtype": "float32", "offset": offset, "nbytes": len(raw)})
            blob.extend(raw)
            offset += len(raw)
    manifest = {"format": "unrect-checkpoint-v1", "entries": entries,
                "meta": dict(meta or {})}
    (prefix.parent / (prefix.name + ".json")).write_text(json.dumps(manifest, indent=2) + "\n")
    (prefix.parent / (prefix.name + ".bin")).write_bytes(bytes(blob))


def load_checkpoint(prefix):
    """Returns (params, meta) with float32 arrays."""
    prefix = Path(prefix)
    man_path = prefix.parent / (prefix.name + ".json")
    try:
        man = json.loads(man_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"checkpoint manifest {man_path}: {e}")
    if man.get("format") != "unrect-checkpoint-v1":
        raise ValidationError(f"{man_path}: unknown checkpoint format {man.get('format')!r}")
    blob = (prefix.parent / (prefix.name + ".bin")).read_bytes()
    params: dict = {}
    for e in man["entries"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValidationError(f"{prefix}: blob truncated at entry {e['group']}/{e['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        params.setdefault(e["group"], {})[e["name"]] = arr
    return params, man.get("meta", {})


# ---------------------------------------------------------------------------
# CSV reports


def write_loss_csv(path, rows) -> None:
    """rows: iterable of (iteration, photometric, smoothness, total, mask_ratio)."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["iteration", "photometric", "smoothness", "total", "mask_ratio"])
        for r in rows:
            wr.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


METRIC_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


def write_metrics_csv(path, per_frame, aggregate) -> None:
    """per_frame: iterable of (frame_name, metrics dict); aggregate: metrics dict."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["frame"] + list(METRIC_COLUMNS))
        for name, m in per_frame:
            wr.writerow([name] + [repr(float(m[k])) for k in METRIC_COLUMNS])
        wr.writerow(["aggregate"] + [repr(float(aggregate[k])) for k in METRIC_COLUMNS])
