"""Samples, the on-disk dataset layout, and a synthetic 3D landmark generator.

A dataset directory holds, per sample id::

    <id>.img    image in a portable format (PPM written, anything Pillow reads accepted)
    <id>.pts3   landmarks, see :func:`voxlandmark.geometry.read_landmarks`
    <id>.meta   optional ``key=value`` lines: ``bbox=x0,y0,x1,y1``, ``yaw_bucket=30-60``

Sample landmarks are in image space: x, y in pixels and zero-mean depth in
pixel units.
"""

from __future__ import annotations

import colorsys
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import LandmarkSet, read_landmarks, write_landmarks
from .schemes import get_scheme

YAW_BUCKETS = ("0-30", "30-60", "60-90")


def yaw_bucket(yaw_deg: float) -> str:
    a = abs(yaw_deg)
    if a <= 30:
        return "0-30"
    if a <= 60:
        return "30-60"
    return "60-90"


def tight_bbox(points) -> tuple[float, float, float, float]:
    pts = np.asarray(points)[:, :2]
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return float(x0), float(y0), float(x1), float(y1)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    landmarks: LandmarkSet
    bbox: tuple[float, float, float, float]
    sample_id: str
    yaw_bucket: str | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"{self.sample_id}: image must be (H, W, 3), got {img.shape}")
        if not np.isfinite(img).all():
            raise ValueError(f"{self.sample_id}: image has non-finite values")
        if img.min() < 0 or img.max() > 1:
            raise ValueError(f"{self.sample_id}: image values must lie in [0, 1]")
        self.image = img
        self.bbox = tuple(float(v) for v in self.bbox)
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"{self.sample_id}: bbox {self.bbox} has no area")
        if self.yaw_bucket is not None and self.yaw_bucket not in YAW_BUCKETS:
            raise ValueError(f"{self.sample_id}: unknown yaw bucket {self.yaw_bucket!r}")


# -- synthetic data ------------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_landmarks: int = 12
    n_samples: int = 8
    image_size: tuple[int, int] = (64, 64)
    yaw_range: tuple[float, float] = (-45.0, 45.0)
    pitch_range: tuple[float, float] = (-15.0, 15.0)
    roll_range: tuple[float, float] = (-15.0, 15.0)
    deformation: float = 0.03
    face_scale: float = 0.3  # template unit in fractions of the image width
    jitter: float = 0.04  # centre offset in fractions of the image size
    blob_sigma: float = 1.5
    render: str = "blobs"
    seed: int = 0

    def __post_init__(self):
        if self.n_landmarks < 4:
            raise ValueError("need at least 4 landmarks for a non-degenerate shape")
        if self.render != "blobs":
            raise ValueError(f"unknown render style {self.render!r}")

    @property
    def scheme_id(self) -> str:
        for scheme_id in ("toy12", "66", "68"):
            if get_scheme(scheme_id).n_points == self.n_landmarks:
                return scheme_id
        raise ValueError(f"no template with {self.n_landmarks} points")


def rotation_matrix(yaw_deg: float, pitch_deg: float, roll_deg: float) -> np.ndarray:
    """``Rz(roll) @ Rx(pitch) @ Ry(yaw)`` in the x-right, y-down, z-towards-viewer frame."""
    y, p, r = (math.radians(a) for a in (yaw_deg, pitch_deg, roll_deg))
    ry = np.array([[math.cos(y), 0, math.sin(y)], [0, 1, 0], [-math.sin(y), 0, math.cos(y)]])
    rx = np.array([[1, 0, 0], [0, math.cos(p), -math.sin(p)], [0, math.sin(p), math.cos(p)]])
    rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
    return rz @ rx @ ry


def pose_shape(template, yaw, pitch, roll, scale, centre, offsets=None) -> np.ndarray:
    """Rotate, deform and orthographically place a template in image space."""
    shape = np.asarray(template, dtype=np.float64)
    if offsets is not None:
        shape = shape + offsets
    posed = shape @ rotation_matrix(yaw, pitch, roll).T
    pts = np.empty_like(posed)
    pts[:, 0] = centre[0] + scale * posed[:, 0]
    pts[:, 1] = centre[1] + scale * posed[:, 1]
    pts[:, 2] = scale * posed[:, 2]
    pts[:, 2] -= pts[:, 2].mean()
    return pts


def landmark_colours(scheme_id: str) -> np.ndarray:
    """One RGB colour per landmark; mirror-symmetric partners share a colour."""
    scheme = get_scheme(scheme_id)
    perm = scheme.flip_permutation()
    classes = sorted({min(i, int(perm[i])) for i in range(scheme.n_points)})
    hue = {c: k / len(classes) for k, c in enumerate(classes)}
    return np.array(
        [colorsys.hsv_to_rgb(hue[min(i, int(perm[i]))], 0.9, 1.0) for i in range(scheme.n_points)]
    )


def render_blobs(points, colours, image_size, blob_sigma, depth_unit, background) -> np.ndarray:
    H, W = image_size
    img = background.copy()
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    for (x, y, z), col in zip(points, colours):
        # nearer points render slightly larger, giving a monocular depth cue
        s = blob_sigma * (1.0 + 0.3 * z / depth_unit)
        s = max(s, 0.5)
        g = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * s * s))
        np.maximum(img, g[..., None] * col[None, None, :], out=img)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> list[Sample]:
    scheme = get_scheme(spec.scheme_id)
    colours = landmark_colours(scheme.name)
    rng = np.random.default_rng(spec.seed)
    H, W = spec.image_size
    scale = spec.face_scale * W
    samples = []
    for n in range(spec.n_samples):
        yaw = rng.uniform(*spec.yaw_range)
        pitch = rng.uniform(*spec.pitch_range)
        roll = rng.uniform(*spec.roll_range)
        offsets = spec.deformation * rng.standard_normal(scheme.template.shape)
        centre = (W / 2 + spec.jitter * W * rng.uniform(-1, 1), H / 2 + spec.jitter * H * rng.uniform(-1, 1))
        pts = pose_shape(scheme.template, yaw, pitch, roll, scale, centre, offsets)

        # faint smooth background so the image is not mostly exact zeros
        gx, gy = rng.uniform(-0.1, 0.1, size=2)
        ys, xs = np.mgrid[0:H, 0:W] / max(H, W)
        base = 0.1 + gx * xs + gy * ys
        background = np.repeat(np.clip(base, 0, 1)[..., None], 3, axis=2)
        image = render_blobs(pts, colours, (H, W), spec.blob_sigma, scale, background)

        samples.append(
            Sample(
                image=image,
                landmarks=LandmarkSet(pts, scheme.name),
                bbox=(0.0, 0.0, float(W), float(H)),
                sample_id=f"synth_{n:05d}",
                yaw_bucket=yaw_bucket(yaw),
            )
        )
    return samples


# -- on-disk datasets ----------------------------------------------------------


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        meta[key.strip()] = val.strip()
    return meta


def load_sample(root, sample_id: str, scheme_id: str | None = None) -> Sample:
    root = Path(root)
    lm_path = root / f"{sample_id}.pts3"
    landmarks = read_landmarks(lm_path, scheme_id)
    if landmarks.scheme_id is None:
        raise ValueError(f"{lm_path}: no scheme given in header or by caller")
    img_path = root / f"{sample_id}.img"
    try:
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ValueError(f"{img_path}: unreadable image ({exc})") from None
    meta_path = root / f"{sample_id}.meta"
    meta = _read_meta(meta_path) if meta_path.exists() else {}
    if "bbox" in meta:
        try:
            bbox = tuple(float(v) for v in meta["bbox"].split(","))
        except ValueError:
            raise ValueError(f"{meta_path}: malformed bbox {meta['bbox']!r}") from None
        if len(bbox) != 4:
            raise ValueError(f"{meta_path}: bbox needs 4 numbers")
    else:
        bbox = tight_bbox(landmarks.points)
    try:
        return Sample(image, landmarks, bbox, sample_id, meta.get("yaw_bucket"))
    except ValueError as exc:
        raise ValueError(f"{root / sample_id}: {exc}") from None


class DiskDataset(Sequence):
    """Lazily loaded samples from a dataset directory, in lexicographic id order."""

    def __init__(self, root, scheme_id: str | None = None):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory {self.root} does not exist")
        self.scheme_id = scheme_id
        self.ids = sorted(p.stem for p in self.root.glob("*.pts3"))

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self[i] for i in range(*idx.indices(len(self)))]
        return load_sample(self.root, self.ids[idx], self.scheme_id)


def load_dataset(root, scheme_id: str | None = None) -> DiskDataset:
    return DiskDataset(root, scheme_id)


def save_sample(root, sample: Sample) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
    img_path = root / f"{sample.sample_id}.img"
    tmp = img_path.with_name(img_path.name + f".tmp{os.getpid()}")
    Image.fromarray(pixels, "RGB").save(tmp, format="PPM")
    os.replace(tmp, img_path)
    write_landmarks(root / f"{sample.sample_id}.pts3", sample.landmarks)
    meta = [f"bbox={','.join(repr(v) for v in sample.bbox)}"]
    if sample.yaw_bucket is not None:
        meta.append(f"yaw_bucket={sample.yaw_bucket}")
    (root / f"{sample.sample_id}.meta").write_text("\n".join(meta) + "\n")


def save_dataset(root, samples) -> None:
    for sample in samples:
        save_sample(root, sample)
