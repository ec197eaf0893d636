"""Coordinate frames, depth normalization, image-to-volume mapping and augmentation.

Conventions used throughout the package:

* Pixel ``u`` and voxel ``i`` have their centres at integer coordinates.
* Image space is ``(x, y)`` in pixels with y pointing down; depth ``z`` is in
  pixel units and zero-mean per face.
* Volume space is voxel units, ``x in [0, w)``, ``y in [0, h)``, ``z in [0, d)``.
* A positive rotation angle turns the picture counter-clockwise as seen on
  screen (y down), i.e. a point right of the centre moves up.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .schemes import get_scheme


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered ``(N, 3)`` landmark coordinates tagged with their scheme."""

    points: np.ndarray
    scheme_id: str | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"landmarks must have shape (N, 3), got {pts.shape}")
        if len(pts) < 1:
            raise ValueError("landmark set is empty")
        if not np.isfinite(pts).all():
            raise ValueError("landmark coordinates must be finite")
        if self.scheme_id is not None:
            n = get_scheme(self.scheme_id).n_points
            if len(pts) != n:
                raise ValueError(
                    f"scheme {self.scheme_id!r} expects {n} points, got {len(pts)}"
                )
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def with_points(self, points) -> LandmarkSet:
        return replace(self, points=points)

    def flat(self) -> np.ndarray:
        """Coordinate vector ``(x1, y1, z1, ..., xN, yN, zN)``."""
        return self.points.reshape(-1).copy()


def normalize_depth(landmarks: LandmarkSet) -> LandmarkSet:
    pts = landmarks.points.copy()
    pts[:, 2] -= pts[:, 2].mean()
    return landmarks.with_points(pts)


@dataclass(frozen=True)
class CubeMapping:
    """Affine map from an image-space box plus depth into the target volume.

    ``x_vol = (x - x0) * w / (x1 - x0)``, likewise for y, and
    ``z_vol = (z + depth_offset) * depth_scale``.
    """

    source_bbox: tuple[float, float, float, float]
    depth_offset: float
    depth_scale: float
    target_dims: tuple[int, int, int]

    def __post_init__(self):
        x0, y0, x1, y1 = self.source_bbox
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"bbox {self.source_bbox} has no area")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")
        if any(int(n) <= 0 for n in self.target_dims):
            raise ValueError(f"invalid target dims {self.target_dims}")

    @classmethod
    def from_bbox(cls, bbox, dims, depth_gain: float = 1.0) -> CubeMapping:
        """Mapping whose depth scale follows the box size and puts ``z = 0`` mid-volume."""
        x0, y0, x1, y1 = (float(v) for v in bbox)
        d = dims[2]
        depth_scale = depth_gain * d / math.sqrt((x1 - x0) * (y1 - y0))
        return cls((x0, y0, x1, y1), 0.5 * d / depth_scale, depth_scale, tuple(dims))

    @property
    def scale_xy(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.source_bbox
        w, h, _ = self.target_dims
        return w / (x1 - x0), h / (y1 - y0)


def map_to_volume(
    landmarks: LandmarkSet, mapping: CubeMapping, max_expand: float = 0.5
) -> tuple[LandmarkSet, bool]:
    """Map image-space landmarks into the volume.

    Points that land outside ``[0, dim - 1]`` are clamped onto the lattice
    and the returned flag is set. Points further out than ``max_expand``
    times the box size on any side are rejected.
    """
    sx, sy = mapping.scale_xy
    x0, y0, _, _ = mapping.source_bbox
    pts = landmarks.points
    out = np.empty_like(pts)
    out[:, 0] = (pts[:, 0] - x0) * sx
    out[:, 1] = (pts[:, 1] - y0) * sy
    out[:, 2] = (pts[:, 2] + mapping.depth_offset) * mapping.depth_scale

    dims = np.asarray(mapping.target_dims, dtype=np.float64)
    lo, hi = -max_expand * dims, dims * (1.0 + max_expand)
    if ((out < lo) | (out > hi)).any():
        raise ValueError("landmarks lie outside the expanded source box")
    clamped = np.clip(out, 0.0, dims - 1.0)
    flagged = bool((clamped != out).any())
    return landmarks.with_points(clamped), flagged


def map_to_image(landmarks: LandmarkSet, mapping: CubeMapping) -> LandmarkSet:
    sx, sy = mapping.scale_xy
    x0, y0, _, _ = mapping.source_bbox
    pts = landmarks.points
    out = np.empty_like(pts)
    out[:, 0] = pts[:, 0] / sx + x0
    out[:, 1] = pts[:, 1] / sy + y0
    out[:, 2] = pts[:, 2] / mapping.depth_scale - mapping.depth_offset
    return landmarks.with_points(out)


def flip_remap(scheme_id: str) -> np.ndarray:
    """Index permutation that restores left/right identities after a mirror."""
    return get_scheme(scheme_id).flip_permutation()


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    scale: float = 1.0
    flip: bool = False
    seed: int | None = None

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("augmentation scale must be positive")

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.scale == 1.0 and not self.flip

    @classmethod
    def draw(
        cls,
        seed: int,
        max_rotation: float = 30.0,
        scale_range: tuple[float, float] = (0.75, 1.25),
        flip_prob: float = 0.5,
    ) -> AugmentParams:
        rng = np.random.default_rng(seed)
        return cls(
            rotation_deg=float(rng.uniform(-max_rotation, max_rotation)),
            scale=float(rng.uniform(*scale_range)),
            flip=bool(rng.random() < flip_prob),
            seed=seed,
        )


def similarity_matrix(params: AugmentParams, center) -> np.ndarray:
    """3x3 homogeneous 2D transform: mirror about ``center`` then rotate and scale."""
    cx, cy = center
    theta = math.radians(params.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    to_origin = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    back = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    mirror = np.diag([-1.0 if params.flip else 1.0, 1.0, 1.0])
    # y points down, so counter-clockwise on screen is +sin on x, -sin on y
    rot = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1.0]])
    return back @ np.diag([params.scale, params.scale, 1.0]) @ rot @ mirror @ to_origin


def warp_image(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample ``image`` (H, W, C) so that output(p) = input(inverse(matrix) p).

    Bilinear interpolation with edge padding.
    """
    inv = np.linalg.inv(matrix)
    # ndimage works in (row, col) = (y, x) order
    swap = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1.0]])
    inv_rc = swap @ inv @ swap
    out = np.empty_like(image, dtype=np.float64)
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.affine_transform(
            image[..., ch].astype(np.float64),
            inv_rc[:2, :2],
            offset=inv_rc[:2, 2],
            order=1,
            mode="nearest",
        )
    return out


def augment(
    image: np.ndarray,
    landmarks: LandmarkSet,
    params: AugmentParams,
    volume_dims: tuple[int, int, int],
) -> tuple[np.ndarray, LandmarkSet]:
    """Apply one similarity transform (and optional mirror) to an image and its landmarks.

    The image is assumed to span the volume's x/y extent, so the image centre
    ``(W/2, H/2)`` corresponds to the volume centre ``(w/2, h/2)``. Depth is
    scaled by the same factor about ``d/2``. On a mirror the landmark order is
    remapped through :func:`flip_remap`.
    """
    if params.is_identity:
        return image.copy(), landmarks
    if params.flip and landmarks.scheme_id is None:
        raise ValueError("cannot mirror landmarks without a scheme")
    H, W = image.shape[:2]
    w, h, d = volume_dims
    perm = flip_remap(landmarks.scheme_id) if params.flip else None

    out_image = warp_image(image, similarity_matrix(params, (W / 2.0, H / 2.0)))

    mat = similarity_matrix(params, (w / 2.0, h / 2.0))
    pts = landmarks.points
    xy1 = np.column_stack([pts[:, :2], np.ones(len(pts))])
    out = np.empty_like(pts)
    out[:, :2] = (xy1 @ mat.T)[:, :2]
    out[:, 2] = d / 2.0 + params.scale * (pts[:, 2] - d / 2.0)
    if perm is not None:
        out = out[perm]
    return out_image, landmarks.with_points(out)


def crop_to_input(image: np.ndarray, bbox, input_size: tuple[int, int]) -> np.ndarray:
    """Resample the ``bbox`` region of ``image`` onto an ``input_size`` (H, W) grid."""
    x0, y0, x1, y1 = bbox
    H, W = input_size
    if image.shape[:2] == (H, W) and (x0, y0, x1, y1) == (0, 0, W, H):
        return image.astype(np.float64, copy=True)
    sx, sy = W / (x1 - x0), H / (y1 - y0)
    mat = np.array([[sx, 0, -x0 * sx], [0, sy, -y0 * sy], [0, 0, 1.0]])
    inv = np.linalg.inv(mat)
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    src_x = inv[0, 0] * cols + inv[0, 2]
    src_y = inv[1, 1] * rows + inv[1, 2]
    out = np.empty((H, W, image.shape[2]))
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.map_coordinates(
            image[..., ch].astype(np.float64), [src_y, src_x], order=1, mode="nearest"
        )
    return out


# -- landmark text files -----------------------------------------------------


def read_landmarks(path, scheme_id: str | None = None) -> LandmarkSet:
    """Read an ``x y z`` per line file with an optional ``# scheme=<id> n=<N>`` header."""
    header = {}
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    header[key] = val
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 numbers, got {line!r}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a number in {line!r}") from None
    if not rows:
        raise ValueError(f"{path}: no landmarks")
    if "n" in header and int(header["n"]) != len(rows):
        raise ValueError(f"{path}: header says n={header['n']} but found {len(rows)} points")
    scheme = scheme_id if scheme_id is not None else header.get("scheme")
    try:
        return LandmarkSet(np.array(rows), scheme)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def write_landmarks(path, landmarks: LandmarkSet) -> None:
    lines = []
    if landmarks.scheme_id is not None:
        lines.append(f"# scheme={landmarks.scheme_id} n={len(landmarks)}")
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in landmarks.points.tolist()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
