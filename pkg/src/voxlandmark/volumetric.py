"""Compact volumetric landmark representation.

All landmarks of a face are written into one ``w x h x d`` grid: each voxel
holds the largest Gaussian response over the landmarks. Arrays are stored as
``values[k, j, i]`` (z, y, x), which is x-fastest in C order and matches the
channels-as-depth layout produced by the voxel network.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import LandmarkSet

TRUNCATE_SIGMAS = 3.0
MAGIC = b"CVR1"


def peak_value(sigma: float) -> float:
    """Largest value any voxel can take, ``1 / (2 pi sigma^2)``."""
    return 1.0 / (2.0 * math.pi * sigma * sigma)


def gaussian_contribution(landmark, voxel, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x, y, z = landmark
    i, j, k = voxel
    dist2 = (x - i) ** 2 + (y - j) ** 2 + (z - k) ** 2
    return peak_value(sigma) * math.exp(-dist2 / (2.0 * sigma * sigma))


@dataclass
class VoxelGrid:
    values: np.ndarray  # (d, h, w)
    sigma: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"grid values must be 3D, got shape {self.values.shape}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not np.isfinite(self.values).all():
            raise ValueError("grid values must be finite")
        top = peak_value(self.sigma)
        if self.values.size and (self.values.min() < 0 or self.values.max() > top * (1 + 1e-9)):
            raise ValueError(f"grid values must lie in [0, {top}]")

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h, w = self.values.shape
        return w, h, d


def _as_points(landmarks) -> np.ndarray:
    if isinstance(landmarks, LandmarkSet):
        return landmarks.points
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("landmark set is empty")
    return pts


def encode_array(points, dims, sigma: float, truncate: bool = True) -> np.ndarray:
    """Max-of-Gaussians grid as a bare ``(d, h, w)`` array."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pts = _as_points(points)
    w, h, d = (int(n) for n in dims)
    if min(w, h, d) <= 0:
        raise ValueError(f"invalid dims {dims}")
    grid = np.zeros((d, h, w))
    two_s2 = 2.0 * sigma * sigma
    radius = TRUNCATE_SIGMAS * sigma
    norm = peak_value(sigma)
    for x, y, z in pts:
        if truncate:
            lo = [max(0, math.ceil(c - radius)) for c in (x, y, z)]
            hi = [min(n, math.floor(c + radius) + 1) for c, n in zip((x, y, z), (w, h, d))]
            if any(a >= b for a, b in zip(lo, hi)):
                continue
        else:
            lo, hi = [0, 0, 0], [w, h, d]
        # separable: exp(-r^2) = exp(-dx^2) exp(-dy^2) exp(-dz^2)
        di = np.arange(lo[0], hi[0]) - x
        dj = np.arange(lo[1], hi[1]) - y
        dk = np.arange(lo[2], hi[2]) - z
        field = norm * (
            np.exp(-dk * dk / two_s2)[:, None, None]
            * np.exp(-dj * dj / two_s2)[None, :, None]
            * np.exp(-di * di / two_s2)[None, None, :]
        )
        if truncate:
            r2 = dk[:, None, None] ** 2 + dj[None, :, None] ** 2 + di[None, None, :] ** 2
            field[r2 > radius * radius] = 0.0
        view = grid[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]]
        np.maximum(view, field, out=view)
    return grid


def encode(landmarks, dims, sigma: float = 1.0, truncate: bool = True) -> VoxelGrid:
    """Encode every landmark into one grid of size ``dims = (w, h, d)``.

    With ``truncate`` each Gaussian is cut to zero beyond ``3 sigma``, which
    changes values by at most ``exp(-4.5)`` of the peak.
    """
    return VoxelGrid(encode_array(landmarks, dims, sigma, truncate), sigma)


@dataclass
class VolumePyramid:
    grids: list[VoxelGrid]
    z_resolutions: list[int]

    def __post_init__(self):
        if len(self.grids) != len(self.z_resolutions):
            raise ValueError("one grid per z resolution is required")
        if any(b <= a for a, b in zip(self.z_resolutions, self.z_resolutions[1:])):
            raise ValueError(f"z resolutions must increase strictly: {self.z_resolutions}")
        wh = {g.dims[:2] for g in self.grids}
        if len(wh) > 1:
            raise ValueError("pyramid levels disagree on (w, h)")
        for g, d in zip(self.grids, self.z_resolutions):
            if g.dims[2] != d:
                raise ValueError(f"level depth {g.dims[2]} does not match {d}")

    def __len__(self):
        return len(self.grids)


def rescale_depth(points: np.ndarray, z_res: int, d_max: int) -> np.ndarray:
    """Move z from a ``d_max`` lattice to a ``z_res`` lattice, keeping cell centres aligned."""
    out = np.array(points, dtype=np.float64, copy=True)
    ratio = z_res / d_max
    out[:, 2] = (out[:, 2] + 0.5) * ratio - 0.5
    return out


def pyramid_arrays(landmarks, dims, z_resolutions, sigma: float = 1.0, truncate: bool = True):
    pts = _as_points(landmarks)
    z_resolutions = [int(z) for z in z_resolutions]
    if not z_resolutions or any(b <= a for a, b in zip(z_resolutions, z_resolutions[1:])):
        raise ValueError(f"z resolutions must increase strictly: {z_resolutions}")
    w, h, d_max = dims
    if z_resolutions[-1] != d_max:
        raise ValueError(f"last z resolution {z_resolutions[-1]} must equal d_max={d_max}")
    return [
        encode_array(rescale_depth(pts, zr, d_max), (w, h, zr), sigma, truncate)
        for zr in z_resolutions
    ]


def build_pyramid(landmarks, dims, z_resolutions, sigma: float = 1.0, truncate: bool = True) -> VolumePyramid:
    """Targets for coarse-to-fine supervision, one re-encoding per z resolution.

    ``dims`` is the full-resolution ``(w, h, d_max)``; level ``m`` re-encodes the
    landmarks with depth rescaled onto ``z_resolutions[m]`` slices.
    """
    arrays = pyramid_arrays(landmarks, dims, z_resolutions, sigma, truncate)
    return VolumePyramid([VoxelGrid(a, sigma) for a in arrays], list(z_resolutions))


def _refine(values: np.ndarray, idx: tuple[int, int, int]) -> np.ndarray:
    """Sub-voxel offset from a parabola through the log-values on each axis.

    A log-domain parabola is exact for an isolated Gaussian.
    """
    out = np.array([idx[2], idx[1], idx[0]], dtype=np.float64)  # x, y, z
    for axis, pos in ((2, 0), (1, 1), (0, 2)):
        n = values.shape[axis]
        c = idx[axis]
        if c == 0 or c == n - 1:
            continue
        lo, hi = list(idx), list(idx)
        lo[axis] -= 1
        hi[axis] += 1
        a, b, e = values[tuple(lo)], values[idx], values[tuple(hi)]
        if min(a, b, e) > 0:
            a, b, e = math.log(a), math.log(b), math.log(e)
        denom = a - 2.0 * b + e
        if denom < 0:
            out[pos] += float(np.clip(0.5 * (a - e) / denom, -0.5, 0.5))
    return out


def decode_peaks(grid, min_value: float = 1e-3, min_separation: float = 2.0) -> np.ndarray:
    """Local maxima of a grid as an unordered ``(K, 3)`` array of ``(x, y, z)``.

    Peaks closer than ``min_separation`` are merged, keeping the higher one.
    """
    values = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)
    local_max = ndimage.maximum_filter(values, size=3, mode="constant", cval=-np.inf)
    cand = np.argwhere((values >= local_max) & (values > min_value))
    if len(cand) == 0:
        return np.zeros((0, 3))
    order = np.argsort(-values[tuple(cand.T)], kind="stable")
    kept: list[np.ndarray] = []
    for c in cand[order]:
        p = _refine(values, tuple(int(v) for v in c))
        if all(np.linalg.norm(p - q) >= min_separation for q in kept):
            kept.append(p)
    return np.array(kept)


# -- serialization -------------------------------------------------------------


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    w, h, d = grid.dims
    header = MAGIC + struct.pack("<IIId", w, h, d, float(grid.sigma))
    return header + grid.values.astype("<f4").tobytes(order="C")


def grid_from_bytes(blob: bytes) -> VoxelGrid:
    if blob[:4] != MAGIC:
        raise ValueError("not a CVR1 voxel grid")
    w, h, d, sigma = struct.unpack_from("<IIId", blob, 4)
    body = blob[4 + struct.calcsize("<IIId"):]
    if len(body) != 4 * w * h * d:
        raise ValueError(f"expected {w * h * d} floats, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").reshape(d, h, w)
    # float32 rounding can nudge the peak past the exact bound
    values = np.minimum(values.astype(np.float64), peak_value(sigma))
    return VoxelGrid(values, sigma)


def save_grid(path, grid: VoxelGrid) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(grid_to_bytes(grid))
    os.replace(tmp, path)


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read())
