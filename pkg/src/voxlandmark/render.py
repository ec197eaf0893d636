"""Portable-image renders of volumes and landmark predictions."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

AXES = {"x": 2, "y": 1, "z": 0}  # axis of the (d, h, w) array collapsed by each projection


def max_projection(values: np.ndarray, axis: str) -> np.ndarray:
    return np.asarray(values).max(axis=AXES[axis])


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    top = float(arr.max())
    scaled = arr / top if top > 0 else np.zeros_like(arr)
    return np.round(np.clip(scaled, 0, 1) * 255).astype(np.uint8)


def _save_image(path, pixels: np.ndarray) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    Image.fromarray(pixels).save(tmp, format="PNG")
    os.replace(tmp, path)


def save_projections(values: np.ndarray, prefix) -> list[str]:
    """One grey-level PNG per axis, ``<prefix>_mip_{x,y,z}.png``."""
    paths = []
    for axis in AXES:
        path = f"{prefix}_mip_{axis}.png"
        _save_image(path, _to_uint8(max_projection(values, axis)))
        paths.append(path)
    return paths


def save_panel(path, image: np.ndarray, points_2d: np.ndarray, volume: np.ndarray,
               points_3d: np.ndarray) -> None:
    """Three rows: image with 2D overlay, volume projection, 3D landmark scatter."""
    fig = plt.figure(figsize=(4, 10))
    ax = fig.add_subplot(3, 1, 1)
    ax.imshow(np.clip(image, 0, 1))
    ax.scatter(points_2d[:, 0], points_2d[:, 1], s=8, c="lime")
    ax.set_axis_off()

    ax = fig.add_subplot(3, 1, 2)
    ax.imshow(max_projection(volume, "z"), cmap="magma")
    ax.set_axis_off()

    ax = fig.add_subplot(3, 1, 3, projection="3d")
    ax.scatter(points_3d[:, 0], points_3d[:, 2], -points_3d[:, 1], s=8, c="tab:blue")
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_zlabel("-y")

    fig.tight_layout()
    tmp = f"{path}.tmp{os.getpid()}.png"
    fig.savefig(tmp, dpi=80)
    plt.close(fig)
    os.replace(tmp, path)
