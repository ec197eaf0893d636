"""Landmark ordering schemes: point counts, left/right symmetry and templates.

Template coordinates live in a canonical face frame: x to the image right,
y down, z towards the viewer, roughly one unit per half face width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UnknownSchemeError(KeyError):
    pass


@dataclass(frozen=True)
class LandmarkScheme:
    name: str
    n_points: int
    flip_pairs: tuple[tuple[int, int], ...]
    eye_outer: tuple[int, int]
    template: np.ndarray = field(repr=False, compare=False)

    @property
    def midline(self) -> tuple[int, ...]:
        paired = {i for pair in self.flip_pairs for i in pair}
        return tuple(i for i in range(self.n_points) if i not in paired)

    def flip_permutation(self) -> np.ndarray:
        perm = np.arange(self.n_points)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm


def _mirror_fill(n_points, half, pairs):
    """Complete a template given the image-left half and midline points."""
    pts = np.full((n_points, 3), np.nan)
    for idx, xyz in half.items():
        pts[idx] = xyz
    for a, b in pairs:
        src, dst = (a, b) if not np.isnan(pts[a, 0]) else (b, a)
        pts[dst] = pts[src] * np.array([-1.0, 1.0, 1.0])
    if np.isnan(pts).any():
        raise ValueError("template is missing points")
    # centre on the 3D bounding box so synthetic faces sit mid-frame
    pts -= 0.5 * (pts.max(axis=0) + pts.min(axis=0))
    return pts


def _pairs_68():
    pairs = [(i, 16 - i) for i in range(8)]  # jaw
    pairs += [(17 + i, 26 - i) for i in range(5)]  # brows
    pairs += [(31, 35), (32, 34)]  # nostrils
    pairs += [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]  # eyes
    pairs += [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]  # outer lip
    pairs += [(60, 64), (61, 63), (65, 67)]  # inner lip
    return tuple(pairs)


def _template_68():
    half = {}
    for i in range(9):  # jaw, image-left ear down to chin
        t = np.pi / 2 * i / 8
        half[i] = (-0.85 * np.cos(t), -0.05 + 1.0 * np.sin(t), -0.55 + 0.5 * np.sin(t))
    for i, x in enumerate(np.linspace(-0.7, -0.15, 5)):  # brow, outer to inner
        half[17 + i] = (x, -0.45 - 0.08 * np.sin(np.pi * i / 4), 0.05 + 0.1 * i / 4)
    for i in range(4):  # nose bridge
        half[27 + i] = (0.0, -0.3 + 0.15 * i, 0.2 + 0.12 * i)
    half[31] = (-0.2, 0.22, 0.3)
    half[32] = (-0.1, 0.25, 0.38)
    half[33] = (0.0, 0.27, 0.42)
    half.update({  # image-left eye
        36: (-0.58, -0.2, 0.0), 37: (-0.48, -0.26, 0.06), 38: (-0.32, -0.26, 0.08),
        39: (-0.2, -0.2, 0.06), 40: (-0.32, -0.15, 0.07), 41: (-0.48, -0.15, 0.05),
    })
    half.update({  # outer lip
        48: (-0.36, 0.55, 0.22), 49: (-0.24, 0.48, 0.3), 50: (-0.1, 0.45, 0.35),
        51: (0.0, 0.46, 0.36), 57: (0.0, 0.68, 0.32),
        58: (-0.12, 0.66, 0.3), 59: (-0.25, 0.62, 0.26),
    })
    half.update({  # inner lip
        60: (-0.3, 0.55, 0.24), 61: (-0.12, 0.52, 0.31), 62: (0.0, 0.52, 0.33),
        66: (0.0, 0.58, 0.32), 67: (-0.12, 0.58, 0.3),
    })
    return _mirror_fill(68, half, _pairs_68())


def _drop_inner_corners(template_68):
    keep = [i for i in range(68) if i not in (60, 64)]
    return template_68[keep]


def _pairs_66():
    # 68-point layout without the inner mouth corners 60 and 64
    pairs = [p for p in _pairs_68() if 60 not in p and 64 not in p]
    remap = {i: i for i in range(60)}
    remap.update({61: 60, 62: 61, 63: 62, 65: 63, 66: 64, 67: 65})
    return tuple((remap[a], remap[b]) for a, b in pairs)


def _template_toy12(template_68):
    # eye corners x4, nose tip, mouth x4, jaw x3
    idx = [36, 39, 42, 45, 30, 48, 51, 54, 57, 3, 8, 13]
    return template_68[idx] - 0.5 * (template_68[idx].max(0) + template_68[idx].min(0))


_T68 = _template_68()

SCHEMES: dict[str, LandmarkScheme] = {
    "68": LandmarkScheme("68", 68, _pairs_68(), (36, 45), _T68),
    "66": LandmarkScheme("66", 66, _pairs_66(), (36, 45), _drop_inner_corners(_T68)),
    "toy12": LandmarkScheme(
        "toy12", 12, ((0, 3), (1, 2), (5, 7), (9, 11)), (0, 3), _template_toy12(_T68)
    ),
}


def get_scheme(scheme_id: str) -> LandmarkScheme:
    try:
        return SCHEMES[str(scheme_id)]
    except KeyError:
        raise UnknownSchemeError(f"unregistered landmark scheme {scheme_id!r}") from None


def register_scheme(scheme: LandmarkScheme) -> None:
    perm = scheme.flip_permutation()
    if not np.array_equal(perm[perm], np.arange(scheme.n_points)):
        raise ValueError(f"flip pairs of {scheme.name!r} overlap")
    if scheme.template.shape != (scheme.n_points, 3):
        raise ValueError("template shape does not match point count")
    SCHEMES[scheme.name] = scheme
