"""Landmark error metrics: GTE, NME, cumulative error curves and pose buckets.

All errors are returned in percent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import YAW_BUCKETS, tight_bbox
from .geometry import LandmarkSet, atomic_write_text


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, LandmarkSet) else np.asarray(x, dtype=np.float64)


def gte(pred, gt, left_eye_outer: int, right_eye_outer: int, normalizer_2d: bool = False) -> float:
    """Mean 3D point-to-point error over the ground-truth outer-eye-corner distance.

    With ``normalizer_2d`` the eye-corner distance ignores depth; the
    point errors stay 3D.
    """
    p, g = _points(pred), _points(gt)
    if p.shape != g.shape:
        raise ValueError(f"landmark counts differ: {p.shape} vs {g.shape}")
    n = len(g)
    for idx in (left_eye_outer, right_eye_outer):
        if not -n <= idx < n:
            raise IndexError(f"eye index {idx} out of range for {n} landmarks")
    span = g[left_eye_outer] - g[right_eye_outer]
    if normalizer_2d:
        span = span[:2]
    norm = float(np.linalg.norm(span))
    if norm == 0:
        raise ValueError("outer eye corners coincide; interocular distance is zero")
    return 100.0 * float(np.linalg.norm(p - g, axis=1).mean()) / norm


def nme(pred2d, gt2d, bbox=None) -> float:
    """Mean 2D point-to-point error over ``sqrt(width * height)`` of ``bbox``.

    ``bbox`` is ``(x0, y0, x1, y1)``; it defaults to the tight box around the
    ground-truth points. Only the first two columns of the inputs are used.
    """
    p = _points(pred2d)[:, :2]
    g = _points(gt2d)[:, :2]
    if p.shape != g.shape:
        raise ValueError(f"landmark counts differ: {p.shape} vs {g.shape}")
    x0, y0, x1, y1 = tight_bbox(g) if bbox is None else bbox
    area = (x1 - x0) * (y1 - y0)
    if not area > 0:
        raise ValueError(f"bbox {bbox} has no area")
    return 100.0 * float(np.linalg.norm(p - g, axis=1).mean()) / math.sqrt(area)


def ced_curve(errors, thresholds) -> np.ndarray:
    """Fraction of errors at or below each threshold."""
    err = np.asarray(errors, dtype=np.float64).ravel()
    thr = np.asarray(thresholds, dtype=np.float64).ravel()
    if err.size == 0:
        raise ValueError("no errors given")
    if np.any(np.diff(thr) < 0):
        raise ValueError("thresholds must be sorted ascending")
    return np.searchsorted(np.sort(err), thr, side="right") / err.size


@dataclass
class PoseTable:
    bucket_means: dict[str, float | None]
    mean: float | None
    std: float | None


def pose_bucketed_nme(nmes, buckets, mean_of_buckets: bool = True) -> PoseTable:
    """Mean NME per absolute-yaw bucket; empty buckets are ``None``.

    ``mean`` and ``std`` are taken over the present bucket means. With
    ``mean_of_buckets=False`` the mean is over all samples instead.
    """
    nmes = np.asarray(nmes, dtype=np.float64)
    if len(nmes) != len(buckets):
        raise ValueError("one bucket label per NME value is required")
    unknown = set(buckets) - set(YAW_BUCKETS)
    if unknown:
        raise ValueError(f"unknown yaw buckets: {sorted(unknown)}")
    labels = np.asarray(buckets, dtype=object)
    means = {}
    for b in YAW_BUCKETS:
        sel = nmes[labels == b]
        means[b] = float(sel.mean()) if sel.size else None
    present = [v for v in means.values() if v is not None]
    if not present:
        return PoseTable(means, None, None)
    mean = float(np.mean(present)) if mean_of_buckets else float(nmes.mean())
    return PoseTable(means, mean, float(np.std(present)))


DEFAULT_THRESHOLDS = np.linspace(0.0, 20.0, 201)


@dataclass
class MetricReport:
    per_sample: list[tuple[str, float, float]]
    ced_thresholds: np.ndarray = field(default_factory=lambda: DEFAULT_THRESHOLDS.copy())
    pose: PoseTable | None = None

    def __post_init__(self):
        if not self.per_sample:
            raise ValueError("report needs at least one sample")
        for sid, g, n in self.per_sample:
            if not (g >= 0 and n >= 0):
                raise ValueError(f"{sid}: negative or NaN error")

    @property
    def gte_values(self) -> np.ndarray:
        return np.array([g for _, g, _ in self.per_sample])

    @property
    def nme_values(self) -> np.ndarray:
        return np.array([n for _, _, n in self.per_sample])

    def aggregates(self) -> dict[str, float]:
        g, n = self.gte_values, self.nme_values
        return {
            "gte_mean": float(g.mean()), "gte_std": float(g.std()),
            "nme_mean": float(n.mean()), "nme_std": float(n.std()),
        }

    @property
    def ced(self) -> list[tuple[float, float]]:
        """GTE cumulative curve as ``(threshold, fraction)`` pairs."""
        frac = ced_curve(self.gte_values, self.ced_thresholds)
        return list(zip(self.ced_thresholds.tolist(), frac.tolist()))

    def to_text(self) -> str:
        lines = ["# sample_id gte_percent nme_percent"]
        lines += [f"{sid} {g!r} {n!r}" for sid, g, n in self.per_sample]
        lines.append("# aggregate")
        lines += [f"{k} {v!r}" for k, v in self.aggregates().items()]
        if self.pose is not None:
            for b, v in self.pose.bucket_means.items():
                lines.append(f"nme_yaw_{b} {'absent' if v is None else repr(v)}")
            for k in ("mean", "std"):
                v = getattr(self.pose, k)
                lines.append(f"nme_yaw_{k} {'absent' if v is None else repr(v)}")
        return "\n".join(lines) + "\n"

    def ced_text(self) -> str:
        return "".join(f"{t!r} {f!r}\n" for t, f in self.ced)

    @classmethod
    def from_text(cls, text: str) -> MetricReport:
        per_sample, pose_vals, in_footer = [], {}, False
        for line in text.splitlines():
            if line.startswith("# aggregate"):
                in_footer = True
                continue
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if not in_footer:
                per_sample.append((parts[0], float(parts[1]), float(parts[2])))
            elif parts[0].startswith("nme_yaw_"):
                pose_vals[parts[0][len("nme_yaw_"):]] = None if parts[1] == "absent" else float(parts[1])
        pose = None
        if pose_vals:
            pose = PoseTable({b: pose_vals.get(b) for b in YAW_BUCKETS}, pose_vals.get("mean"), pose_vals.get("std"))
        return cls(per_sample, pose=pose)

    def write(self, path, ced_path=None) -> None:
        atomic_write_text(path, self.to_text())
        if ced_path is not None:
            atomic_write_text(ced_path, self.ced_text())


def evaluate(pred_sets, gt_sets, sample_ids, eye_outer, bboxes=None, yaw_buckets=None,
             normalizer_2d: bool = False, thresholds=None) -> MetricReport:
    """Build a report from parallel sequences of predictions and ground truth."""
    rows = []
    for k, (p, g, sid) in enumerate(zip(pred_sets, gt_sets, sample_ids, strict=True)):
        bbox = None if bboxes is None else bboxes[k]
        rows.append((sid, gte(p, g, *eye_outer, normalizer_2d=normalizer_2d), nme(p, g, bbox)))
    pose = None
    if yaw_buckets is not None and all(b is not None for b in yaw_buckets):
        pose = pose_bucketed_nme([r[2] for r in rows], yaw_buckets)
    kwargs = {} if thresholds is None else {"ced_thresholds": np.asarray(thresholds, dtype=np.float64)}
    return MetricReport(rows, pose=pose, **kwargs)
