"""Regenerate ``oracle_values.json`` from the reference implementations.

Run from the repository root: ``python3 tests/fixtures/freeze_oracles.py``.
The frozen file is committed; tests compare the package against it.
"""

import json
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import oracles  # noqa: E402


def main():
    rng = np.random.default_rng(20240611)
    frozen = {"encode": [], "gaussian": [], "voxel_loss": [], "coord_loss": [], "gte": [], "nme": []}

    for n, sigma in ((1, 1.0), (3, 1.0), (5, 1.5), (10, 0.8)):
        dims = (8, 7, 6)
        pts = rng.uniform(0, 1, size=(n, 3)) * (np.array(dims) - 1)
        values = oracles.encode_scalar(pts.tolist(), dims, sigma)
        frozen["encode"].append(
            {"points": pts.tolist(), "dims": dims, "sigma": sigma, "values": values.ravel().tolist()}
        )

    for _ in range(20):
        lm = rng.uniform(-5, 5, size=3).tolist()
        vx = rng.integers(-5, 6, size=3).tolist()
        sigma = float(rng.uniform(0.5, 2.0))
        frozen["gaussian"].append({"landmark": lm, "voxel": vx, "sigma": sigma, "value": oracles.gaussian(lm, vx, sigma)})

    for _ in range(3):
        shapes = [(2, 1, 3, 4), (2, 3, 3, 4)]
        pred = [rng.normal(size=s) for s in shapes]
        tgt = [rng.normal(size=s) for s in shapes]
        frozen["voxel_loss"].append(
            {"shapes": shapes, "pred": [p.ravel().tolist() for p in pred],
             "target": [t.ravel().tolist() for t in tgt], "value": oracles.voxel_loss(pred, tgt)}
        )
        a, b = rng.normal(size=36), rng.normal(size=36)
        frozen["coord_loss"].append({"pred": a.tolist(), "target": b.tolist(), "value": oracles.coord_loss(a, b)})

    for _ in range(3):
        gt = rng.uniform(0, 64, size=(12, 3))
        pred = gt + rng.normal(scale=1.5, size=gt.shape)
        frozen["gte"].append({"pred": pred.tolist(), "gt": gt.tolist(), "eyes": [0, 3],
                              "value": oracles.gte(pred.tolist(), gt.tolist(), 0, 3)})
        bbox = (float(gt[:, 0].min()), float(gt[:, 1].min()), float(gt[:, 0].max()), float(gt[:, 1].max()))
        frozen["nme"].append({"pred": pred.tolist(), "gt": gt.tolist(), "bbox": bbox,
                              "value": oracles.nme(pred.tolist(), gt.tolist(), bbox)})

    frozen["lr"] = [oracles.lr(2.5e-4, 10.0, 10, e) for e in range(30)]

    (HERE / "oracle_values.json").write_text(json.dumps(frozen, indent=1) + "\n")


if __name__ == "__main__":
    main()
