"""Command-line entry points: synth, encode, train, evaluate, predict."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import metrics
from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .geometry import (
    CubeMapping, LandmarkSet, atomic_write_text, crop_to_input, map_to_image, read_landmarks, write_landmarks,
)
from .network import CoordNetConfig, HourglassStackConfig, JointModel, load_checkpoint, save_checkpoint
from .schemes import get_scheme
from .training import NonFiniteLossError, TrainConfig, finetune_joint, pretrain_coord, pretrain_voxel
from .volumetric import encode, save_grid

log = logging.getLogger("voxlandmark")

STAGES = ("pretrain-voxel", "pretrain-coord", "finetune")
EXIT_MISSING = 2
EXIT_FAILED = 1
EXIT_NONFINITE = 3


class UsageError(Exception):
    pass


# -- config files ----------------------------------------------------------------


def _parse_value(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = val.strip()
    return out


def build_configs(preset: str, raw: dict[str, str], n_landmarks: int, seed: int | None):
    """Preset configs with ``raw`` overrides applied by field name."""
    if preset == "paper":
        hg, train = HourglassStackConfig.paper(), TrainConfig.paper()
    else:
        hg, train = HourglassStackConfig.toy(), TrainConfig.toy()
    cn = CoordNetConfig.paper(n_landmarks) if preset == "paper" else CoordNetConfig.toy(n_landmarks)
    targets = {"hourglass": hg, "coordnet": cn, "train": train}
    updates = {name: {} for name in targets}
    for key, text in raw.items():
        owner = next((n for n, obj in targets.items() if key in {f.name for f in fields(obj)}), None)
        if owner is None or key in ("volume_dims", "n_landmarks"):
            raise UsageError(f"unknown or derived config key {key!r}")
        try:
            updates[owner][key] = _parse_value(text, getattr(targets[owner], key))
        except ValueError as exc:
            raise UsageError(f"config key {key}: {exc}") from None
    hg = HourglassStackConfig(**{**hg.__dict__, **updates["hourglass"]})
    cn = CoordNetConfig(**{**cn.__dict__, **updates["coordnet"], "volume_dims": hg.volume_dims})
    train = TrainConfig(**{**train.__dict__, **updates["train"]})
    if seed is not None:
        train.seed = seed
    return hg, cn, train


# -- commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_landmarks=args.n_landmarks, n_samples=args.n_samples,
        image_size=(args.image_size, args.image_size), seed=args.seed,
    )
    save_dataset(args.out, generate_synthetic(spec))
    return 0


def _dims(text: str) -> tuple[int, int, int]:
    vals = tuple(int(v) for v in text.split(","))
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("dims are w,h,d")
    return vals


def cmd_encode(args) -> int:
    landmarks = read_landmarks(args.input)
    grid = encode(landmarks, args.dims, args.sigma, truncate=not args.no_truncation)
    save_grid(args.out, grid)
    if args.render:
        from .render import save_projections

        save_projections(grid.values, args.render)
    return 0


def _write_log(path: Path, trace) -> None:
    atomic_write_text(path, trace.to_lines())


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    if len(dataset) == 0:
        raise UsageError(f"{args.data}: no samples")
    raw = read_config(args.config) if args.config else {}
    if args.no_truncation:
        raw["truncate"] = "false"
    scheme_id = dataset[0].landmarks.scheme_id
    n = get_scheme(scheme_id).n_points
    hg, cn, train = build_configs(args.preset, raw, n, args.seed)
    samples = list(dataset)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train.seed)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        if model.scheme_id not in (None, scheme_id):
            raise UsageError(f"checkpoint scheme {model.scheme_id} does not match data scheme {scheme_id}")
    else:
        model = JointModel(hg, cn, seed=train.seed, scheme_id=scheme_id)
        save_checkpoint(out / "init.ckpt", model)
    if args.double:
        model.double()

    stages = STAGES if args.stage == "all" else (args.stage,)
    runners = {
        "pretrain-voxel": lambda ck: pretrain_voxel(model, samples, train, ck),
        "pretrain-coord": lambda ck: pretrain_coord(model, samples, train, ck),
        "finetune": lambda ck: finetune_joint(model, samples, train, not args.allow_unpretrained, ck),
    }
    for stage in stages:
        # per-epoch snapshots go to a scratch name so the last completed stage survives a crash
        try:
            trace = runners[stage](out / f"{stage}.partial.ckpt")
        except NonFiniteLossError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NONFINITE
        except RuntimeError as exc:
            raise UsageError(str(exc)) from None
        _write_log(out / f"{stage}.log", trace)
        save_checkpoint(out / f"{stage}.ckpt", model, stage=stage)
        log.info("%s: %d steps, final loss %.6g, %.1fs", stage, len(trace), trace.final(), trace.wall_time)
    save_checkpoint(out / "final.ckpt", model, stages=list(stages))
    return 0


def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise UsageError(f"{path}: unreadable image ({exc})") from None


def _predict_one(model: JointModel, image: np.ndarray, bbox, depth_gain: float):
    hg = model.hourglass_config
    crop = crop_to_input(image, bbox, hg.input_size)
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(crop.transpose(2, 0, 1).copy(), dtype=dtype)[None]
    model.eval()
    with torch.no_grad():
        volumes, coords = model(x)
    pts_vol = coords.reshape(-1, 3).double().numpy()
    mapping = CubeMapping.from_bbox(bbox, hg.volume_dims, depth_gain)
    pts_img = map_to_image(LandmarkSet(pts_vol, model.scheme_id), mapping)
    return pts_img, pts_vol, volumes[-1][0].double().numpy(), crop


def cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    if len(dataset) == 0:
        raise UsageError(f"{args.data}: no samples")
    samples = list(dataset)
    scheme_ids = {s.landmarks.scheme_id for s in samples}
    if len(scheme_ids) != 1:
        raise UsageError(f"dataset mixes landmark schemes {sorted(scheme_ids)}")
    scheme = get_scheme(scheme_ids.pop())

    if args.predictions:
        preds = [read_landmarks(Path(args.predictions) / f"{s.sample_id}.pts3") for s in samples]
        for s, p in zip(samples, preds):
            if p.scheme_id not in (None, scheme.name) or len(p) != scheme.n_points:
                raise UsageError(f"{s.sample_id}: prediction scheme does not match {scheme.name}")
    else:
        model = load_checkpoint(args.checkpoint)
        if model.scheme_id not in (None, scheme.name) or model.n_landmarks != scheme.n_points:
            raise UsageError(
                f"checkpoint predicts scheme {model.scheme_id} ({model.n_landmarks} points) "
                f"but the dataset uses {scheme.name}"
            )
        preds = [_predict_one(model, s.image, s.bbox, args.depth_gain)[0] for s in samples]

    report = metrics.evaluate(
        preds, [s.landmarks for s in samples], [s.sample_id for s in samples], scheme.eye_outer,
        yaw_buckets=[s.yaw_bucket for s in samples], normalizer_2d=args.gte_2d,
    )
    out = Path(args.out)
    report.write(out, out.with_name(out.name + ".ced"))
    agg = report.aggregates()
    print(f"GTE {agg['gte_mean']:.4f}%  NME {agg['nme_mean']:.4f}%  ({len(samples)} samples)")
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = _read_image(args.image)
    H, W = image.shape[:2]
    bbox = tuple(float(v) for v in args.bbox.split(",")) if args.bbox else (0.0, 0.0, float(W), float(H))
    if len(bbox) != 4 or not (bbox[2] > bbox[0] and bbox[3] > bbox[1]):
        raise UsageError(f"bad bbox {args.bbox!r}")
    pts_img, pts_vol, volume, crop = _predict_one(model, image, bbox, args.depth_gain)
    write_landmarks(args.out, pts_img)
    if args.render:
        from .render import save_panel, save_projections

        save_projections(volume, args.render)
        save_panel(f"{args.render}_panel.png", image, pts_img.points, volume, pts_vol)
    return 0


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxlandmark", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=8)
    p.add_argument("--n-landmarks", type=int, default=12)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", help="encode a landmark file (volume coordinates) into a voxel grid")
    p.add_argument("--input", required=True)
    p.add_argument("--dims", type=_dims, default=(16, 16, 16), help="w,h,d")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--render", help="prefix for per-axis maximum projections")
    p.add_argument("--no-truncation", action="store_true", help="evaluate every Gaussian on the full grid")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=(*STAGES, "all"), default="all")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=("toy", "paper"), default="toy")
    p.add_argument("--no-truncation", action="store_true")
    p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--allow-unpretrained", action="store_true",
                   help="let fine-tuning start from subnetworks that were not pre-trained")
    p.add_argument("--double", action="store_true", help="train in double precision")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="GTE/NME/CED report")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="directory of <id>.pts3 predictions in image space")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report path; the CED curve goes to <out>.ced")
    p.add_argument("--gte-2d", action="store_true", help="normalize GTE by the 2D eye-corner distance")
    p.add_argument("--depth-gain", type=float, default=1.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict landmarks for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--bbox", help="x0,y0,x1,y1 (default: whole image)")
    p.add_argument("--out", required=True)
    p.add_argument("--render", help="prefix for volume projections and the summary panel")
    p.add_argument("--depth-gain", type=float, default=1.0)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
