"""Losses, the two-stage training scheme and its learning-rate schedule."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field, fields

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .geometry import AugmentParams, CubeMapping, augment, crop_to_input, map_to_image, map_to_volume
from .network import JointModel, save_checkpoint
from .volumetric import VolumePyramid, pyramid_arrays

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_coord: float = 1e-3
    lr_initial: float = 2.5e-4
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 10
    epochs_pretrain: int = 15
    epochs_finetune: int = 10
    batch_size: int = 8
    sigma: float = 1.0
    seed: int = 0
    truncate: bool = True
    normalize_losses: bool = False
    global_lr_schedule: bool = False
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    abort_on_nan: bool = True
    augment: bool = False
    max_rotation: float = 30.0
    scale_min: float = 0.75
    scale_max: float = 1.25
    flip_prob: float = 0.5
    depth_gain: float = 1.0
    num_workers: int = 0
    checkpoint_every: int = 0  # epochs; 0 means only at stage end

    def __post_init__(self):
        if self.lambda_coord < 0:
            raise ValueError("lambda_coord must be non-negative")
        if self.lr_initial < 0 or self.sigma <= 0 or self.batch_size < 1:
            raise ValueError("lr_initial, sigma and batch_size must be positive")
        if self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ValueError("invalid learning-rate decay")

    @classmethod
    def paper(cls):
        return cls()

    @classmethod
    def toy(cls, **overrides):
        """Desk-scale overfitting preset: full-batch steps, no decay within a run."""
        base = dict(
            lr_initial=1e-3,
            lr_decay_every=10_000,
            epochs_pretrain=200,
            epochs_finetune=500,
            batch_size=8,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    return config.lr_initial * config.lr_decay_factor ** -(epoch // config.lr_decay_every)


# -- losses ----------------------------------------------------------------------


def _as_tensor_levels(targets, like: torch.Tensor):
    if isinstance(targets, VolumePyramid):
        targets = [torch.as_tensor(g.values)[None] for g in targets.grids]
    return [torch.as_tensor(t, dtype=like.dtype, device=like.device) for t in targets]


def voxel_loss(predicted, targets, normalize: bool = False) -> torch.Tensor:
    """Squared error summed over levels, voxels and batch.

    ``predicted`` is a list of ``(B, d_m, h, w)`` tensors; ``targets`` a matching
    list or a :class:`VolumePyramid`. With ``normalize`` each level contributes
    its mean instead of its sum.
    """
    if len(predicted) != len(targets):
        raise ValueError(f"{len(predicted)} predicted levels but {len(targets)} targets")
    targets = _as_tensor_levels(targets, predicted[0])
    total = predicted[0].new_zeros(())
    for m, (p, t) in enumerate(zip(predicted, targets)):
        if p.shape != t.shape:
            raise ValueError(f"level {m}: prediction {tuple(p.shape)} vs target {tuple(t.shape)}")
        sq = (p - t).pow(2)
        total = total + (sq.mean() if normalize else sq.sum())
    return total


def coord_loss(predicted, target, normalize: bool = False) -> torch.Tensor:
    """Squared Euclidean distance between coordinate vectors (summed over batch)."""
    predicted = torch.as_tensor(predicted)
    target = torch.as_tensor(target, dtype=predicted.dtype)
    if predicted.shape != target.shape:
        raise ValueError(f"coordinate shapes differ: {tuple(predicted.shape)} vs {tuple(target.shape)}")
    sq = (predicted - target).pow(2)
    return sq.mean() if normalize else sq.sum()


def joint_loss(predicted_volumes, targets, predicted_coords, target_coords, lambda_coord, normalize=False):
    return voxel_loss(predicted_volumes, targets, normalize) + lambda_coord * coord_loss(
        predicted_coords, target_coords, normalize
    )


# -- data ------------------------------------------------------------------------


class VolumeTargets(Dataset):
    """Turns samples into network inputs and pyramid/coordinate targets.

    Each item is ``(image, volumes, coords)`` with ``image`` of shape
    ``(3, H, W)``, one ``(d_m, h, w)`` tensor per level and a ``3N`` vector in
    volume coordinates. With augmentation on, the draw depends on
    ``(seed, epoch, index)`` only.
    """

    def __init__(self, samples, model: JointModel, config: TrainConfig, dtype=torch.float32):
        self.samples = samples
        self.hg = model.hourglass_config
        self.dims = self.hg.volume_dims
        self.config = config
        self.dtype = dtype
        self.epoch = 0
        self._cache: dict[int, tuple] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def mapping(self, sample) -> CubeMapping:
        return CubeMapping.from_bbox(sample.bbox, self.dims, self.config.depth_gain)

    def _build(self, idx):
        sample = self.samples[idx]
        image = crop_to_input(sample.image, sample.bbox, self.hg.input_size)
        landmarks, _ = map_to_volume(sample.landmarks, self.mapping(sample))
        cfg = self.config
        if cfg.augment:
            seed = np.random.SeedSequence([cfg.seed, self.epoch, idx]).generate_state(1)[0]
            params = AugmentParams.draw(
                int(seed), cfg.max_rotation, (cfg.scale_min, cfg.scale_max), cfg.flip_prob
            )
            image, landmarks = augment(image, landmarks, params, self.dims)
            pts = np.clip(landmarks.points, 0.0, np.asarray(self.dims, dtype=np.float64) - 1.0)
            landmarks = landmarks.with_points(pts)
        levels = pyramid_arrays(
            landmarks, self.dims, self.hg.z_resolutions, cfg.sigma, cfg.truncate
        )
        return (
            torch.as_tensor(image.transpose(2, 0, 1).copy(), dtype=self.dtype),
            [torch.as_tensor(v, dtype=self.dtype) for v in levels],
            torch.as_tensor(landmarks.flat(), dtype=self.dtype),
        )

    def __getitem__(self, idx):
        if self.config.augment:
            return self._build(idx)
        if idx not in self._cache:
            self._cache[idx] = self._build(idx)
        return self._cache[idx]


def _collate(batch):
    images, volumes, coords = zip(*batch)
    levels = [torch.stack(level) for level in zip(*volumes)]
    return torch.stack(images), levels, torch.stack(coords)


# -- training --------------------------------------------------------------------


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def append(self, **record):
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("step index must increase")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def final(self, key: str = "total") -> float:
        return self.records[-1][key]

    def to_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_lines(cls, text: str) -> TrainLog:
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


def _model_dtype(model):
    return next(model.parameters()).dtype


def _loader(dataset: VolumeTargets, config: TrainConfig, stage_seed: int):
    gen = torch.Generator().manual_seed(config.seed * 1000 + stage_seed)
    return DataLoader(
        dataset,
        batch_size=config.batch_size,
        shuffle=True,
        generator=gen,
        collate_fn=_collate,
        num_workers=config.num_workers,
    )


def _run_stage(
    model: JointModel,
    samples,
    config: TrainConfig,
    stage: str,
    params,
    compute: Callable,
    epochs: int,
    epoch_offset: int,
    stage_seed: int,
    checkpoint_path=None,
) -> TrainLog:
    dataset = VolumeTargets(samples, model, config, _model_dtype(model))
    loader = _loader(dataset, config, stage_seed)
    params = list(params)
    opt = torch.optim.RMSprop(params, lr=config.lr_initial, alpha=config.rms_alpha, eps=config.rms_eps)
    trace = TrainLog()
    start = time.perf_counter()
    step = 0
    model.train()
    for epoch in range(epochs):
        lr = lr_for_epoch(config, epoch + epoch_offset)
        for group in opt.param_groups:
            group["lr"] = lr
        dataset.set_epoch(epoch + epoch_offset)
        for images, volumes, coords in loader:
            opt.zero_grad(set_to_none=False)
            l_vox, l_coord, total = compute(images, volumes, coords)
            if config.abort_on_nan and not torch.isfinite(total):
                raise NonFiniteLossError(
                    f"{stage}: non-finite loss at epoch {epoch}, step {step} "
                    f"(vox={l_vox.item()}, coord={l_coord.item()}, lr={lr})"
                )
            total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            trace.append(
                step=step, stage=stage, epoch=epoch + epoch_offset, lr=lr,
                vox=l_vox.item(), coord=l_coord.item(), total=total.item(),
            )
            step += 1
        if checkpoint_path and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, stage=stage, epoch=epoch)
        log.debug("%s epoch %d lr %.3g loss %.6g", stage, epoch, lr, trace.final() if trace.records else float("nan"))
    trace.wall_time = time.perf_counter() - start
    return trace


def pretrain_voxel(model: JointModel, samples, config: TrainConfig, checkpoint_path=None) -> TrainLog:
    """Fit the voxel network to the target pyramids; the coordinate network is not touched."""
    zero = torch.zeros((), dtype=_model_dtype(model))

    def compute(images, volumes, coords):
        l_vox = voxel_loss(model.voxel_net(images), volumes, config.normalize_losses)
        return l_vox, zero, l_vox

    trace = _run_stage(
        model, samples, config, "pretrain-voxel", model.voxel_net.parameters(), compute,
        config.epochs_pretrain, 0, 1, checkpoint_path,
    )
    model.provenance.voxel_pretrained = True
    return trace


def pretrain_coord(model: JointModel, samples, config: TrainConfig, checkpoint_path=None) -> TrainLog:
    """Fit the coordinate network on ground-truth volumes; the voxel network is not touched."""
    zero = torch.zeros((), dtype=_model_dtype(model))

    def compute(images, volumes, coords):
        l_coord = coord_loss(model.coord_net(volumes[-1]), coords, config.normalize_losses)
        return zero, l_coord, l_coord

    trace = _run_stage(
        model, samples, config, "pretrain-coord", model.coord_net.parameters(), compute,
        config.epochs_pretrain, 0, 2, checkpoint_path,
    )
    model.provenance.coord_pretrained = True
    return trace


def finetune_joint(
    model: JointModel, samples, config: TrainConfig, require_pretrained: bool = True, checkpoint_path=None
) -> TrainLog:
    """Train both networks end to end; the coordinate term back-propagates through the volumes."""
    prov = model.provenance
    if require_pretrained and not (prov.voxel_pretrained and prov.coord_pretrained):
        raise RuntimeError(
            "fine-tuning expects both subnetworks pre-trained "
            f"(voxel={prov.voxel_pretrained}, coord={prov.coord_pretrained}); "
            "pass require_pretrained=False to override"
        )

    def compute(images, volumes, coords):
        pred_volumes, pred_coords = model(images)
        l_vox = voxel_loss(pred_volumes, volumes, config.normalize_losses)
        l_coord = coord_loss(pred_coords, coords, config.normalize_losses)
        return l_vox, l_coord, l_vox + config.lambda_coord * l_coord

    offset = config.epochs_pretrain if config.global_lr_schedule else 0
    trace = _run_stage(
        model, samples, config, "finetune", model.parameters(), compute,
        config.epochs_finetune, offset, 3, checkpoint_path,
    )
    prov.finetuned = True
    return trace


def train_two_stage(model: JointModel, samples, config: TrainConfig) -> dict[str, TrainLog]:
    return {
        "pretrain-voxel": pretrain_voxel(model, samples, config),
        "pretrain-coord": pretrain_coord(model, samples, config),
        "finetune": finetune_joint(model, samples, config),
    }


# -- inference helpers -------------------------------------------------------------


def predict_volume_coords(model: JointModel, samples, config: TrainConfig) -> np.ndarray:
    """Inference-mode landmarks ``(S, N, 3)`` in volume coordinates, without augmentation."""
    plain = TrainConfig(**{**config.__dict__, "augment": False})
    dataset = VolumeTargets(samples, model, plain, _model_dtype(model))
    images = torch.stack([dataset[i][0] for i in range(len(dataset))])
    return model.predict(images).double().numpy()


def predict_landmarks(model: JointModel, samples, config: TrainConfig):
    """Predicted landmarks mapped back to each sample's image space."""
    plain = TrainConfig(**{**config.__dict__, "augment": False})
    dataset = VolumeTargets(samples, model, plain, _model_dtype(model))
    coords = predict_volume_coords(model, samples, config)
    out = []
    for sample, pts in zip(samples, coords):
        vol = sample.landmarks.with_points(pts)
        out.append(map_to_image(vol, dataset.mapping(sample)))
    return out


def mean_volume_error(model: JointModel, samples, config: TrainConfig) -> float:
    """Mean 3D point-to-point error in voxels between prediction and ground truth."""
    plain = TrainConfig(**{**config.__dict__, "augment": False})
    dataset = VolumeTargets(samples, model, plain, _model_dtype(model))
    pred = predict_volume_coords(model, samples, config)
    gt = np.stack([dataset[i][2].double().numpy().reshape(-1, 3) for i in range(len(dataset))])
    return float(np.linalg.norm(pred - gt, axis=-1).mean())
