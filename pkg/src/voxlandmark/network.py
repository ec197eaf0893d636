"""Voxel regressor (stacked hourglass) and coordinate regressor (3D convolutions)."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "voxlandmark-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class HourglassStackConfig:
    num_modules: int = 2
    input_size: tuple[int, int] = (64, 64)
    base_channels: int = 16
    z_resolutions: tuple[int, ...] = (1, 16)
    downsample_depth: int = 2

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.z_resolutions = tuple(int(v) for v in self.z_resolutions)
        if self.num_modules < 1:
            raise ValueError("need at least one hourglass module")
        if len(self.z_resolutions) != self.num_modules:
            raise ValueError(
                f"{self.num_modules} modules but {len(self.z_resolutions)} z resolutions"
            )
        H, W = self.input_size
        stride = 4 * 2**self.downsample_depth
        if H % stride or W % stride:
            raise ValueError(f"input size {self.input_size} must be divisible by {stride}")

    @classmethod
    def toy(cls):
        return cls()

    @classmethod
    def paper(cls):
        return cls(4, (256, 256), 256, (1, 2, 4, 64), 4)

    @property
    def volume_dims(self) -> tuple[int, int, int]:
        H, W = self.input_size
        return W // 4, H // 4, self.z_resolutions[-1]


@dataclass
class CoordNetConfig:
    n_landmarks: int = 12
    volume_dims: tuple[int, int, int] = (16, 16, 16)
    num_conv_layers: int = 5
    channel_plan: tuple[int, ...] = (32, 64, 128, 128, 128)
    stride2_layers: tuple[int, ...] = (1, 2, 3)
    leaky_slope: float = 0.01
    pooling: str = "global"

    def __post_init__(self):
        self.volume_dims = tuple(int(v) for v in self.volume_dims)
        self.channel_plan = tuple(int(v) for v in self.channel_plan)
        self.stride2_layers = tuple(int(v) for v in self.stride2_layers)
        if self.num_conv_layers < 1:
            raise ValueError("need at least one 3D convolution")
        if len(self.channel_plan) != self.num_conv_layers:
            raise ValueError("channel_plan needs one entry per conv layer")
        if self.pooling not in ("global", "flatten"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @classmethod
    def toy(cls, n_landmarks: int = 12):
        return cls(n_landmarks=n_landmarks)

    @classmethod
    def paper(cls, n_landmarks: int = 68):
        return cls(n_landmarks=n_landmarks, volume_dims=(64, 64, 64))

    @property
    def output_dim(self) -> int:
        return 3 * self.n_landmarks


class Residual(nn.Module):
    """Pre-activation bottleneck block."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        mid = max(cout // 2, 1)
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, mid, 1)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.bn3 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None
        self.act1, self.act2, self.act3 = nn.ReLU(), nn.ReLU(), nn.ReLU()

    def forward(self, x):
        out = self.conv1(self.act1(self.bn1(x)))
        out = self.conv2(self.act2(self.bn2(out)))
        out = self.conv3(self.act3(self.bn3(out)))
        return out + (x if self.skip is None else self.skip(x))


class Hourglass(nn.Module):
    def __init__(self, depth: int, channels: int):
        super().__init__()
        self.up = Residual(channels, channels)
        self.pool = nn.MaxPool2d(2)
        self.low1 = Residual(channels, channels)
        self.low2 = Hourglass(depth - 1, channels) if depth > 1 else Residual(channels, channels)
        self.low3 = Residual(channels, channels)

    def forward(self, x):
        low = self.low3(self.low2(self.low1(self.pool(x))))
        return self.up(x) + F.interpolate(low, scale_factor=2, mode="nearest")


class VoxelRegressor(nn.Module):
    """Stacked hourglass; module ``m`` emits ``z_resolutions[m]`` channels read as z-slices."""

    def __init__(self, config: HourglassStackConfig):
        super().__init__()
        self.config = config
        ch = config.base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, max(ch // 2, 1), 7, stride=2, padding=3),
            nn.BatchNorm2d(max(ch // 2, 1)),
            nn.ReLU(),
            Residual(max(ch // 2, 1), ch),
            nn.MaxPool2d(2),
            Residual(ch, ch),
            Residual(ch, ch),
        )
        M = config.num_modules
        self.hourglasses = nn.ModuleList(Hourglass(config.downsample_depth, ch) for _ in range(M))
        self.features = nn.ModuleList(
            nn.Sequential(Residual(ch, ch), nn.Conv2d(ch, ch, 1), nn.BatchNorm2d(ch), nn.ReLU())
            for _ in range(M)
        )
        self.heads = nn.ModuleList(nn.Conv2d(ch, d, 1) for d in config.z_resolutions)
        self.merge_features = nn.ModuleList(nn.Conv2d(ch, ch, 1) for _ in range(M - 1))
        self.merge_heads = nn.ModuleList(
            nn.Conv2d(d, ch, 1) for d in config.z_resolutions[:-1]
        )

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        H, W = self.config.input_size
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, H, W):
            raise ValueError(f"expected images of shape (B, 3, {H}, {W}), got {tuple(image.shape)}")
        x = self.stem(image)
        volumes = []
        for m, (hg, feat, head) in enumerate(zip(self.hourglasses, self.features, self.heads)):
            y = feat(hg(x))
            vol = head(y)
            volumes.append(vol)
            if m < len(self.merge_heads):
                x = x + self.merge_features[m](y) + self.merge_heads[m](vol)
        return volumes


class CoordRegressor(nn.Module):
    """3D convolutions with batch norm and leaky ReLU, then one linear layer."""

    def __init__(self, config: CoordNetConfig):
        super().__init__()
        self.config = config
        layers = []
        cin = 1
        size = list(config.volume_dims)
        for i, cout in enumerate(config.channel_plan):
            stride = 2 if i in config.stride2_layers else 1
            layers += [
                nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
                nn.BatchNorm3d(cout),
                nn.LeakyReLU(config.leaky_slope),
            ]
            size = [(n + 2 - 3) // stride + 1 for n in size]
            cin = cout
        self.convs = nn.Sequential(*layers)
        n_features = cin if config.pooling == "global" else cin * math.prod(size)
        self.fc = nn.Linear(n_features, config.output_dim)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        w, h, d = self.config.volume_dims
        if volume.dim() != 4 or tuple(volume.shape[1:]) != (d, h, w):
            raise ValueError(f"expected volumes of shape (B, {d}, {h}, {w}), got {tuple(volume.shape)}")
        x = self.convs(volume.unsqueeze(1))
        if self.config.pooling == "global":
            x = x.mean(dim=(2, 3, 4))
        else:
            x = x.flatten(1)
        return self.fc(x)


@dataclass
class Provenance:
    voxel_pretrained: bool = False
    coord_pretrained: bool = False
    finetuned: bool = False


class JointModel(nn.Module):
    """Image -> coarse-to-fine volumes -> ordered coordinate vector."""

    def __init__(
        self, hourglass: HourglassStackConfig, coordnet: CoordNetConfig, seed: int = 0,
        scheme_id: str | None = None,
    ):
        super().__init__()
        if hourglass.volume_dims != coordnet.volume_dims:
            raise ValueError(
                f"hourglass emits {hourglass.volume_dims} volumes but the coordinate "
                f"network expects {coordnet.volume_dims}"
            )
        self.hourglass_config = hourglass
        self.coordnet_config = coordnet
        self.seed = seed
        self.scheme_id = scheme_id
        self.provenance = Provenance()
        self.voxel_net = VoxelRegressor(hourglass)
        self.coord_net = CoordRegressor(coordnet)
        initialize(self, seed)

    @classmethod
    def toy(cls, seed: int = 0, n_landmarks: int = 12):
        return cls(HourglassStackConfig.toy(), CoordNetConfig.toy(n_landmarks), seed)

    @classmethod
    def paper(cls, seed: int = 0, n_landmarks: int = 68):
        return cls(HourglassStackConfig.paper(), CoordNetConfig.paper(n_landmarks), seed)

    @property
    def n_landmarks(self) -> int:
        return self.coordnet_config.n_landmarks

    def forward(self, image: torch.Tensor):
        volumes = self.voxel_net(image)
        return volumes, self.coord_net(volumes[-1])

    def predict(self, image: torch.Tensor) -> torch.Tensor:
        """Inference-mode landmarks of shape ``(B, N, 3)`` in volume coordinates."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                _, coords = self(image)
        finally:
            self.train(was_training)
        return coords.reshape(len(coords), -1, 3)


def initialize(model: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, unit batch-norm scales.

    The coordinate regressor's output bias starts at the volume centre so the
    untrained prediction is the mean position rather than the origin.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Conv2d, nn.Conv3d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                mod.weight.copy_(torch.empty_like(mod.weight).uniform_(-bound, bound, generator=gen))
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, (nn.BatchNorm2d, nn.BatchNorm3d)):
                mod.reset_parameters()
                mod.reset_running_stats()
        for mod in model.modules():
            if isinstance(mod, CoordRegressor):
                w, h, d = mod.config.volume_dims
                centre = torch.tensor([w / 2.0, h / 2.0, d / 2.0], dtype=mod.fc.bias.dtype)
                mod.fc.bias.copy_(centre.repeat(mod.config.n_landmarks))
                # keep the initial output close to the centre
                mod.fc.weight.mul_(0.1)


def parameter_groups(model: JointModel) -> dict[str, list[str]]:
    """Parameter names split into voxel-network and coordinate-network groups."""
    names = [n for n, _ in model.named_parameters()]
    return {
        "voxel": [n for n in names if n.startswith("voxel_net.")],
        "coord": [n for n in names if n.startswith("coord_net.")],
    }


def save_checkpoint(path, model: JointModel, **extra) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hourglass": asdict(model.hourglass_config),
        "coordnet": asdict(model.coordnet_config),
        "seed": model.seed,
        "scheme_id": model.scheme_id,
        "provenance": asdict(model.provenance),
        "state_dict": model.state_dict(),
        "extra": extra,
    }
    tmp = f"{path}.tmp{os.getpid()}"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> JointModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint version {payload.get('version')} is not {CHECKPOINT_VERSION}"
        )
    model = JointModel(
        HourglassStackConfig(**payload["hourglass"]),
        CoordNetConfig(**payload["coordnet"]),
        seed=payload["seed"],
        scheme_id=payload.get("scheme_id"),
    )
    state = payload["state_dict"]
    dtype = next(v.dtype for v in state.values() if v.is_floating_point())
    if dtype == torch.float64:
        model.double()
    model.load_state_dict(state, strict=True)
    model.provenance = Provenance(**payload["provenance"])
    return model
