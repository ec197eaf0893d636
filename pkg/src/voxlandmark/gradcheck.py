"""Central finite-difference check of back-propagated gradients.

ReLU, leaky ReLU and max pooling make the loss piecewise smooth. A central
difference whose interval straddles a kink does not estimate the gradient, so
the difference is taken on the smooth piece that contains the base point: the
activation masks and pooling winners seen at the base point are replayed while
the loss is evaluated at ``theta +/- h v``. The number of units that would have
switched is reported alongside each check.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class GroupCheck:
    name: str
    analytic: float
    numeric: float
    crossings: int

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0 else abs(self.analytic - self.numeric) / scale


class FrozenKinks:
    """Record activation patterns on one forward pass and replay them on later ones."""

    def __init__(self, model: nn.Module):
        self.patterns: dict[nn.Module, torch.Tensor] = {}
        self.recording = True
        self.crossings = 0
        self._handles = []
        for mod in model.modules():
            if isinstance(mod, (nn.ReLU, nn.LeakyReLU)):
                self._handles.append(mod.register_forward_hook(self._activation))
            elif isinstance(mod, nn.MaxPool2d):
                if mod.padding != 0 or mod.dilation != 1:
                    raise NotImplementedError("only plain max pooling is supported")
                self._handles.append(mod.register_forward_hook(self._pool))

    def close(self):
        for h in self._handles:
            h.remove()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _activation(self, mod, inputs, output):
        x = inputs[0]
        if self.recording:
            self.patterns[mod] = x > 0
            return None
        mask = self.patterns[mod]
        self.crossings += int(((x > 0) != mask).sum())
        slope = mod.negative_slope if isinstance(mod, nn.LeakyReLU) else 0.0
        return torch.where(mask, x, slope * x)

    def _pool(self, mod, inputs, output):
        x = inputs[0]
        _, idx = F.max_pool2d(x, mod.kernel_size, mod.stride, return_indices=True)
        if self.recording:
            self.patterns[mod] = idx
            return None
        ref = self.patterns[mod]
        self.crossings += int((idx != ref).sum())
        return x.flatten(2).gather(2, ref.flatten(2)).view_as(ref)


def layer_groups(model: nn.Module) -> dict[str, list[nn.Parameter]]:
    """Parameters grouped by the layer that owns them (weight and bias together)."""
    groups = {}
    for name, mod in model.named_modules():
        params = list(mod.parameters(recurse=False))
        if params:
            groups[name] = params
    return groups


def check_gradients(
    model: nn.Module,
    loss_terms: Callable[[], list[torch.Tensor]],
    h: float = 1e-5,
    seed: int = 0,
    groups: dict[str, list[nn.Parameter]] | None = None,
) -> list[GroupCheck]:
    """Compare autograd with central differences along a random unit direction per group.

    ``loss_terms`` returns the weighted terms whose sum is the loss. Each term
    is differenced on its own before summing, so a large term that does not
    depend on a group cannot swamp the resolution of a small one that does.
    Run with the model in double precision. Parameters and batch-norm running
    statistics are restored exactly afterwards.
    """
    groups = groups if groups is not None else layer_groups(model)
    saved = {k: v.clone() for k, v in model.state_dict().items()}
    rng = np.random.default_rng(seed)

    with FrozenKinks(model) as kinks:
        model.zero_grad(set_to_none=True)
        sum(loss_terms()).backward()
        kinks.recording = False

        results = []
        for name, params in groups.items():
            direction = [torch.as_tensor(rng.standard_normal(p.shape), dtype=p.dtype) for p in params]
            norm = torch.sqrt(sum((d * d).sum() for d in direction))
            direction = [d / norm for d in direction]
            analytic = float(sum(
                (p.grad * d).sum() for p, d in zip(params, direction) if p.grad is not None
            ))
            kinks.crossings = 0
            with torch.no_grad():
                for p, d in zip(params, direction):
                    p.add_(h * d)
                plus = [float(t) for t in loss_terms()]
                for p, d in zip(params, direction):
                    p.sub_(2 * h * d)
                minus = [float(t) for t in loss_terms()]
                for p, d in zip(params, direction):
                    p.add_(h * d)
            numeric = sum((a - b) / (2 * h) for a, b in zip(plus, minus))
            results.append(GroupCheck(name, analytic, numeric, kinks.crossings))

    model.load_state_dict(saved)
    return results
