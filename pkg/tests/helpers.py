"""Shared toy models for driver and zoo tests."""

import torch
import torch.nn as nn

from advkit.zoo import EnsembleSpec, ModelHandle


class MeanLogitModel(nn.Module):
    """logits = [scale * (mean(x) - shift), 0]; class 0 weakens as mean drops."""

    def __init__(self, scale: float = 8.0, shift: float = 0.0):
        super().__init__()
        self.scale = scale
        self.shift = shift

    def forward(self, x):
        m = x.mean(dim=(1, 2, 3))
        return torch.stack([self.scale * (m - self.shift), torch.zeros_like(m)], dim=1)


class FixedLogitModel(nn.Module):
    """Returns the same logits row for every image."""

    def __init__(self, row):
        super().__init__()
        self.row = torch.as_tensor(row, dtype=torch.float32)

    def forward(self, x):
        return self.row.expand(x.shape[0], -1)


class LinearPixelModel(nn.Module):
    """logits = W @ flatten(x), a hand-settable linear classifier."""

    def __init__(self, weight):
        super().__init__()
        self.weight = torch.as_tensor(weight, dtype=torch.float32)

    def forward(self, x):
        return x.flatten(1) @ self.weight.t()


class TinyConvModel(nn.Module):
    """One conv and a linear head; cheap but genuinely nonlinear."""

    def __init__(self, num_classes: int = 4, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv = nn.Conv2d(3, 6, 3, padding=1)
        self.head = nn.Linear(6, num_classes)

    def forward(self, x):
        h = torch.relu(self.conv(x))
        return self.head(h.mean(dim=(2, 3)))


def handle(module, model_id="toy", num_classes=2, supports_gradients=True):
    return ModelHandle(model_id, module, num_classes, supports_gradients=supports_gradients)


def single_ensemble(module, **kw):
    return EnsembleSpec(members=[handle(module, **kw)])
