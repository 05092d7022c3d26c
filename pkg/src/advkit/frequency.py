"""Frequency-domain attack: optimize a channel-shared weight map over Fourier
coefficients so the reconstructed image fools the classifier.

The map is per image, initialized to ones (identity reconstruction), and
updated by plain gradient descent on a logit-margin loss with a per-bin
learning rate that grows with distance from the DC bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from advkit.data import ImageBatch
from advkit.zoo import EnsembleSpec, ensemble_logits_pixels


@dataclass(frozen=True)
class AttentionMap:
    """Real weight field over frequency bins, shared across color channels."""

    w: torch.Tensor  # (1, M, N)

    def __post_init__(self):
        if self.w.ndim != 3 or self.w.shape[0] != 1:
            raise ValueError("attention map must have shape (1, M, N)")

    @classmethod
    def ones(cls, m: int, n: int, dtype=torch.float32) -> "AttentionMap":
        return cls(w=torch.ones((1, m, n), dtype=dtype))


@dataclass(frozen=True)
class FrequencyLrField:
    """Per-bin learning rates, radially non-decreasing away from DC."""

    lr: torch.Tensor  # (M, N), values in [lr_min, lr_max]
    lr_min: float
    lr_max: float

    def __post_init__(self):
        if self.lr.ndim != 2:
            raise ValueError("lr field must be 2-D")
        if self.lr_min <= 0 or self.lr_max <= self.lr_min:
            raise ValueError("need 0 < lr_min < lr_max")


def centered_bin_distance(m: int, n: int, dtype=torch.float64) -> torch.Tensor:
    """Distance of each bin from the zero-frequency bin, centered-spectrum sense."""
    fu = torch.arange(m, dtype=dtype)
    fu = torch.where(fu <= m // 2, fu, fu - m)
    fv = torch.arange(n, dtype=dtype)
    fv = torch.where(fv <= n // 2, fv, fv - n)
    return torch.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2)


def make_lr_field(m: int, n: int, sigma: float | None = None,
                  lr_min: float = 0.01, lr_max: float = 0.2) -> FrequencyLrField:
    """lr(u,v) = lr_min + (lr_max - lr_min) * (1 - G_sigma(r) / G_sigma(0))."""
    if sigma is None:
        sigma = min(m, n) / 4.0
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    r = centered_bin_distance(m, n)
    g = torch.exp(-(r**2) / (2.0 * sigma**2))  # G(0) = 1
    lr = lr_min + (lr_max - lr_min) * (1.0 - g)
    return FrequencyLrField(lr=lr.to(torch.float32), lr_min=lr_min, lr_max=lr_max)


def forward_fft(batch: ImageBatch) -> torch.Tensor:
    """Unnormalized 2-D DFT per channel; the inverse carries the 1/MN factor.

    Computed in double precision so spectra and reconstructions round-trip
    well below the metric tolerances.
    """
    return torch.fft.fft2(batch.pixels.double(), norm="backward")


def weighted_reconstruct(freq: torch.Tensor, w: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """Real part of the inverse DFT of the weighted spectrum; differentiable in w.

    ``w`` broadcasts against the (B, C, M, N) spectrum, so shapes (1, M, N)
    and (B, 1, M, N) both apply one map across all channels.
    """
    out = torch.fft.ifft2(w * freq, norm="backward").real
    return out.clamp(0.0, 1.0) if clamp else out


def reconstruct(batch: ImageBatch, attention) -> ImageBatch:
    """Inverse transform of the weighted coefficients, clamped to [0, 1]."""
    w = attention.w if isinstance(attention, AttentionMap) else attention
    pixels = weighted_reconstruct(forward_fft(batch), w.to(batch.pixels.dtype))
    return batch.with_pixels(pixels)


def cw_loss(logits: torch.Tensor, labels: torch.Tensor, kappa: float = 0.0) -> torch.Tensor:
    """Per-image margin max(z_y - max_{k != y} z_k, -kappa); minimize to misclassify."""
    true_logit = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, labels.view(-1, 1), float("-inf"))
    runner_up = masked.amax(dim=1)
    return torch.clamp(true_logit - runner_up, min=-kappa)


def frequency_attack(batch: ImageBatch, ensemble: EnsembleSpec,
                     lr_field: FrequencyLrField, steps: int) -> ImageBatch:
    """Optimize the per-image attention map and return the reconstruction.

    Pixels are never modified directly; only the frequency weights move. Per
    image the margin loss clamps at zero once misclassified, so already
    successful images stop changing.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    b, _, m, n = batch.pixels.shape
    if lr_field.lr.shape != (m, n):
        raise ValueError("lr field shape must match the image size")
    freq = forward_fft(batch)
    w = torch.ones((b, 1, m, n), dtype=batch.pixels.dtype, requires_grad=True)
    lr = lr_field.lr.to(batch.pixels.dtype)
    for _ in range(steps):
        pixels = weighted_reconstruct(freq, w)
        logits = ensemble_logits_pixels(ensemble, pixels)
        loss = cw_loss(logits, batch.labels).sum()
        (grad,) = torch.autograd.grad(loss, w)
        with torch.no_grad():
            w -= lr * grad
    return reconstruct(batch, w.detach())
