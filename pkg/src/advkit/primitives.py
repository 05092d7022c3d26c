"""Reusable attack building blocks.

Everything here is a pure function of (inputs, seed). Randomized transforms
draw per-image randomness from generators keyed on (seed, image id), so
results do not depend on how a batch is sharded.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from advkit.data import ImageBatch

L1_GUARD = 1e-12

# 3x3 Sobel pair; replicate padding so a constant image has zero edge response.
_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (unlike builtin hash)."""
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "big") & ((1 << 63) - 1)


def _image_generator(seed: int, image_id: str, tag: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, tag, image_id))
    return gen


@dataclass(frozen=True)
class TiKernel:
    """Normalized smoothing kernel for gradient translation-invariance."""

    weights: torch.Tensor  # (k, k), nonnegative, sums to 1

    def __post_init__(self):
        k = self.weights.shape[0]
        if self.weights.ndim != 2 or self.weights.shape[1] != k:
            raise ValueError("kernel must be square")
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class MomentumState:
    """Accumulated gradient direction; m starts at zero."""

    m: torch.Tensor
    t: int = 0

    @classmethod
    def zeros(cls, shape, dtype=torch.float32) -> "MomentumState":
        return cls(m=torch.zeros(shape, dtype=dtype), t=0)


def make_ti_kernel(size: int, dtype=torch.float32) -> TiKernel:
    """Gaussian-shaped kernel of odd ``size`` with sigma = size / 3, normalized."""
    if size % 2 != 1 or size < 1:
        raise ValueError("kernel size must be odd and >= 1")
    if size == 1:
        return TiKernel(weights=torch.ones((1, 1), dtype=dtype))
    sigma = size / 3.0
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g1 = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = torch.outer(g1, g1)
    kernel = kernel / kernel.sum()
    return TiKernel(weights=kernel.to(dtype))


def ti_smooth(kernel: TiKernel, grad: torch.Tensor) -> torch.Tensor:
    """Depthwise same-size convolution of the gradient with the kernel (zero padding)."""
    channels = grad.shape[1]
    weight = kernel.weights.to(grad.dtype).expand(channels, 1, -1, -1)
    return F.conv2d(grad, weight, padding=kernel.size // 2, groups=channels)


def _resize_pad_single(img: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random downscale into [ceil(0.9 H), H] then zero-pad back at a random offset."""
    h = img.shape[-1]
    low = math.ceil(0.9 * h)
    r = int(torch.randint(low, h + 1, (1,), generator=gen))
    if r == h:
        return img
    resized = F.interpolate(img.unsqueeze(0), size=(r, r), mode="bilinear", align_corners=False)[0]
    top = int(torch.randint(0, h - r + 1, (1,), generator=gen))
    left = int(torch.randint(0, h - r + 1, (1,), generator=gen))
    out = torch.zeros_like(img)
    out[:, top : top + r, left : left + r] = resized
    return out


def di_transform(batch: ImageBatch, p: float, seed: int) -> ImageBatch:
    """Diverse-input transform: per image, with probability p, random resize + pad."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    out = batch.pixels.clone()
    for i, image_id in enumerate(batch.ids):
        gen = _image_generator(seed, image_id, "di")
        coin = float(torch.rand(1, generator=gen))
        if coin < p:
            out[i] = _resize_pad_single(batch.pixels[i], gen)
    return batch.with_pixels(out.clamp(0.0, 1.0))


def rotate_images(pixels: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate each image about its center by its angle (radians), bilinear, zeros outside.

    Positive angles turn the displayed content counterclockwise. Sampling is
    grid-aligned (align_corners) so multiples of pi/2 are exact permutations.
    """
    b = pixels.shape[0]
    cos = torch.cos(angles).to(pixels.dtype)
    sin = torch.sin(angles).to(pixels.dtype)
    theta = torch.zeros((b, 2, 3), dtype=pixels.dtype)
    theta[:, 0, 0] = cos
    theta[:, 0, 1] = -sin
    theta[:, 1, 0] = sin
    theta[:, 1, 1] = cos
    grid = F.affine_grid(theta, list(pixels.shape), align_corners=True)
    return F.grid_sample(pixels, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def rotation_transform(batch: ImageBatch, max_angle: float, seed: int,
                       resize_probability: float = 1.0) -> ImageBatch:
    """Random resize/pad (with the given probability) followed by a uniform
    rotation in [-max_angle, max_angle]."""
    if max_angle < 0:
        raise ValueError("max_angle must be >= 0")
    if not 0.0 <= resize_probability <= 1.0:
        raise ValueError("resize_probability must be in [0, 1]")
    out = batch.pixels.clone()
    angles = torch.zeros(len(batch), dtype=torch.float64)
    for i, image_id in enumerate(batch.ids):
        gen = _image_generator(seed, image_id, "rot")
        coin = float(torch.rand(1, generator=gen))
        if coin < resize_probability:
            out[i] = _resize_pad_single(batch.pixels[i], gen)
        if max_angle > 0:
            angles[i] = (float(torch.rand(1, generator=gen)) * 2.0 - 1.0) * max_angle
    if max_angle > 0:
        out = rotate_images(out, angles)
    return batch.with_pixels(out.clamp(0.0, 1.0))


def momentum_update(state: MomentumState, grad: torch.Tensor, mu: float) -> MomentumState:
    """m_{t+1} = mu * m_t + grad / max(per-image L1 norm, guard)."""
    norm = grad.abs().sum(dim=(1, 2, 3), keepdim=True).clamp_min(L1_GUARD)
    return MomentumState(m=mu * state.m + grad / norm, t=state.t + 1)


def project_linf(x_adv: torch.Tensor, x_orig: torch.Tensor, eps: float) -> torch.Tensor:
    """Clamp x_adv into the eps-ball around x_orig intersected with [0, 1]."""
    out = torch.maximum(x_adv, x_orig - eps)
    out = torch.minimum(out, x_orig + eps)
    return out.clamp(0.0, 1.0)


def sobel_edge_mask(batch: ImageBatch, beta: float) -> torch.Tensor:
    """Per-pixel multiplier in [1 - beta, 1] that damps perturbation on strong edges.

    Edge strength is the Sobel gradient magnitude of the channel-mean image,
    normalized per image to [0, 1].
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be in [0, 1]")
    gray = batch.pixels.mean(dim=1, keepdim=True)
    padded = F.pad(gray, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, _SOBEL_X.to(gray.dtype).view(1, 1, 3, 3))
    gy = F.conv2d(padded, _SOBEL_Y.to(gray.dtype).view(1, 1, 3, 3))
    mag = torch.sqrt(gx**2 + gy**2)
    peak = mag.amax(dim=(1, 2, 3), keepdim=True).clamp_min(L1_GUARD)
    return 1.0 - beta * (mag / peak)


def refined_gradient(
    model_loss_grad: Callable[[ImageBatch], torch.Tensor],
    batch: ImageBatch,
    n: int,
    p: float,
    kernel: TiKernel,
    seed: int,
    sample_seeds: Sequence[int] | None = None,
) -> torch.Tensor:
    """Average the TI-smoothed loss gradient over n independent input transforms."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if sample_seeds is None:
        sample_seeds = [derive_seed(seed, "refine", k) for k in range(n)]
    elif len(sample_seeds) != n:
        raise ValueError("sample_seeds must have length n")
    total = None
    for sub_seed in sample_seeds:
        grad = ti_smooth(kernel, model_loss_grad(di_transform(batch, p, sub_seed)))
        total = grad if total is None else total + grad
    return total / n


def variance_reduced_gradient(
    model_loss_grad: Callable[[ImageBatch], torch.Tensor],
    batch: ImageBatch,
    samples: int,
    radius: float,
    seed: int,
) -> torch.Tensor:
    """Average the loss gradient over uniform L-inf neighborhood samples.

    Neighbor samples are clamped to [0, 1] so every model input is a valid
    image; samples=1 with radius=0 is the plain gradient.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0.0:
        return model_loss_grad(batch)
    total = None
    for k in range(samples):
        noise = torch.empty_like(batch.pixels)
        for i, image_id in enumerate(batch.ids):
            gen = _image_generator(seed, image_id, f"vr{k}")
            noise[i] = (torch.rand(batch.pixels.shape[1:], generator=gen) * 2.0 - 1.0) * radius
        noisy = batch.with_pixels((batch.pixels + noise).clamp(0.0, 1.0))
        grad = model_loss_grad(noisy)
        total = grad if total is None else total + grad
    return total / samples
