"""Procedural 10-class shape dataset used to train and evaluate the desk-scale zoo.

Each class is a distinct geometric pattern rendered with random colors,
position/scale jitter, and pixel noise. Classes are easily separable, so the
small zoo classifiers reach high accuracy after a few epochs.
"""

from __future__ import annotations

import numpy as np
import torch

from advkit.data import ImageBatch
from advkit.primitives import derive_seed

NUM_CLASSES = 10

CLASS_NAMES = (
    "disc", "square", "triangle", "plus", "h_stripes",
    "v_stripes", "d_stripes", "ring", "checker", "x_cross",
)


def _palette(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # dark background, bright foreground; hues vary freely
    bg = rng.uniform(0.0, 0.35, size=3)
    fg = rng.uniform(0.6, 1.0, size=3)
    return bg, fg


def _shape_mask(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-0.15, 0.15) * size
    cy = size / 2 + rng.uniform(-0.15, 0.15) * size
    radius = rng.uniform(0.22, 0.38) * size
    dx, dy = xx - cx, yy - cy
    r = np.sqrt(dx**2 + dy**2)
    period = rng.integers(3, 7)
    width = max(1.5, 0.3 * radius)

    if label == 0:  # disc
        return r <= radius
    if label == 1:  # square
        return np.maximum(np.abs(dx), np.abs(dy)) <= radius * 0.85
    if label == 2:  # triangle, apex up
        return (dy >= -radius) & (dy <= radius * 0.7) & (np.abs(dx) <= 0.6 * (dy + radius))
    if label == 3:  # plus
        box = np.maximum(np.abs(dx), np.abs(dy)) <= radius
        return box & ((np.abs(dx) <= width) | (np.abs(dy) <= width))
    if label == 4:  # horizontal stripes
        return (yy // period) % 2 == 0
    if label == 5:  # vertical stripes
        return (xx // period) % 2 == 0
    if label == 6:  # diagonal stripes
        return ((xx + yy) // period) % 2 == 0
    if label == 7:  # ring
        return (r <= radius) & (r >= radius * 0.55)
    if label == 8:  # checkerboard
        return ((xx // period) % 2 == 0) ^ ((yy // period) % 2 == 0)
    if label == 9:  # diagonal cross
        box = np.maximum(np.abs(dx), np.abs(dy)) <= radius
        return box & ((np.abs(dx - dy) <= width * 1.4) | (np.abs(dx + dy) <= width * 1.4))
    raise ValueError(f"unknown label {label}")


def render_image(label: int, size: int, seed: int) -> np.ndarray:
    """One (3, size, size) float image in [0, 1] for the given class."""
    rng = np.random.default_rng(seed)
    bg, fg = _palette(rng)
    mask = _shape_mask(rng, label, size)
    img = np.where(mask[None, :, :], fg[:, None, None], bg[:, None, None])
    noise_sigma = rng.uniform(0.02, 0.05)
    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_batch(n: int, size: int, seed: int, id_prefix: str = "img") -> ImageBatch:
    """Deterministic batch of n images cycling through the classes."""
    pixels = np.zeros((n, 3, size, size), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    ids = []
    for i in range(n):
        label = i % NUM_CLASSES
        pixels[i] = render_image(label, size, derive_seed(seed, "synth", i))
        labels[i] = label
        ids.append(f"{id_prefix}{i:05d}")
    return ImageBatch(
        pixels=torch.from_numpy(pixels),
        labels=torch.from_numpy(labels),
        ids=tuple(ids),
    )
