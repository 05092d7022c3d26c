"""Core value types and dataset I/O.

Images live in float tensors of shape (B, 3, H, W) with values in [0, 1].
On disk a dataset is a flat directory of lossless PNG files plus a CSV
manifest with header ``filename,label,id``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

MANIFEST_HEADER = ["filename", "label", "id"]


def _check_pixels(pixels: torch.Tensor) -> None:
    if pixels.ndim != 4 or pixels.shape[1] != 3:
        raise ValueError(f"expected pixels of shape (B, 3, H, W), got {tuple(pixels.shape)}")
    if pixels.shape[2] != pixels.shape[3]:
        raise ValueError(f"images must be square, got {pixels.shape[2]}x{pixels.shape[3]}")
    if pixels.numel() and not torch.isfinite(pixels).all():
        raise ValueError("pixel values must be finite")
    if pixels.numel() and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")


@dataclass(frozen=True)
class ImageBatch:
    """A batch of labeled square RGB images with stable string ids.

    Treated as immutable after construction; do not mutate the tensors.
    """

    pixels: torch.Tensor  # (B, 3, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (B,) int64
    ids: tuple[str, ...]

    def __post_init__(self):
        pixels = self.pixels.detach().float()
        labels = self.labels.detach().long().reshape(-1)
        _check_pixels(pixels)
        if labels.shape[0] != pixels.shape[0]:
            raise ValueError("labels length must match batch size")
        if len(self.ids) != pixels.shape[0]:
            raise ValueError("ids length must match batch size")
        if labels.numel() and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_size(self) -> int:
        return self.pixels.shape[2]

    def with_pixels(self, pixels: torch.Tensor) -> "ImageBatch":
        """Same labels/ids with replacement pixel data."""
        return ImageBatch(pixels=pixels, labels=self.labels, ids=self.ids)

    def select(self, indices) -> "ImageBatch":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageBatch(
            pixels=self.pixels[idx],
            labels=self.labels[idx],
            ids=tuple(self.ids[int(i)] for i in idx),
        )


@dataclass(frozen=True)
class Perturbation:
    """An L-inf bounded additive perturbation in the [0, 1] pixel scale."""

    delta: torch.Tensor  # (B, 3, H, W)
    epsilon: float

    def __post_init__(self):
        if self.delta.numel() and float(self.delta.abs().max()) > self.epsilon + 1e-6:
            raise ValueError("delta exceeds the epsilon budget")


@dataclass(frozen=True)
class AttackConfig:
    """All hyperparameters of one attack run, in the [0, 1] pixel scale.

    Published 0-255 values are stored divided by 255. ``step_schedule`` is an
    optional list of (step_size, rounds) phases; when set it overrides the
    flat ``step_size`` x ``iterations`` schedule.
    """

    epsilon: float = 8 / 255
    step_size: float = 0.8 / 255
    iterations: int = 10
    momentum_decay: float = 0.8
    di_probability: float = 0.7
    ti_kernel_size: int = 5
    refine_count: int = 9
    lpips_weight: float = 1.0
    mse_weight: float = 1.0
    validation_threshold: float = 0.01
    epsilon_set: tuple[float, ...] = tuple(e / 255 for e in (4, 6, 8, 12, 16, 32, 64))
    rotation_max: float = float(np.pi / 6)
    seed: int = 0
    step_schedule: tuple[tuple[float, int], ...] | None = None
    sobel_beta: float = 0.3
    vr_samples: int = 5
    vr_radius: float | None = None  # default 1.5 * step_size when None

    def __post_init__(self):
        eps_set = tuple(float(e) for e in self.epsilon_set)
        if any(e <= 0 for e in eps_set):
            raise ValueError("epsilon_set entries must be positive")
        if any(b <= a for a, b in zip(eps_set, eps_set[1:])):
            raise ValueError("epsilon_set must be strictly ascending")
        if self.ti_kernel_size % 2 != 1 or self.ti_kernel_size < 1:
            raise ValueError("ti_kernel_size must be odd and >= 1")
        if not 0.0 <= self.di_probability <= 1.0:
            raise ValueError("di_probability must be in [0, 1]")
        if self.momentum_decay < 0:
            raise ValueError("momentum_decay must be >= 0")
        if self.refine_count < 1:
            raise ValueError("refine_count must be >= 1")
        object.__setattr__(self, "epsilon_set", eps_set)

    @classmethod
    def tdmi_default(cls, **overrides) -> "AttackConfig":
        # mu=0.8, p=0.7, eta=0.01, 5x5 kernel are published; T and alpha are not,
        # so use the common 10-step schedule with alpha = eps / T.
        base = dict(epsilon=8 / 255, iterations=10, step_size=(8 / 255) / 10,
                    momentum_decay=0.8, di_probability=0.7, ti_kernel_size=5,
                    validation_threshold=0.01)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def perceptual_default(cls, **overrides) -> "AttackConfig":
        # 50 rounds: 0.36/255 for the first 45, 0.072/255 for the last 5.
        base = dict(epsilon=16 / 255, iterations=50,
                    step_schedule=((0.36 / 255, 45), (0.072 / 255, 5)),
                    step_size=0.36 / 255, momentum_decay=1.0, di_probability=0.7,
                    ti_kernel_size=5, lpips_weight=1.0, mse_weight=1.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def rdti_default(cls, **overrides) -> "AttackConfig":
        base = dict(epsilon=32 / 255, step_size=1 / 255, iterations=40,
                    di_probability=0.7, ti_kernel_size=5, refine_count=9,
                    momentum_decay=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def rotation_default(cls, **overrides) -> "AttackConfig":
        base = dict(epsilon=16 / 255, step_size=1 / 255, iterations=100,
                    momentum_decay=1.0, di_probability=1.0, ti_kernel_size=5,
                    rotation_max=float(np.pi / 6))
        base.update(overrides)
        return cls(**base)


def quantize_to_bytes(pixels: torch.Tensor) -> np.ndarray:
    """Map [0, 1] floats to uint8 with round-half-up (0.5 -> 128)."""
    arr = pixels.detach().cpu().numpy()
    return np.floor(arr * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def quantize_batch(batch: ImageBatch) -> ImageBatch:
    """The batch as it would read back after a save/load round trip."""
    q = torch.from_numpy(quantize_to_bytes(batch.pixels).astype(np.float32) / 255.0)
    return batch.with_pixels(q)


def save_images(batch: ImageBatch, root_path) -> str:
    """Write the batch as <id>.png files plus a manifest.csv; returns the manifest path.

    8-bit quantization is the only loss on a save/load round trip.
    """
    root = str(root_path)
    os.makedirs(root, exist_ok=True)
    manifest_path = os.path.join(root, "manifest.csv")
    data = quantize_to_bytes(batch.pixels)
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for i, image_id in enumerate(batch.ids):
            filename = f"{image_id}.png"
            img = Image.fromarray(data[i].transpose(1, 2, 0), mode="RGB")
            img.save(os.path.join(root, filename), format="PNG")
            writer.writerow([filename, int(batch.labels[i]), image_id])
    return manifest_path


def load_dataset(root_path, manifest, num_classes: int | None = None) -> ImageBatch:
    """Load the batch a manifest describes, in manifest order.

    A missing file or an out-of-range label is a fatal error naming the row.
    """
    root = str(root_path)
    rows = []
    with open(str(manifest), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for row in reader:
            if len(row) != 3:
                raise ValueError(f"malformed manifest row: {row!r}")
            rows.append((row[0], int(row[1]), row[2]))

    pixels = []
    labels = []
    ids = []
    for filename, label, image_id in rows:
        path = os.path.join(root, filename)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"dataset image missing: {path}")
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ValueError(f"label {label} out of range for image {filename}")
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        pixels.append(torch.from_numpy(arr.transpose(2, 0, 1)))
        labels.append(label)
        ids.append(image_id)

    if not rows:
        side = 32
        return ImageBatch(
            pixels=torch.zeros((0, 3, side, side)),
            labels=torch.zeros((0,), dtype=torch.long),
            ids=(),
        )
    return ImageBatch(
        pixels=torch.stack(pixels),
        labels=torch.tensor(labels, dtype=torch.long),
        ids=tuple(ids),
    )
