"""Desk-scale model zoo: classifiers, ensembles, the preprocessing defense,
and the feature extractors backing FID and LPIPS.

The zoo is regenerated deterministically from a seed by ``train_zoo`` and
persisted as weight files with a sha256 manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from advkit.data import ImageBatch
from advkit.synthdata import NUM_CLASSES, synth_batch

TRAIN_IDS = ("train0", "train1", "train2")
VALIDATION_IDS = ("val0",)
TARGET_ID = "target"
FID_ID = "fidnet"
LPIPS_ID = "lpipsnet"


class GapNet(nn.Module):
    """Three conv blocks, 2x2 average pooling, linear head."""

    def __init__(self, width: int, num_classes: int):
        super().__init__()
        w = width
        self.conv1 = nn.Conv2d(3, w, 3, padding=1)
        self.conv2 = nn.Conv2d(w, 2 * w, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * w, 4 * w, 3, padding=1)
        self.head = nn.Linear(4 * w * 4, num_classes)

    def features(self, x):
        x = F.relu(self.conv1(x))
        x = F.max_pool2d(x, 2)
        x = F.relu(self.conv2(x))
        x = F.max_pool2d(x, 2)
        x = F.relu(self.conv3(x))
        return F.adaptive_avg_pool2d(x, 2).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


class WideKernelNet(nn.Module):
    """Two 5x5 conv blocks and a fully connected head."""

    def __init__(self, width: int, num_classes: int):
        super().__init__()
        w = width
        self.conv1 = nn.Conv2d(3, w, 5, padding=2)
        self.conv2 = nn.Conv2d(w, 2 * w, 5, padding=2)
        self.fc1 = nn.Linear(2 * w * 16, 64)
        self.head = nn.Linear(64, num_classes)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.max_pool2d(x, 2)
        x = F.relu(self.conv2(x))
        x = F.adaptive_avg_pool2d(x, 4).flatten(1)
        x = F.relu(self.fc1(x))
        return self.head(x)


class StridedNet(nn.Module):
    """Four strided 3x3 convs, 2x2 average pooling."""

    def __init__(self, width: int, num_classes: int):
        super().__init__()
        w = width
        self.conv1 = nn.Conv2d(3, w, 3, padding=1)
        self.conv2 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(w, 2 * w, 3, padding=1)
        self.conv4 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.head = nn.Linear(2 * w * 4, num_classes)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        x = F.relu(self.conv4(x))
        x = F.adaptive_avg_pool2d(x, 2).flatten(1)
        return self.head(x)


class TapNet(nn.Module):
    """Classifier with three conv stages exposed as perceptual feature taps."""

    def __init__(self, width: int, num_classes: int):
        super().__init__()
        w = width
        self.stage1 = nn.Sequential(nn.Conv2d(3, w, 3, padding=1), nn.ReLU())
        self.stage2 = nn.Sequential(nn.MaxPool2d(2), nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU())
        self.stage3 = nn.Sequential(nn.MaxPool2d(2), nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.ReLU())
        self.head = nn.Linear(4 * w * 4, num_classes)

    def taps(self, x):
        t1 = self.stage1(x)
        t2 = self.stage2(t1)
        t3 = self.stage3(t2)
        return [t1, t2, t3]

    def forward(self, x):
        t3 = self.taps(x)[-1]
        return self.head(F.adaptive_avg_pool2d(t3, 2).flatten(1))


ARCHS = {
    "gap": GapNet,
    "wide": WideKernelNet,
    "strided": StridedNet,
    "tap": TapNet,
}

# model_id -> (arch, width, training seed offset)
ZOO_LAYOUT = {
    "train0": ("gap", 16, 1),
    "train1": ("wide", 12, 2),
    "train2": ("strided", 16, 3),
    "val0": ("gap", 24, 4),
    "target": ("wide", 20, 5),
    "fidnet": ("gap", 16, 6),
    "lpipsnet": ("tap", 12, 7),
}


class ModelHandle:
    """A fixed differentiable classifier; forward passes are counted so tests
    can assert the black-box target is never queried during an attack."""

    def __init__(self, model_id: str, module: nn.Module, num_classes: int,
                 supports_gradients: bool = True):
        self.id = model_id
        self.module = module.eval()
        self.num_classes = num_classes
        self.supports_gradients = supports_gradients
        self.forward_calls = 0
        for p in self.module.parameters():
            p.requires_grad_(False)

    def logits(self, pixels: torch.Tensor) -> torch.Tensor:
        self.forward_calls += 1
        return self.module(pixels)

    def forward(self, batch: ImageBatch) -> torch.Tensor:
        return self.logits(batch.pixels)

    def predict(self, batch: ImageBatch) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(batch).argmax(dim=1)


@dataclass
class EnsembleSpec:
    """Logit-fused set of models; weights default to equal and sum to 1."""

    members: list
    weights: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if not self.weights:
            self.weights = [1.0 / len(self.members)] * len(self.members)
        if len(self.weights) != len(self.members):
            raise ValueError("weights length must match members")
        if abs(sum(self.weights) - 1.0) > 1e-6:
            raise ValueError("weights must sum to 1")
        classes = {m.num_classes for m in self.members}
        if len(classes) != 1:
            raise ValueError("ensemble members must share num_classes")

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes


def ensemble_logits_pixels(spec: EnsembleSpec, pixels: torch.Tensor) -> torch.Tensor:
    out = None
    for handle, weight in zip(spec.members, spec.weights):
        term = weight * handle.logits(pixels)
        out = term if out is None else out + term
    return out


def ensemble_logits(spec: EnsembleSpec, batch: ImageBatch) -> torch.Tensor:
    """Weighted sum of member logits."""
    return ensemble_logits_pixels(spec, batch.pixels)


@dataclass(frozen=True)
class DefenseConfig:
    """Reflect padding + gaussian blur + center crop applied before the target model."""

    pad_pixels: int = 4
    blur_sigma: float = 0.5
    blur_kernel: int = 3
    crop: int = 32

    def __post_init__(self):
        if self.blur_kernel % 2 != 1:
            raise ValueError("blur_kernel must be odd")
        if self.pad_pixels < 0:
            raise ValueError("pad_pixels must be >= 0")


def gaussian_blur_kernel(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    k = torch.outer(g, g)
    return (k / k.sum()).to(dtype)


def apply_defense(cfg: DefenseConfig, batch: ImageBatch) -> ImageBatch:
    """Deterministic preprocessing defense; output stays in [0, 1]."""
    x = batch.pixels
    if cfg.pad_pixels > 0:
        x = F.pad(x, [cfg.pad_pixels] * 4, mode="reflect")
    if cfg.blur_sigma > 0 and cfg.blur_kernel > 1:
        k2 = gaussian_blur_kernel(cfg.blur_kernel, cfg.blur_sigma, x.dtype)
        weight = k2.expand(x.shape[1], 1, -1, -1)
        pad = cfg.blur_kernel // 2
        x = F.conv2d(F.pad(x, [pad] * 4, mode="reflect"), weight, groups=x.shape[1])
    size = x.shape[-1]
    if cfg.crop > size:
        raise ValueError("crop larger than padded size")
    off = (size - cfg.crop) // 2
    x = x[:, :, off : off + cfg.crop, off : off + cfg.crop]
    return batch.with_pixels(x.clamp(0.0, 1.0))


def true_class_probability(model: ModelHandle, batch: ImageBatch, labels=None) -> torch.Tensor:
    """Softmax probability of the true class, per image."""
    if labels is None:
        labels = batch.labels
    with torch.no_grad():
        probs = F.softmax(model.forward(batch), dim=1)
    return probs[torch.arange(len(batch)), labels]


class FeatureExtractor:
    """Fixed network exposing intermediate activations at named taps."""

    def __init__(self, extractor_id: str, module: nn.Module, layer_taps: list[str]):
        self.id = extractor_id
        self.module = module.eval()
        self.layer_taps = layer_taps
        for p in self.module.parameters():
            p.requires_grad_(False)

    def forward_features(self, batch: ImageBatch) -> list[torch.Tensor]:
        return self.forward_features_pixels(batch.pixels)

    def forward_features_pixels(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        if isinstance(self.module, TapNet):
            return self.module.taps(pixels)
        # pooled penultimate features as a single (B, D, 1, 1) tap
        feats = self.module.features(pixels)
        return [feats.unsqueeze(-1).unsqueeze(-1)]


def fid_features(extractor: FeatureExtractor, batch: ImageBatch) -> torch.Tensor:
    """Per-image pooled feature rows (B, D) for Frechet-distance scoring."""
    with torch.no_grad():
        taps = extractor.forward_features(batch)
    if len(taps) != 1:
        raise ValueError("FID extractor must expose a single pooled tap")
    return taps[0].flatten(1)


def _build(arch: str, width: int, num_classes: int) -> nn.Module:
    return ARCHS[arch](width, num_classes)


def _train_one(module: nn.Module, data: ImageBatch, seed: int,
               epochs: int, batch_size: int, lr: float) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    module.train()
    n = len(data)
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits = module(data.pixels[idx])
            loss = F.cross_entropy(logits, data.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def train_zoo(out_dir, seed: int = 0, image_size: int = 32,
              num_classes: int = NUM_CLASSES, n_train: int = 4096,
              epochs: int = 6, batch_size: int = 128, lr: float = 2e-3) -> dict:
    """Train every zoo network deterministically and write weights + manifest.

    Returns the manifest dict (also written as zoo.json).
    """
    out = str(out_dir)
    os.makedirs(out, exist_ok=True)
    data = synth_batch(n_train, image_size, seed=seed * 1000 + 17, id_prefix="train")
    entries = []
    for model_id, (arch, width, offset) in ZOO_LAYOUT.items():
        torch.manual_seed(seed * 100 + offset)
        module = _build(arch, width, num_classes)
        _train_one(module, data, seed=seed * 100 + offset, epochs=epochs,
                   batch_size=batch_size, lr=lr)
        filename = f"{model_id}.pt"
        path = os.path.join(out, filename)
        torch.save(module.state_dict(), path)
        entries.append({
            "model_id": model_id,
            "file": filename,
            "sha256": _sha256(path),
            "arch": arch,
            "width": width,
        })
    manifest = {
        "seed": seed,
        "image_size": image_size,
        "num_classes": num_classes,
        "n_train": n_train,
        "epochs": epochs,
        "batch_size": batch_size,
        "lr": lr,
        "train_ids": list(TRAIN_IDS),
        "validation_ids": list(VALIDATION_IDS),
        "target_id": TARGET_ID,
        "models": entries,
    }
    with open(os.path.join(out, "zoo.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


@dataclass
class Zoo:
    models: dict
    fid_extractor: FeatureExtractor
    lpips_extractor: FeatureExtractor
    defense: DefenseConfig
    meta: dict

    @property
    def train_models(self) -> list:
        return [self.models[i] for i in self.meta["train_ids"]]

    @property
    def validation_models(self) -> list:
        return [self.models[i] for i in self.meta["validation_ids"]]

    @property
    def target(self) -> ModelHandle:
        return self.models[self.meta["target_id"]]

    def ensemble(self, ids) -> EnsembleSpec:
        return EnsembleSpec(members=[self.models[i] for i in ids])


def load_zoo(zoo_dir, verify_checksums: bool = True) -> Zoo:
    """Load all zoo networks from a directory written by train_zoo."""
    root = str(zoo_dir)
    with open(os.path.join(root, "zoo.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    num_classes = meta["num_classes"]
    handles = {}
    extractors = {}
    for entry in meta["models"]:
        path = os.path.join(root, entry["file"])
        if verify_checksums and _sha256(path) != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {entry['file']}")
        module = _build(entry["arch"], entry["width"], num_classes)
        module.load_state_dict(torch.load(path, weights_only=True))
        model_id = entry["model_id"]
        if model_id == FID_ID:
            extractors[model_id] = FeatureExtractor(model_id, module, ["gap"])
        elif model_id == LPIPS_ID:
            extractors[model_id] = FeatureExtractor(model_id, module, ["stage1", "stage2", "stage3"])
        else:
            handles[model_id] = ModelHandle(model_id, module, num_classes)
    defense = DefenseConfig(crop=meta["image_size"])
    return Zoo(models=handles, fid_extractor=extractors[FID_ID],
               lpips_extractor=extractors[LPIPS_ID], defense=defense, meta=meta)
