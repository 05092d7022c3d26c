"""End-to-end run orchestration: fixture preparation, attack dispatch,
scoring against the held-out target, and artifact/report emission.

A run is described by one flat YAML config; its semantic fields are hashed
so artifacts can be traced to the exact configuration, and re-running the
same hash reproduces bitwise-identical adversarial images.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import torch
import yaml

from advkit.annotations import write_task_store
from advkit.data import AttackConfig, ImageBatch, load_dataset, quantize_batch, save_images
from advkit.drivers import (
    epsilon_search_attack,
    perceptual_attack,
    rdti_attack,
    rotation_ensemble_attack,
    tdmi_attack,
)
from advkit.frequency import frequency_attack, make_lr_field
from advkit.scoring import ScoreReport, score_batches
from advkit.synthdata import synth_batch
from advkit.zoo import Zoo, apply_defense, load_zoo

METHODS = ("tdmi", "eps-search", "perceptual", "rdti", "rotation", "frequency")

ATTACK_FIELD_NAMES = tuple(f.name for f in dataclasses.fields(AttackConfig))


@dataclass(frozen=True)
class RunConfig:
    """One attack-and-score run; attack hyperparameters ride along inside."""

    method: str
    attack: AttackConfig
    zoo_dir: str
    out_dir: str
    train_ids: tuple[str, ...] = ("train0", "train1", "train2")
    validation_ids: tuple[str, ...] = ("val0",)
    target_id: str = "target"
    data_dir: str | None = None  # dataset dir with manifest.csv; None = synth fixture
    n_images: int = 50
    image_size: int = 32
    fixture_seed: int = 4242
    frequency_steps: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.target_id in set(self.train_ids) | set(self.validation_ids):
            raise ValueError("target model must not appear among surrogates")

    def semantic_dict(self) -> dict:
        """Everything that determines run outputs; excludes output location."""
        d = {
            "method": self.method,
            "train_ids": list(self.train_ids),
            "validation_ids": list(self.validation_ids),
            "target_id": self.target_id,
            "data_dir": self.data_dir,
            "n_images": self.n_images,
            "image_size": self.image_size,
            "fixture_seed": self.fixture_seed,
            "frequency_steps": self.frequency_steps,
        }
        atk = dataclasses.asdict(self.attack)
        atk["epsilon_set"] = list(atk["epsilon_set"])
        if atk["step_schedule"] is not None:
            atk["step_schedule"] = [list(p) for p in atk["step_schedule"]]
        d["attack"] = atk
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.semantic_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_yaml(cls, path, out_dir: str | None = None,
                  data_dir: str | None = None, zoo_dir: str | None = None) -> "RunConfig":
        with open(str(path), encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        attack_kwargs = {}
        for name in ATTACK_FIELD_NAMES:
            if name in raw:
                value = raw.pop(name)
                if name == "epsilon_set":
                    value = tuple(value)
                if name == "step_schedule" and value is not None:
                    value = tuple((float(s), int(r)) for s, r in value)
                attack_kwargs[name] = value
        method = raw.pop("method", "tdmi")
        presets = {
            "tdmi": AttackConfig.tdmi_default,
            "eps-search": AttackConfig.tdmi_default,
            "perceptual": AttackConfig.perceptual_default,
            "rdti": AttackConfig.rdti_default,
            "rotation": AttackConfig.rotation_default,
            "frequency": AttackConfig.tdmi_default,
        }
        attack = presets[method](**attack_kwargs)
        for key in ("train_ids", "validation_ids"):
            if key in raw:
                raw[key] = tuple(raw[key])
        if out_dir is not None:
            raw["out_dir"] = out_dir
        if data_dir is not None:
            raw["data_dir"] = data_dir
        if zoo_dir is not None:
            raw["zoo_dir"] = zoo_dir
        raw.setdefault("out_dir", "runs/out")
        raw.setdefault("zoo_dir", "zoo")
        return cls(method=method, attack=attack, **raw)


def build_fixture(zoo: Zoo, n: int, seed: int, image_size: int | None = None,
                  oversample: int = 3, id_prefix: str = "fx") -> ImageBatch:
    """n quantized synthetic images the defended target classifies correctly."""
    size = image_size or zoo.meta["image_size"]
    cand = quantize_batch(synth_batch(oversample * n, size, seed=seed, id_prefix=id_prefix))
    defended = apply_defense(zoo.defense, cand)
    keep = (zoo.target.predict(defended) == cand.labels).nonzero().flatten()
    if len(keep) < n:
        raise RuntimeError(f"only {len(keep)} of {oversample * n} candidates are target-correct")
    return cand.select(keep[:n])


def run_attack_stage(cfg: RunConfig, zoo: Zoo, clean: ImageBatch):
    """Dispatch the configured method; returns (adversarial batch, extras)."""
    train = zoo.ensemble(cfg.train_ids)
    extras: dict = {}
    if cfg.method == "tdmi":
        adv = tdmi_attack(clean, train, cfg.attack)
    elif cfg.method == "eps-search":
        validation = zoo.ensemble(cfg.validation_ids)
        result = epsilon_search_attack(clean, train, validation, cfg.attack)
        adv = result.adversarial
        extras["chosen_epsilon"] = {
            i: e for i, e in zip(clean.ids, result.chosen_epsilon)
        }
        extras["succeeded_on_validation"] = {
            i: s for i, s in zip(clean.ids, result.succeeded_on_validation)
        }
        extras["iterations_used"] = {
            i: n for i, n in zip(clean.ids, result.iterations_used)
        }
    elif cfg.method == "perceptual":
        adv = perceptual_attack(clean, train, zoo.lpips_extractor, cfg.attack)
    elif cfg.method == "rdti":
        adv = rdti_attack(clean, train, cfg.attack)
    elif cfg.method == "rotation":
        adv = rotation_ensemble_attack(clean, train, cfg.attack)
    elif cfg.method == "frequency":
        size = clean.image_size
        adv = frequency_attack(clean, train, make_lr_field(size, size), cfg.frequency_steps)
    else:
        raise ValueError(cfg.method)
    return adv, extras


def run_pipeline(cfg: RunConfig) -> tuple[ScoreReport, dict]:
    """Generate adversarial images, score them against the defended target,
    and write all artifacts under cfg.out_dir. Returns (report, artifact paths)."""
    torch.manual_seed(cfg.attack.seed)
    out = str(cfg.out_dir)
    os.makedirs(out, exist_ok=True)
    run_hash = cfg.config_hash()

    try:
        zoo = load_zoo(cfg.zoo_dir)
    except Exception as exc:
        raise RuntimeError(f"[stage:zoo] {exc}") from exc

    try:
        if cfg.data_dir:
            clean = load_dataset(cfg.data_dir, os.path.join(str(cfg.data_dir), "manifest.csv"),
                                 num_classes=zoo.meta["num_classes"])
        else:
            clean = build_fixture(zoo, cfg.n_images, cfg.fixture_seed, cfg.image_size)
    except Exception as exc:
        raise RuntimeError(f"[stage:data] {exc}") from exc

    try:
        adv, extras = run_attack_stage(cfg, zoo, clean)
    except Exception as exc:
        raise RuntimeError(f"[stage:attack] {exc}") from exc

    try:
        clean_dir = os.path.join(out, "clean")
        adv_dir = os.path.join(out, "adv")
        save_images(clean, clean_dir)
        adv_manifest = save_images(adv, adv_dir)
        adv_quant = load_dataset(adv_dir, adv_manifest, num_classes=zoo.meta["num_classes"])
    except Exception as exc:
        raise RuntimeError(f"[stage:save] {exc}") from exc

    try:
        report = score_batches(zoo.target, zoo.defense, zoo.fid_extractor,
                               zoo.lpips_extractor, clean, adv_quant)
    except Exception as exc:
        raise RuntimeError(f"[stage:score] {exc}") from exc

    try:
        record = {
            "config_hash": run_hash,
            "method": cfg.method,
            "seed": cfg.attack.seed,
            "config": cfg.semantic_dict(),
            "score": report.to_dict(),
            **extras,
        }
        report_path = os.path.join(out, "report.json")
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2)
        success = {pid: ok for pid, ok, _ in report.per_image}
        tasks_path = write_task_store(out, clean.ids, clean_dir, adv_dir,
                                      success, report.asr, run_hash)
    except Exception as exc:
        raise RuntimeError(f"[stage:report] {exc}") from exc

    artifacts = {
        "out_dir": out,
        "clean_dir": clean_dir,
        "adv_dir": adv_dir,
        "report": report_path,
        "tasks": tasks_path,
        "config_hash": run_hash,
    }
    return report, artifacts


def combined_report(run_dir) -> dict:
    """Machine report plus, when annotations exist, the subjective aggregate.

    The subjective total is reported on the published-sum scale and also
    times five, since reported totals in the wild use both conventions.
    """
    root = str(run_dir)
    with open(os.path.join(root, "report.json"), encoding="utf-8") as fh:
        record = json.load(fh)
    out = {
        "config_hash": record["config_hash"],
        "method": record["method"],
        "machine": record["score"],
    }
    log_path = os.path.join(root, "annotations.jsonl")
    tasks_path = os.path.join(root, "tasks.json")
    if os.path.exists(log_path) and os.path.exists(tasks_path):
        from advkit.annotations import AnnotationStore

        store = AnnotationStore(root)
        subjective = store.aggregate().to_dict()
        subjective["s_obj_times5"] = 5.0 * subjective["s_obj"]
        out["subjective"] = subjective
    return out
