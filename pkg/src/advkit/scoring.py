"""Machine-score pipeline and human-annotation aggregation.

Machine side: attack success rate against the defended target, Frechet
distance over pooled deep features, and a perceptual feature distance, each
normalized into [0, 1] and combined as ``100 * asr * fid_score * lpips_score``.

Subjective side: per-image majority vote over semantic judgments and mean of
five quality levels, summed as ``s_s * s_q / 5`` over successfully attacked
images, plus the derived per-success average quality.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from advkit.data import ImageBatch
from advkit.zoo import DefenseConfig, FeatureExtractor, ModelHandle, apply_defense

FID_CLIP = 200.0
LPIPS_CLIP_LOW = 0.2
LPIPS_CLIP_HIGH = 0.7
QUALITY_DENOM = 1000.0
QUALITY_LEVELS = 5


@dataclass(frozen=True)
class ScoreReport:
    """Machine-score breakdown for one adversarial set."""

    asr: float
    fid_raw: float
    fid_score: float
    lpips_raw: float
    lpips_score: float
    s_sub: float
    per_image: tuple  # (id, attacked_successfully, lpips_value)

    def __post_init__(self):
        expect = 100.0 * self.asr * self.fid_score * self.lpips_score
        if abs(self.s_sub - expect) > 1e-9:
            raise ValueError("s_sub must equal 100 * asr * fid_score * lpips_score")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_image"] = [
            {"id": i, "attacked_successfully": bool(s), "lpips_value": float(v)}
            for i, s, v in self.per_image
        ]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class AnnotationRecord:
    """One annotator's judgment of one image pair."""

    image_id: str
    annotator_id: str
    semantic_preserved: bool
    quality_level: int

    def __post_init__(self):
        if not 1 <= self.quality_level <= QUALITY_LEVELS:
            raise ValueError(f"quality_level must be in 1..{QUALITY_LEVELS}")
        if not self.image_id or not self.annotator_id:
            raise ValueError("image_id and annotator_id must be nonempty")

    def to_line(self) -> str:
        return json.dumps({
            "image_id": self.image_id,
            "annotator_id": self.annotator_id,
            "semantic_preserved": self.semantic_preserved,
            "quality_level": self.quality_level,
        })

    @classmethod
    def from_line(cls, line: str) -> "AnnotationRecord":
        obj = json.loads(line)
        return cls(
            image_id=str(obj["image_id"]),
            annotator_id=str(obj["annotator_id"]),
            semantic_preserved=bool(obj["semantic_preserved"]),
            quality_level=int(obj["quality_level"]),
        )


@dataclass(frozen=True)
class SubjectiveReport:
    s_obj: float
    per_image: tuple  # (id, s_s, s_q_mean, counted)
    s_quality: float | None
    incomplete_ids: tuple = ()

    def to_dict(self) -> dict:
        return {
            "s_obj": self.s_obj,
            "s_quality": self.s_quality,
            "incomplete_ids": list(self.incomplete_ids),
            "per_image": [
                {"id": i, "s_s": s, "s_q_mean": q, "counted": bool(c)}
                for i, s, q, c in self.per_image
            ],
        }


def attack_success_rate(target: ModelHandle, defense: DefenseConfig, adv: ImageBatch) -> float:
    """Fraction of images the defended target misclassifies."""
    if len(adv) == 0:
        raise ValueError("attack success rate undefined for an empty batch")
    defended = apply_defense(defense, adv)
    preds = target.predict(defended)
    return float((preds != adv.labels).float().mean())


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD matrix square root by eigendecomposition; negative
    eigenvalues from numerical noise are clipped to zero."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_clean, features_adv) -> float:
    """Frechet distance between gaussian fits of two feature sets.

    d^2 = ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the cross term
    computed as Tr((S2^(1/2) S1 S2^(1/2))^(1/2)) so only symmetric PSD square
    roots are needed.
    """
    f1 = np.asarray(features_clean, dtype=np.float64)
    f2 = np.asarray(features_adv, dtype=np.float64)
    if f1.ndim != 2 or f2.ndim != 2 or f1.shape[1] != f2.shape[1]:
        raise ValueError("feature sets must be 2-D with matching dimension")
    if f1.shape[0] < 2 or f2.shape[0] < 2:
        raise ValueError("need at least 2 rows per set for a covariance")
    mu1, mu2 = f1.mean(axis=0), f2.mean(axis=0)
    s1 = np.atleast_2d(np.cov(f1, rowvar=False))
    s2 = np.atleast_2d(np.cov(f2, rowvar=False))
    s2_half = _sqrtm_psd(s2)
    cross = _sqrtm_psd(s2_half @ s1 @ s2_half)
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def fid_score(fid_value: float) -> float:
    """sqrt(1 - min(fid, 200) / 200), in [0, 1]."""
    if fid_value < 0:
        raise ValueError("fid must be >= 0")
    return math.sqrt(1.0 - min(fid_value, FID_CLIP) / FID_CLIP)


def lpips(extractor: FeatureExtractor, x: ImageBatch, x_adv: ImageBatch) -> torch.Tensor:
    """Perceptual distance per image.

    At every tap, features are unit-normalized along channels at each spatial
    site; the squared L2 site distance is averaged over space and summed over
    taps.
    """
    if x.pixels.shape != x_adv.pixels.shape:
        raise ValueError("batches must have identical shapes")
    with torch.no_grad():
        taps_a = extractor.forward_features(x)
        taps_b = extractor.forward_features(x_adv)
    return lpips_from_taps(taps_a, taps_b)


def lpips_from_taps(taps_a, taps_b) -> torch.Tensor:
    total = None
    for fa, fb in zip(taps_a, taps_b):
        na = fa / fa.norm(dim=1, keepdim=True).clamp_min(1e-10)
        nb = fb / fb.norm(dim=1, keepdim=True).clamp_min(1e-10)
        d = ((na - nb) ** 2).sum(dim=1).mean(dim=(1, 2))
        total = d if total is None else total + d
    return total


def lpips_score(s_lpips: float) -> float:
    """sqrt(1 - 2 * (clip(s, 0.2, 0.7) - 0.2)), in [0, 1].

    Evaluated as sqrt(1.4 - 2 * clip) so the upper clip lands exactly on 0.
    """
    if s_lpips < 0:
        raise ValueError("lpips must be >= 0")
    clipped = min(max(s_lpips, LPIPS_CLIP_LOW), LPIPS_CLIP_HIGH)
    return math.sqrt(max(1.0 + 2.0 * LPIPS_CLIP_LOW - 2.0 * clipped, 0.0))


def machine_score(asr: float, fid_s: float, lpips_s: float) -> float:
    """100 x asr x fid_score x lpips_score."""
    for v in (asr, fid_s, lpips_s):
        if not 0.0 <= v <= 1.0:
            raise ValueError("machine_score factors must be in [0, 1]")
    return 100.0 * asr * fid_s * lpips_s


def score_batches(target: ModelHandle, defense: DefenseConfig,
                  fid_extractor: FeatureExtractor, lpips_extractor: FeatureExtractor,
                  clean: ImageBatch, adv: ImageBatch) -> ScoreReport:
    """Full machine score of an adversarial set against its clean originals."""
    from advkit.zoo import fid_features

    if clean.ids != adv.ids:
        raise ValueError("clean and adversarial batches must list the same ids in order")
    defended = apply_defense(defense, adv)
    preds = target.predict(defended)
    success = (preds != adv.labels)
    asr = float(success.float().mean())
    fid_raw = fid(fid_features(fid_extractor, clean).numpy(),
                  fid_features(fid_extractor, adv).numpy())
    lpips_per_image = lpips(lpips_extractor, clean, adv)
    lpips_raw = float(lpips_per_image.mean())
    f_score = fid_score(fid_raw)
    l_score = lpips_score(lpips_raw)
    per_image = tuple(
        (clean.ids[i], bool(success[i]), float(lpips_per_image[i]))
        for i in range(len(clean))
    )
    return ScoreReport(
        asr=asr, fid_raw=fid_raw, fid_score=f_score,
        lpips_raw=lpips_raw, lpips_score=l_score,
        s_sub=machine_score(asr, f_score, l_score),
        per_image=per_image,
    )


def aggregate_semantic(votes) -> int:
    """Majority of exactly five boolean semantic-preserved votes."""
    votes = [bool(v) for v in votes]
    if len(votes) != QUALITY_LEVELS:
        raise ValueError("semantic aggregation requires exactly 5 votes")
    return 1 if sum(votes) >= 3 else 0


def aggregate_quality(levels) -> float:
    """Arithmetic mean of exactly five quality levels in 1..5."""
    levels = [int(v) for v in levels]
    if len(levels) != QUALITY_LEVELS:
        raise ValueError("quality aggregation requires exactly 5 levels")
    if any(not 1 <= v <= QUALITY_LEVELS for v in levels):
        raise ValueError("quality levels must be in 1..5")
    return sum(levels) / len(levels)


def subjective_score(per_image) -> float:
    """Sum of s_s * s_q / 5 over successfully attacked images only."""
    total = 0.0
    for attacked, s_s, s_q in per_image:
        if attacked:
            total += s_s * s_q / QUALITY_LEVELS
    return total


def quality_score(s_obj: float, asr: float, denom: float = QUALITY_DENOM) -> float | None:
    """s_obj / (1000 * asr); None (reported absent) when asr is 0.

    The theoretical upper bound of the value is 5.
    """
    if asr < 0 or asr > 1:
        raise ValueError("asr must be in [0, 1]")
    if asr == 0:
        return None
    return s_obj / (denom * asr)


def aggregate_records(records, success_by_id: dict, asr: float | None = None,
                      denom: float = QUALITY_DENOM) -> SubjectiveReport:
    """Fold a stream of annotation records into a SubjectiveReport.

    Images with fewer than five judgments are excluded and flagged
    incomplete; more than five, or a duplicate (annotator, image) pair, is a
    corrupt log and raises.
    """
    votes: dict = {}
    seen: set = set()
    for rec in records:
        key = (rec.annotator_id, rec.image_id)
        if key in seen:
            raise ValueError(f"duplicate annotation for {key}")
        seen.add(key)
        votes.setdefault(rec.image_id, []).append(rec)

    per_image = []
    incomplete = []
    total = 0.0
    for image_id in sorted(votes):
        recs = votes[image_id]
        if len(recs) < QUALITY_LEVELS:
            incomplete.append(image_id)
            continue
        if len(recs) > QUALITY_LEVELS:
            raise ValueError(f"more than 5 annotations for image {image_id}")
        s_s = aggregate_semantic([r.semantic_preserved for r in recs])
        s_q = aggregate_quality([r.quality_level for r in recs])
        attacked = bool(success_by_id.get(image_id, False))
        counted = attacked
        if counted:
            total += s_s * s_q / QUALITY_LEVELS
        per_image.append((image_id, s_s, s_q, counted))

    s_quality = None
    if asr is not None and asr > 0:
        s_quality = total / (denom * asr)
    return SubjectiveReport(
        s_obj=total,
        per_image=tuple(per_image),
        s_quality=s_quality,
        incomplete_ids=tuple(incomplete),
    )
