import math

import numpy as np
import pytest
import torch

from advkit.data import ImageBatch
from advkit.synthdata import synth_batch
from advkit.zoo import (
    DefenseConfig,
    EnsembleSpec,
    apply_defense,
    ensemble_logits,
    fid_features,
    load_zoo,
    train_zoo,
    true_class_probability,
)
from helpers import FixedLogitModel, LinearPixelModel, handle


def batch_of(pixels):
    pixels = torch.as_tensor(pixels, dtype=torch.float32)
    return ImageBatch(pixels=pixels, labels=torch.zeros(pixels.shape[0], dtype=torch.long),
                      ids=tuple(f"i{k}" for k in range(pixels.shape[0])))


class TestEnsembleLogits:
    def test_single_member_identity(self):
        b = synth_batch(3, 8, seed=0)
        m = handle(FixedLogitModel([1.0, -2.0]))
        ens = EnsembleSpec(members=[m])
        expected = m.forward(b)
        assert torch.allclose(ensemble_logits(ens, b), expected)

    def test_two_identical_members_equal_either(self):
        b = synth_batch(2, 8, seed=1)
        w = torch.randn(2, 3 * 64, generator=torch.Generator().manual_seed(2))
        m1 = handle(LinearPixelModel(w), "a")
        m2 = handle(LinearPixelModel(w.clone()), "b")
        ens = EnsembleSpec(members=[m1, m2])
        assert torch.allclose(ensemble_logits(ens, b), m1.forward(b), atol=1e-6)

    def test_hand_computed_weighted_sum(self):
        # fixed 1-pixel input, two distinct 2-class linear models
        px = torch.tensor([[[[0.5]], [[0.25]], [[1.0]]]])
        b = batch_of(px)
        w1 = torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        w2 = torch.tensor([[-1.0, 0.0, 1.0], [2.0, 2.0, 2.0]])
        ens = EnsembleSpec(members=[handle(LinearPixelModel(w1), "m1"),
                                    handle(LinearPixelModel(w2), "m2")])
        # by hand: m1 -> (0.5 + 0.5 + 3.0, 0) = (4.0, 0); m2 -> (0.5, 3.5)
        expected = torch.tensor([[0.5 * 4.0 + 0.5 * 0.5, 0.5 * 0.0 + 0.5 * 3.5]])
        assert torch.allclose(ensemble_logits(ens, b), expected, atol=1e-6)

    def test_mismatched_classes_fatal(self):
        m1 = handle(FixedLogitModel([0.0, 1.0]), num_classes=2)
        m2 = handle(FixedLogitModel([0.0, 1.0, 2.0]), num_classes=3)
        with pytest.raises(ValueError):
            EnsembleSpec(members=[m1, m2])

    def test_weights_must_sum_to_one(self):
        m = handle(FixedLogitModel([0.0, 1.0]))
        with pytest.raises(ValueError):
            EnsembleSpec(members=[m], weights=[0.5])

    def test_equal_weight_permutation_invariant(self):
        b = synth_batch(2, 8, seed=3)
        gen = torch.Generator().manual_seed(4)
        mods = [LinearPixelModel(torch.randn(2, 192, generator=gen)) for _ in range(3)]
        fwd = ensemble_logits(EnsembleSpec(members=[handle(m, str(i)) for i, m in enumerate(mods)]), b)
        rev = ensemble_logits(EnsembleSpec(members=[handle(m, str(i)) for i, m in enumerate(reversed(mods))]), b)
        assert torch.allclose(fwd, rev, atol=1e-6)


class TestApplyDefense:
    def test_noop_config_is_identity(self):
        b = synth_batch(2, 16, seed=5)
        cfg = DefenseConfig(pad_pixels=0, blur_sigma=0.0, blur_kernel=1, crop=16)
        out = apply_defense(cfg, b)
        assert torch.equal(out.pixels, b.pixels)

    def test_constant_image_unchanged(self):
        b = batch_of(torch.full((1, 3, 16, 16), 0.42))
        cfg = DefenseConfig(pad_pixels=4, blur_sigma=0.5, blur_kernel=3, crop=16)
        out = apply_defense(cfg, b)
        assert torch.allclose(out.pixels, b.pixels, atol=1e-6)

    def test_white_pixel_center_matches_kernel_coefficient(self):
        # blur of a unit impulse leaves the normalized center coefficient
        px = torch.zeros(1, 3, 9, 9)
        px[:, :, 4, 4] = 1.0
        cfg = DefenseConfig(pad_pixels=0, blur_sigma=0.5, blur_kernel=3, crop=9)
        out = apply_defense(cfg, batch_of(px))
        e2 = math.exp(-2.0)  # offset-1 weight for sigma = 0.5
        expected_center = 1.0 / (1.0 + 2.0 * e2) ** 2
        assert float(out.pixels[0, 0, 4, 4]) == pytest.approx(expected_center, abs=1e-6)

    def test_output_in_unit_range(self):
        b = synth_batch(4, 16, seed=6)
        out = apply_defense(DefenseConfig(pad_pixels=2, blur_sigma=1.0, blur_kernel=5, crop=16), b)
        assert float(out.pixels.min()) >= 0.0 and float(out.pixels.max()) <= 1.0

    def test_crop_larger_than_padded_rejected(self):
        b = synth_batch(1, 8, seed=7)
        with pytest.raises(ValueError):
            apply_defense(DefenseConfig(pad_pixels=0, blur_sigma=0.0, blur_kernel=1, crop=16), b)


class TestTrueClassProbability:
    def test_uniform_ten_classes(self):
        b = synth_batch(2, 8, seed=8)
        m = handle(FixedLogitModel([0.0] * 10), num_classes=10)
        p = true_class_probability(m, b, torch.tensor([3, 7]))
        assert torch.allclose(p, torch.full((2,), 0.1), atol=1e-6)

    def test_hand_softmax_strong_logit(self):
        b = synth_batch(1, 8, seed=9)
        m = handle(FixedLogitModel([10.0, 0.0]))
        p = true_class_probability(m, b, torch.tensor([0]))
        assert float(p[0]) == pytest.approx(1.0 / (1.0 + math.exp(-10.0)), abs=1e-7)

    def test_two_class_uniform(self):
        b = synth_batch(1, 8, seed=10)
        m = handle(FixedLogitModel([0.3, 0.3]))
        assert float(true_class_probability(m, b, torch.tensor([1]))[0]) == pytest.approx(0.5)

    def test_probabilities_sum_to_one(self, zoo):
        b = synth_batch(4, 32, seed=11)
        total = torch.zeros(4)
        for c in range(10):
            total += true_class_probability(zoo.target, b, torch.full((4,), c, dtype=torch.long))
        assert torch.allclose(total, torch.ones(4), atol=1e-6)


class TestFidFeatures:
    def test_identical_images_identical_rows(self, zoo):
        one = synth_batch(1, 32, seed=12)
        px = one.pixels.repeat(3, 1, 1, 1)
        b = batch_of(px)
        rows = fid_features(zoo.fid_extractor, b)
        assert torch.allclose(rows[0], rows[1], atol=1e-7)
        assert torch.allclose(rows[0], rows[2], atol=1e-7)

    def test_single_image_shape(self, zoo):
        b = synth_batch(1, 32, seed=13)
        rows = fid_features(zoo.fid_extractor, b)
        assert rows.ndim == 2 and rows.shape[0] == 1

    def test_distinct_images_distinct_rows(self, zoo):
        b = synth_batch(2, 32, seed=14)
        rows = fid_features(zoo.fid_extractor, b)
        assert float((rows[0] - rows[1]).norm()) > 0.0


class TestZooPersistence:
    def test_train_save_load_roundtrip(self, tmp_path):
        train_zoo(tmp_path / "z", seed=3, n_train=256, epochs=1)
        zoo = load_zoo(tmp_path / "z")
        assert set(zoo.meta["train_ids"]) <= set(zoo.models)
        assert zoo.meta["target_id"] in zoo.models
        b = synth_batch(4, 32, seed=15)
        logits = zoo.target.forward(b)
        assert logits.shape == (4, 10)
        assert bool(torch.isfinite(logits).all())

    def test_checksum_mismatch_detected(self, tmp_path):
        train_zoo(tmp_path / "z", seed=3, n_train=256, epochs=1)
        victim = tmp_path / "z" / "target.pt"
        data = bytearray(victim.read_bytes())
        data[100] ^= 0xFF
        victim.write_bytes(bytes(data))
        with pytest.raises(ValueError, match="checksum"):
            load_zoo(tmp_path / "z")

    def test_retraining_reproduces_identical_weights(self, tmp_path):
        m1 = train_zoo(tmp_path / "a", seed=5, n_train=256, epochs=1)
        m2 = train_zoo(tmp_path / "b", seed=5, n_train=256, epochs=1)
        sums_a = {e["model_id"]: e["sha256"] for e in m1["models"]}
        sums_b = {e["model_id"]: e["sha256"] for e in m2["models"]}
        assert sums_a == sums_b

    def test_forward_counter_increments(self, zoo):
        before = zoo.target.forward_calls
        zoo.target.predict(synth_batch(1, 32, seed=16))
        assert zoo.target.forward_calls == before + 1
