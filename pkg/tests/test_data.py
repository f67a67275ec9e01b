"""Tests for dataset IO, majority vote, splits, patches, augmentation, synthesis."""

import numpy as np
import pytest
from PIL import Image

from lefm.data import (
    AnnotatedSample,
    AugmentationConfig,
    SplitSpec,
    augment,
    generate_synthetic,
    load_dataset,
    majority_vote,
    make_patches,
    make_split,
    save_dataset,
    synthetic_rule,
)
from lefm.errors import ConfigurationError, DataError


def make_sample(sample_id="s0", h=64, w=64, annotators=3, seed=0, patient=None):
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 1, size=(h, w, 3))
    annotations = rng.integers(0, 2, size=(annotators, h, w)).astype(np.uint8)
    return AnnotatedSample(
        sample_id=sample_id,
        image=image,
        annotations=annotations,
        majority_label=majority_vote(annotations),
        patient_id=patient or sample_id,
    )


class TestMajorityVote:
    def test_strict_majority_of_three(self):
        votes = np.array([[[1]], [[1]], [[0]]], dtype=np.uint8)
        assert majority_vote(votes)[0, 0] == 1

    def test_three_of_seven_is_negative(self):
        votes = np.array([1, 1, 1, 0, 0, 0, 0], dtype=np.uint8).reshape(7, 1, 1)
        assert majority_vote(votes)[0, 0] == 0

    def test_even_tie_breaks_positive(self):
        votes = np.array([1, 1, 0, 0], dtype=np.uint8).reshape(4, 1, 1)
        assert majority_vote(votes)[0, 0] == 1

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        votes = rng.integers(0, 2, size=(5, 8, 8)).astype(np.uint8)
        base = majority_vote(votes)
        for _ in range(10):
            perm = rng.permutation(5)
            np.testing.assert_array_equal(majority_vote(votes[perm]), base)


class TestDatasetIO:
    def test_save_load_roundtrip(self, tmp_path):
        samples = [make_sample("a", seed=1, patient="p1"), make_sample("b", seed=2, patient="p2")]
        samples[0].organ = "liver"
        save_dataset(samples, tmp_path)
        loaded = load_dataset(tmp_path)
        assert [s.sample_id for s in loaded] == ["a", "b"]
        assert loaded[0].patient_id == "p1"
        assert loaded[0].organ == "liver"
        assert loaded[1].organ is None
        # 8-bit quantization bounds the image roundtrip error
        np.testing.assert_allclose(loaded[0].image, samples[0].image, atol=1 / 510 + 1e-12)
        np.testing.assert_array_equal(loaded[0].annotations, samples[0].annotations)
        np.testing.assert_array_equal(loaded[0].majority_label, samples[0].majority_label)
        assert loaded[0].image.min() >= 0.0 and loaded[0].image.max() <= 1.0

    def test_missing_image_reported_with_path(self, tmp_path):
        save_dataset([make_sample("a")], tmp_path)
        (tmp_path / "a" / "image.png").unlink()
        with pytest.raises(DataError, match="image"):
            load_dataset(tmp_path)

    def test_mask_gap_reported(self, tmp_path):
        save_dataset([make_sample("a", annotators=3)], tmp_path)
        (tmp_path / "a" / "annotator_1.png").unlink()
        with pytest.raises(DataError, match="annotator"):
            load_dataset(tmp_path)

    def test_inconsistent_annotator_counts_reported(self, tmp_path):
        save_dataset([make_sample("a", annotators=3), make_sample("b", annotators=3)], tmp_path)
        (tmp_path / "b" / "annotator_2.png").unlink()
        with pytest.raises(DataError, match="annotator"):
            load_dataset(tmp_path)

    def test_size_mismatch_reported(self, tmp_path):
        save_dataset([make_sample("a", h=64, w=64)], tmp_path)
        Image.fromarray(np.zeros((32, 32), dtype=np.uint8)).save(tmp_path / "a" / "annotator_0.png")
        with pytest.raises(DataError, match="shape"):
            load_dataset(tmp_path)

    def test_empty_root_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)


class TestSplit:
    def test_patient_disjoint(self):
        samples = [make_sample(f"s{i}", patient=f"p{i % 7}", seed=i) for i in range(20)]
        for seed in range(10):
            spec = make_split(samples, test_fraction=0.3, seed=seed)
            spec.validate(samples)
            by_id = {s.sample_id: s for s in samples}
            train_patients = {by_id[i].patient_id for i in spec.train_ids}
            test_patients = {by_id[i].patient_id for i in spec.test_ids}
            assert not train_patients & test_patients
            assert sorted(spec.train_ids + spec.test_ids) == sorted(s.sample_id for s in samples)

    def test_deterministic_under_seed(self):
        samples = [make_sample(f"s{i}", seed=i) for i in range(12)]
        a = make_split(samples, 0.25, seed=3)
        b = make_split(samples, 0.25, seed=3)
        assert a.to_dict() == b.to_dict()

    def test_dict_roundtrip(self):
        spec = SplitSpec(train_ids=["a", "b"], test_ids=["c"], val_fraction=0.2, seed=1)
        assert SplitSpec.from_dict(spec.to_dict()) == spec

    def test_overlap_rejected(self):
        with pytest.raises(ConfigurationError):
            SplitSpec(train_ids=["a"], test_ids=["a"]).validate()


class TestPatches:
    def test_exact_tiling(self):
        sample = make_sample(h=128, w=128)
        patches = make_patches(sample, 64, 64)
        assert len(patches) == 4
        assert [p.origin for p in patches] == [(0, 0), (0, 64), (64, 0), (64, 64)]

    def test_edge_aligned_remainders(self):
        sample = make_sample(h=100, w=100)
        patches = make_patches(sample, 64, 64)
        assert [p.origin for p in patches] == [(0, 0), (0, 36), (36, 0), (36, 36)]

    def test_reassembly_of_disjoint_tiling(self):
        sample = make_sample(h=128, w=192)
        patches = make_patches(sample, 64, 64)
        image = np.zeros_like(sample.image)
        label = np.zeros_like(sample.majority_label)
        for p in patches:
            r, c = p.origin
            image[r:r + 64, c:c + 64] = p.image
            label[r:r + 64, c:c + 64] = p.label
        np.testing.assert_array_equal(image, sample.image)
        np.testing.assert_array_equal(label, sample.majority_label)

    def test_every_pixel_covered(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            h, w = int(rng.integers(64, 150)), int(rng.integers(64, 150))
            stride = int(rng.integers(1, 65))
            sample = make_sample(h=h, w=w)
            cover = np.zeros((h, w), dtype=int)
            for p in make_patches(sample, 64, stride):
                r, c = p.origin
                cover[r:r + 64, c:c + 64] += 1
            assert cover.min() >= 1

    def test_oversized_patch_rejected(self):
        with pytest.raises(ConfigurationError):
            make_patches(make_sample(h=32, w=32), 64)

    def test_patch_size_multiple_of_eight(self):
        with pytest.raises(ConfigurationError):
            make_patches(make_sample(), 60)


class _FixedRng:
    """Stub rng: random() always fires, uniform() replays scripted values."""

    def __init__(self, uniforms):
        self.uniforms = list(uniforms)

    def random(self):
        return 0.0

    def uniform(self, low, high):
        return self.uniforms.pop(0)


class TestAugmentation:
    def pair(self, h=9, w=9, seed=0):
        rng = np.random.default_rng(seed)
        return rng.uniform(0, 1, size=(h, w, 3)), rng.integers(0, 2, size=(h, w)).astype(np.uint8)

    def test_zero_probability_is_identity(self):
        image, mask = self.pair()
        config = AugmentationConfig(probability=0.0)
        out_image, out_mask = augment((image, mask), config, np.random.default_rng(0))
        np.testing.assert_array_equal(out_image, image)
        np.testing.assert_array_equal(out_mask, mask)

    def test_horizontal_flip_is_involution(self):
        image, mask = self.pair()
        config = AugmentationConfig(
            shift_limit=0, scale_limit=0, rotation_limit=0,
            horizontal_flip=True, vertical_flip=False, probability=1.0,
        )
        once = augment((image, mask), config, np.random.default_rng(1))
        np.testing.assert_array_equal(once[0], image[:, ::-1])
        twice = augment(once, config, np.random.default_rng(1))
        np.testing.assert_array_equal(twice[0], image)
        np.testing.assert_array_equal(twice[1], mask)

    def test_quarter_turn_oracle(self):
        # +90 degrees maps pixel (r, c) to (c, H-1-r); checked on an
        # asymmetric 3x3 image with the rotation limit widened to 90
        image = np.arange(27, dtype=np.float64).reshape(3, 3, 3) / 27.0
        mask = np.array([[1, 0, 0], [0, 0, 0], [0, 1, 0]], dtype=np.uint8)
        config = AugmentationConfig(
            shift_limit=0, scale_limit=0, rotation_limit=90.0,
            horizontal_flip=False, vertical_flip=False, probability=1.0,
        )
        out_image, out_mask = augment((image, mask), config, _FixedRng([90.0]))
        expected_image = np.zeros_like(image)
        expected_mask = np.zeros_like(mask)
        for r in range(3):
            for c in range(3):
                expected_image[c, 3 - 1 - r] = image[r, c]
                expected_mask[c, 3 - 1 - r] = mask[r, c]
        np.testing.assert_allclose(out_image, expected_image, atol=1e-9)
        np.testing.assert_array_equal(out_mask, expected_mask)

    def test_label_set_and_range_preserved(self):
        rng = np.random.default_rng(7)
        config = AugmentationConfig(probability=0.5)
        for k in range(20):
            image, mask = self.pair(h=24, w=32, seed=k)
            out_image, out_mask = augment((image, mask), config, np.random.default_rng(k))
            assert set(np.unique(out_mask)) <= {0, 1}
            assert out_image.min() >= 0.0 and out_image.max() <= 1.0
            assert out_image.shape == image.shape and out_mask.shape == mask.shape

    def test_identical_transform_for_image_and_mask(self):
        # encode the mask into an image channel; both must move together
        rng = np.random.default_rng(11)
        mask = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        image = np.stack([mask.astype(float)] * 3, axis=2)
        config = AugmentationConfig(probability=1.0)
        out_image, out_mask = augment((image, mask), config, np.random.default_rng(3))
        # bilinear image vs nearest mask: agree wherever interpolation is pure
        exact = (out_image[:, :, 0] == 0.0) | (out_image[:, :, 0] == 1.0)
        np.testing.assert_array_equal(out_image[exact, 0].astype(np.uint8), out_mask[exact])

    def test_deterministic_given_rng_seed(self):
        image, mask = self.pair(h=16, w=16)
        config = AugmentationConfig(probability=0.5)
        a = augment((image, mask), config, np.random.default_rng(9))
        b = augment((image, mask), config, np.random.default_rng(9))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestSynthetic:
    def test_boundary_excluded(self):
        channels = (np.full((1, 1), 0.5), np.full((1, 1), 0.9), np.full((1, 1), 0.5))
        assert synthetic_rule("PRODUCT", channels, 0.25)[0, 0] == 0
        channels = (np.full((1, 1), 0.6), np.full((1, 1), 0.9), np.full((1, 1), 0.5))
        assert synthetic_rule("PRODUCT", channels, 0.25)[0, 0] == 1

    def test_same_seed_identical(self):
        a = generate_synthetic(3, 32, 32, "MIX", noise_sigma=0.05, seed=42)
        b = generate_synthetic(3, 32, 32, "MIX", noise_sigma=0.05, seed=42)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.majority_label, sb.majority_label)

    def test_different_seed_differs(self):
        a = generate_synthetic(1, 32, 32, "PRODUCT", 0.0, seed=1)
        b = generate_synthetic(1, 32, 32, "PRODUCT", 0.0, seed=2)
        assert not np.array_equal(a[0].image, b[0].image)

    def test_label_from_noiseless_field(self):
        noisy = generate_synthetic(2, 48, 48, "LINEAR", noise_sigma=0.2, seed=5)
        clean = generate_synthetic(2, 48, 48, "LINEAR", noise_sigma=0.0, seed=5)
        for sn, sc in zip(noisy, clean):
            np.testing.assert_array_equal(sn.majority_label, sc.majority_label)
            assert not np.array_equal(sn.image, sc.image)

    def test_product_balance_matches_monte_carlo_oracle(self):
        # oracle: fraction of uniform (r, b) pairs with r*b > 0.25
        rng = np.random.default_rng(123)
        r = rng.uniform(0, 1, size=1_000_000)
        b = rng.uniform(0, 1, size=1_000_000)
        oracle = float(np.mean(r * b > 0.25))
        samples = generate_synthetic(8, 256, 256, "PRODUCT", 0.0, seed=9, smoothness=0.0)
        fraction = float(np.mean([s.majority_label.mean() for s in samples]))
        assert fraction == pytest.approx(oracle, abs=0.005)

    def test_single_annotator(self):
        sample = generate_synthetic(1, 16, 16, "PRODUCT", 0.0, seed=0)[0]
        assert sample.n_annotators == 1
        np.testing.assert_array_equal(sample.annotations[0], sample.majority_label)

    def test_invalid_rule_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic(1, 16, 16, "CUBIC", 0.0, seed=0)

    def test_images_in_unit_range(self):
        for sample in generate_synthetic(3, 32, 32, "MIX", noise_sigma=0.3, seed=4):
            assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
