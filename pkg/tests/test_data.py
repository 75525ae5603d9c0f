"""
Tests for data.py: resampling, augmentation, sampling and image sources.
"""

import numpy as np
import pytest

from vpt_dml.config import AugmentConfig, ConfigurationError, SyntheticConfig
from vpt_dml.data import (
    Dataset,
    DatasetError,
    augment,
    balanced_sampler,
    cubic_kernel,
    decode_ppm,
    eval_transform,
    generate_synthetic,
    hflip,
    load_image_folder,
    make_batch,
    resize_bicubic,
    split_classes,
)


def _catmull_rom(x):
    x = abs(x)
    if x <= 1.0:
        return 1.5 * x**3 - 2.5 * x**2 + 1.0
    if x < 2.0:
        return -0.5 * x**3 + 2.5 * x**2 - 4.0 * x + 2.0
    return 0.0


def _resize_oracle(image, size):
    """Separable scalar evaluation with half-pixel centers and clamped edges."""
    in_size = image.shape[0]

    def weights(out):
        center = (out + 0.5) * in_size / size - 0.5
        base = int(np.floor(center))
        return [(min(max(t, 0), in_size - 1), _catmull_rom(center - t))
                for t in range(base - 1, base + 3)]

    out = np.zeros((size, size, image.shape[2]))
    for i in range(size):
        for j in range(size):
            for row, wr in weights(i):
                for col, wc in weights(j):
                    out[i, j] += wr * wc * image[row, col]
    return np.clip(out, 0.0, 1.0)


def _ppm(width, height, pixels, maxval=255):
    header = f"P6\n# fixture\n{width} {height}\n{maxval}\n".encode()
    return header + bytes(pixels)


class TestBicubic:
    """Cubic convolution resampling."""

    def test_kernel_values(self):
        np.testing.assert_allclose(cubic_kernel(np.array([0.0, 1.0, 2.0, 0.5])),
                                   [1.0, 0.0, 0.0, 0.5625])

    def test_constant_image(self):
        image = np.full((5, 7, 3), 0.4, dtype=np.float32)
        np.testing.assert_allclose(resize_bicubic(image, 9), 0.4, atol=1e-6)

    def test_ramp_upscale_matches_oracle(self):
        ramp = (np.arange(16, dtype=np.float64).reshape(4, 4) / 15.0)[:, :, None].repeat(3, 2)
        np.testing.assert_allclose(resize_bicubic(ramp, 8), _resize_oracle(ramp, 8), atol=1e-6)

    def test_output_shape_and_range(self):
        image = np.random.default_rng(0).random((10, 6, 3))
        out = resize_bicubic(image, 4, 5)
        assert out.shape == (4, 5, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestAugment:
    """Training and evaluation transforms."""

    def test_double_flip(self):
        image = np.random.default_rng(0).random((4, 5, 3))
        np.testing.assert_array_equal(hflip(hflip(image)), image)

    def test_forced_flip_without_crop(self):
        image = np.random.default_rng(1).random((8, 8, 3)).astype(np.float32)
        config = AugmentConfig(scale_min=1.0, scale_max=1.0, ratio_min=1.0, ratio_max=1.0)
        out = augment(image, np.random.default_rng(0), config, 8, force_flip=True)
        np.testing.assert_allclose(out, image[:, ::-1], atol=1e-6)

    def test_shape_and_range(self):
        rng = np.random.default_rng(2)
        image = rng.random((20, 14, 3)).astype(np.float32)
        for _ in range(20):
            out = augment(image, rng, AugmentConfig(), 8)
            assert out.shape == (8, 8, 3)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_same_stream_same_result(self):
        image = np.random.default_rng(3).random((12, 12, 3)).astype(np.float32)
        a = augment(image, np.random.default_rng(9), AugmentConfig(), 8)
        b = augment(image, np.random.default_rng(9), AugmentConfig(), 8)
        np.testing.assert_array_equal(a, b)

    def test_eval_transform_is_identity_at_size(self):
        image = np.random.default_rng(4).random((8, 8, 3)).astype(np.float32)
        np.testing.assert_array_equal(eval_transform(image, AugmentConfig(), 8), image)

    def test_eval_center_crop(self):
        image = np.zeros((4, 8, 3), dtype=np.float32)
        image[:, 2:6] = 1.0
        np.testing.assert_array_equal(eval_transform(image, AugmentConfig(), 4), 1.0)


class TestBalancedSampler:
    """B/n classes × n samples per batch."""

    @pytest.fixture
    def labels(self):
        return np.repeat(np.arange(10), 4)

    def test_batch_shape(self, labels):
        sampler = balanced_sampler(labels, batch_size=8, per_class=2, seed=0)
        for _ in range(25):
            batch = next(sampler)
            classes, counts = np.unique(labels[batch], return_counts=True)
            assert len(batch) == 8
            assert len(classes) == 4
            assert np.all(counts == 2)
            assert len(set(batch.tolist())) == 8

    def test_one_per_class(self, labels):
        batch = next(balanced_sampler(labels, batch_size=5, per_class=1, seed=0))
        assert len(set(labels[batch].tolist())) == 5

    def test_epoch_balance(self, labels):
        sampler = balanced_sampler(labels, batch_size=10, per_class=2, seed=3)
        appearances = np.zeros(10, dtype=np.int64)
        for _ in range(2):
            for c in labels[next(sampler)][::2]:
                appearances[c] += 1
        assert np.all(appearances == 1)

    def test_seeded(self, labels):
        a = balanced_sampler(labels, 8, 2, seed=5)
        b = balanced_sampler(labels, 8, 2, seed=5)
        for _ in range(5):
            np.testing.assert_array_equal(next(a), next(b))

    def test_indivisible_batch(self, labels):
        with pytest.raises(ConfigurationError):
            balanced_sampler(labels, 7, 2, seed=0)

    def test_too_few_eligible_classes(self):
        labels = np.array([0, 0, 1, 2])
        with pytest.raises(ConfigurationError):
            balanced_sampler(labels, 4, 2, seed=0)


class TestSynthetic:
    """Clustered synthetic datasets."""

    def test_reproducible(self):
        synthetic = SyntheticConfig(classes=3, per_class=2, image_size=8,
                                    cluster_separation=1.0)
        a, b = generate_synthetic(synthetic, 1), generate_synthetic(synthetic, 1)
        for x, y in zip(a.images, b.images):
            assert x.tobytes() == y.tobytes()
        np.testing.assert_array_equal(a.labels, [0, 0, 1, 1, 2, 2])

    def test_noise_free_classes_collapse(self):
        data = generate_synthetic(
            SyntheticConfig(classes=2, per_class=3, image_size=8, cluster_separation=1.0,
                            noise_std=0.0), 0)
        np.testing.assert_array_equal(data.images[0], data.images[2])
        assert not np.array_equal(data.images[0], data.images[3])

    def test_separation(self):
        synthetic = SyntheticConfig(classes=4, per_class=1, image_size=8,
                               cluster_separation=2.0, noise_std=0.0)
        images = generate_synthetic(synthetic, 2).images
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(images[i].astype(np.float64) - images[j]) >= 2.0 - 1e-4

    def test_nearest_centroid(self):
        synthetic = SyntheticConfig(classes=2, per_class=5, image_size=8,
                               cluster_separation=3.0, noise_std=0.01)
        data = generate_synthetic(synthetic, 0)
        flat = np.stack([im.ravel() for im in data.images]).astype(np.float64)
        centroids = np.stack([flat[data.labels == c].mean(axis=0) for c in range(2)])
        nearest = np.argmin(((flat[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
        np.testing.assert_array_equal(nearest, data.labels)

    def test_infeasible_separation(self):
        with pytest.raises(DatasetError):
            generate_synthetic(SyntheticConfig(image_size=2, cluster_separation=100.0), 0)


class TestDataset:
    """Class-disjoint splitting."""

    def test_split_reindexes(self):
        data = Dataset([np.zeros((2, 2, 3))] * 6, np.array([0, 0, 1, 1, 2, 2]), ["a", "b", "c"])
        train, held_out = data.split(2)
        np.testing.assert_array_equal(train.labels, [0, 0, 1, 1])
        np.testing.assert_array_equal(held_out.labels, [0, 0])
        assert held_out.class_names == ["c"]

    def test_split_needs_both_sides(self):
        data = Dataset([np.zeros((2, 2, 3))] * 2, np.array([0, 1]))
        with pytest.raises(ConfigurationError):
            data.split(2)

    def test_reserved_pretrain_classes(self):
        labels = np.repeat(np.arange(5), 2)
        data = Dataset([np.zeros((2, 2, 3))] * 10, labels, ["a", "b", "c", "d", "e"])
        splits = split_classes(data, train_classes=2, pretrain_classes=1)
        assert splits.pretrain.class_names == ["a"]
        assert splits.train.class_names == ["b", "c"]
        assert splits.eval.class_names == ["d", "e"]
        np.testing.assert_array_equal(splits.train.labels, [0, 0, 1, 1])

    def test_reserved_classes_must_leave_tuning_classes(self):
        data = Dataset([np.zeros((2, 2, 3))] * 3, np.array([0, 1, 2]))
        with pytest.raises(ConfigurationError):
            split_classes(data, pretrain_classes=3)
        with pytest.raises(ConfigurationError):
            split_classes(data, pretrain_classes=2)

    def test_label_count_mismatch(self):
        with pytest.raises(DatasetError):
            Dataset([np.zeros((2, 2, 3))], np.array([0, 1]))

    def test_make_batch_eval_path(self):
        images = [np.full((8, 8, 3), v, dtype=np.float32) for v in (0.1, 0.2, 0.3)]
        data = Dataset(images, np.array([0, 1, 2]))
        batch = make_batch(data, np.array([2, 0]), step=4, rng=None,
                           config=AugmentConfig(), size=8)
        assert batch.images.shape == (2, 8, 8, 3)
        np.testing.assert_array_equal(batch.labels, [2, 0])
        assert batch.step == 4


class TestImageFolder:
    """PPM decoding and folder enumeration."""

    def test_p6_fixture(self):
        pixels = [255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]
        image = decode_ppm(_ppm(2, 2, pixels))
        expected = np.array(pixels, dtype=np.float64).reshape(2, 2, 3) / 255.0
        np.testing.assert_allclose(image, expected, atol=1e-7)

    def test_p3(self):
        image = decode_ppm(b"P3 1 1 10\n5 10 0\n")
        np.testing.assert_allclose(image[0, 0], [0.5, 1.0, 0.0])

    def test_truncated(self):
        with pytest.raises(DatasetError):
            decode_ppm(_ppm(2, 2, [0] * 5))

    def test_bad_magic(self):
        with pytest.raises(DatasetError):
            decode_ppm(b"P5 1 1 255\n\x00")

    def test_folder_layout(self, tmp_path):
        for name in ("zebra", "apple"):
            (tmp_path / name).mkdir()
            for i in range(2):
                (tmp_path / name / f"{i}.ppm").write_bytes(_ppm(1, 1, [i, i, i]))
        (tmp_path / "apple" / "notes.txt").write_text("ignored")
        data = load_image_folder(tmp_path)
        assert data.class_names == ["apple", "zebra"]
        np.testing.assert_array_equal(data.labels, [0, 0, 1, 1])

    def test_unreadable_file_skipped(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "good.ppm").write_bytes(_ppm(1, 1, [1, 2, 3]))
        (tmp_path / "a" / "bad.ppm").write_bytes(b"garbage")
        assert len(load_image_folder(tmp_path)) == 1

    def test_empty_class(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "bad.ppm").write_bytes(b"garbage")
        with pytest.raises(DatasetError):
            load_image_folder(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_image_folder(tmp_path / "absent")
