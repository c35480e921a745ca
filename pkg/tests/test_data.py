import logging

import numpy as np
import pytest

from rstcanet.bayer import bayer_masks, bilinear_demosaic, mosaic_rggb
from rstcanet.data import (
    AugmentationSpec,
    augment,
    list_images,
    load_dataset,
    load_rgb,
    make_sample,
    make_synthetic_dataset,
    sample_patches,
    save_rgb,
    synthetic_rgb,
)


class TestMosaic:
    def test_constant_gray(self):
        rgb = np.full((3, 4, 4), 0.5, dtype=np.float32)
        np.testing.assert_array_equal(mosaic_rggb(rgb), np.full((1, 4, 4), 0.5))

    def test_pure_red_sites(self):
        rgb = np.zeros((3, 4, 6), dtype=np.float32)
        rgb[0] = 1.0
        mos = mosaic_rggb(rgb)[0]
        expect = np.zeros((4, 6))
        expect[0::2, 0::2] = 1.0
        np.testing.assert_array_equal(mos, expect)

    def test_2x2_cell(self):
        rgb = np.zeros((3, 2, 2), dtype=np.float32)
        rgb[0] = 0.1
        rgb[1] = 0.2
        rgb[2] = 0.3
        np.testing.assert_allclose(mosaic_rggb(rgb)[0], [[0.1, 0.2], [0.2, 0.3]], rtol=1e-6)

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError, match="even"):
            mosaic_rggb(np.zeros((3, 5, 4), dtype=np.float32))

    def test_masks_partition_grid(self):
        masks = bayer_masks(6, 8)
        assert masks.sum(axis=0).max() == 1
        assert masks.sum() == 6 * 8
        assert masks[1].sum() == 6 * 8 // 2  # green covers half


class TestBilinearDemosaic:
    def test_constant(self):
        mos = np.full((1, 6, 6), 0.42, dtype=np.float32)
        np.testing.assert_allclose(bilinear_demosaic(mos), 0.42, rtol=1e-6)

    def test_red_exact_at_red_sites(self):
        rng = np.random.default_rng(0)
        rgb = np.zeros((3, 8, 8), dtype=np.float32)
        rgb[0] = rng.uniform(0, 1, (8, 8)).astype(np.float32)
        mos = mosaic_rggb(rgb)
        out = bilinear_demosaic(mos)
        masks = bayer_masks(8, 8)
        np.testing.assert_array_equal(out[0][masks[0]], rgb[0][masks[0]])

    def test_green_exact_on_horizontal_ramp(self):
        h = w = 8
        ramp = np.broadcast_to(np.arange(w, dtype=np.float32) / w, (h, w))
        rgb = np.stack([ramp, ramp, ramp])
        out = bilinear_demosaic(mosaic_rggb(rgb))
        np.testing.assert_allclose(out[1][1:-1, 1:-1], ramp[1:-1, 1:-1], atol=1e-6)

    def test_sampling_consistency(self):
        rng = np.random.default_rng(1)
        rgb = rng.uniform(0, 1, (3, 10, 12)).astype(np.float32)
        mos = mosaic_rggb(rgb)
        remosaic = mosaic_rggb(bilinear_demosaic(mos))
        np.testing.assert_array_equal(remosaic, mos)

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="mosaic"):
            bilinear_demosaic(np.zeros((3, 4, 4), dtype=np.float32))


class TestAugment:
    def _sample(self, seed=0, h=8, w=10):
        rng = np.random.default_rng(seed)
        return make_sample(rng.uniform(0, 1, (3, h, w)).astype(np.float32))

    def test_identity_spec(self):
        s = self._sample()
        out = augment(s, AugmentationSpec())
        np.testing.assert_array_equal(out.rgb, s.rgb)
        np.testing.assert_array_equal(out.mosaic, s.mosaic)

    def test_hflip_involution(self):
        s = self._sample(1)
        spec = AugmentationSpec(hflip=True)
        out = augment(augment(s, spec), spec)
        np.testing.assert_array_equal(out.rgb, s.rgb)

    def test_rot90_then_270(self):
        s = self._sample(2, 8, 8)
        out = augment(augment(s, AugmentationSpec(rotation=90)), AugmentationSpec(rotation=270))
        np.testing.assert_array_equal(out.rgb, s.rgb)

    def test_four_quarter_turns(self):
        s = self._sample(3, 6, 6)
        out = s
        for _ in range(4):
            out = augment(out, AugmentationSpec(rotation=90))
        np.testing.assert_array_equal(out.rgb, s.rgb)

    def test_histogram_preserved(self):
        s = self._sample(4)
        rng = np.random.default_rng(5)
        for _ in range(10):
            spec = AugmentationSpec(rotation=int(rng.integers(0, 4)) * 90,
                                    hflip=bool(rng.integers(0, 2)))
            out = augment(s, spec)
            np.testing.assert_array_equal(np.sort(out.rgb, axis=None), np.sort(s.rgb, axis=None))

    def test_mosaic_regenerated(self):
        s = self._sample(6, 8, 8)
        out = augment(s, AugmentationSpec(rotation=90))
        np.testing.assert_array_equal(out.mosaic, mosaic_rggb(out.rgb))

    def test_bad_rotation(self):
        with pytest.raises(ValueError, match="90"):
            augment(self._sample(), AugmentationSpec(rotation=45))


class TestPatchSampling:
    def _dataset(self, seed=0, n=3, size=32):
        rng = np.random.default_rng(seed)
        return [make_sample(synthetic_rgb(size, size, rng)) for _ in range(n)]

    def test_full_image_patch(self):
        ds = self._dataset(size=16)
        batch = sample_patches(ds, batch=2, patch=16, rng=np.random.default_rng(0))
        assert batch.targets.shape == (2, 3, 16, 16)
        assert any(np.array_equal(batch.targets[0], s.rgb) for s in ds)

    def test_even_alignment_and_phase(self):
        ds = self._dataset(1)
        batch = sample_patches(ds, batch=8, patch=8, rng=np.random.default_rng(1))
        for i in range(8):
            np.testing.assert_array_equal(batch.mosaics[i], mosaic_rggb(batch.targets[i]))

    def test_deterministic_under_seed(self):
        ds = self._dataset(2)
        b1 = sample_patches(ds, 4, 8, np.random.default_rng(7))
        b2 = sample_patches(ds, 4, 8, np.random.default_rng(7))
        np.testing.assert_array_equal(b1.mosaics, b2.mosaics)
        np.testing.assert_array_equal(b1.targets, b2.targets)

    def test_augmented_batch_keeps_pairing(self):
        ds = self._dataset(3)
        batch = sample_patches(ds, 6, 8, np.random.default_rng(3), augment_patches=True)
        for i in range(6):
            np.testing.assert_array_equal(batch.mosaics[i], mosaic_rggb(batch.targets[i]))

    def test_small_images_skipped_with_warning(self, caplog):
        small = self._dataset(4, n=1, size=8)
        big = self._dataset(5, n=1, size=32)
        with caplog.at_level(logging.WARNING):
            batch = sample_patches(small + big, 3, 16, np.random.default_rng(0))
        assert "smaller than patch" in caplog.text
        assert batch.targets.shape == (3, 3, 16, 16)

    def test_all_too_small_raises(self):
        ds = self._dataset(6, n=2, size=8)
        with pytest.raises(ValueError, match="no images"):
            sample_patches(ds, 2, 64, np.random.default_rng(0))


class TestIO:
    def test_png_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        rgb = rng.uniform(0, 1, (3, 10, 12)).astype(np.float32)
        path = tmp_path / "img.png"
        save_rgb(path, rgb)
        back = load_rgb(path)
        assert back.shape == (3, 10, 12)
        assert np.abs(back - rgb).max() <= 0.5 / 255 + 1e-6

    def test_odd_source_cropped_even(self, tmp_path):
        rgb = np.zeros((3, 7, 9), dtype=np.float32)
        path = tmp_path / "odd.png"
        save_rgb(path, rgb)
        assert load_rgb(path).shape == (3, 6, 8)

    def test_list_images_sorted(self, tmp_path):
        make_synthetic_dataset(tmp_path, 3, size=8, seed=0)
        names = [p.name for p in list_images(tmp_path)]
        assert names == sorted(names)

    def test_missing_dir(self):
        with pytest.raises(FileNotFoundError):
            list_images("/nonexistent/dataset/dir")

    def test_load_dataset_skips_unreadable(self, tmp_path, caplog):
        make_synthetic_dataset(tmp_path, 2, size=8, seed=1)
        (tmp_path / "broken.png").write_bytes(b"not a png")
        with caplog.at_level(logging.WARNING):
            samples = load_dataset(tmp_path)
        assert len(samples) == 2
        assert "skipping unreadable" in caplog.text

    def test_synthetic_in_range(self):
        rng = np.random.default_rng(2)
        img = synthetic_rgb(32, 32, rng)
        assert img.min() >= 0 and img.max() <= 1
        assert img.std() > 0.05  # actually has structure
