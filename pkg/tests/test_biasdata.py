import hashlib

import numpy as np
import pytest
from scipy import stats

from ladlab import biasdata as bd
from ladlab.errors import FormatError, UsageError


def glyph_spec(**kwargs):
    defaults = dict(num_classes=4, image_size=(16, 16, 1), samples_per_class=10, seed=0)
    defaults.update(kwargs)
    return bd.GeneratorSpec(**defaults)


class TestGlyphs:
    def test_counts_and_balance(self):
        ds = bd.gen_glyphs(glyph_spec())
        assert len(ds) == 40
        assert np.array_equal(np.bincount(ds.labels), [10, 10, 10, 10])
        assert ds.images.shape == (40, 16, 16, 1)

    def test_same_seed_bit_identical(self):
        a = bd.gen_glyphs(glyph_spec())
        b = bd.gen_glyphs(glyph_spec())
        assert np.array_equal(a.images, b.images)

    def test_class_mean_images_are_distinct(self):
        ds = bd.gen_glyphs(glyph_spec(samples_per_class=30))
        means = [ds.images[ds.labels == k].mean(axis=0) for k in range(4)]
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(means[i] - means[j]) > 0.5

    def test_too_many_classes_rejected(self):
        with pytest.raises(UsageError, match="glyph patterns"):
            bd.gen_glyphs(glyph_spec(num_classes=11, image_size=(16, 16, 1)))

    def test_all_ten_patterns_render(self):
        ds = bd.gen_glyphs(glyph_spec(num_classes=10, samples_per_class=2))
        per_class_mass = np.array([ds.images[ds.labels == k].sum() for k in range(10)])
        assert np.all(per_class_mass > 1.0)


class TestOnePixelBias:
    def test_fully_biased_places_class_column(self):
        ds = bd.gen_glyphs(glyph_spec())
        spec = bd.BiasSpec(kind="one_pixel", bias_ratio=1.0, pixel_value=1.0)
        biased = bd.apply_one_pixel_bias(ds, spec)
        for k in range(4):
            imgs = biased.images[biased.labels == k]
            assert np.all(imgs[:, 0, k, 0] == 1.0)
        assert np.array_equal(biased.bias_values, biased.labels)
        assert biased.aligned.all()

    def test_unbiased_column_uniform_over_other_classes(self):
        # At ratio 0 the column is by construction never the label's own
        # (that keeps aligned-fraction == bias_ratio exactly), so the honest
        # independence check is uniformity over the remaining columns.
        ds = bd.gen_glyphs(glyph_spec(samples_per_class=2500))
        spec = bd.BiasSpec(kind="one_pixel", bias_ratio=0.0)
        biased = bd.apply_one_pixel_bias(ds, spec)
        for k in range(4):
            counts = np.bincount(biased.bias_values[biased.labels == k], minlength=4)
            assert counts[k] == 0
            others = np.delete(counts, k)
            _, p = stats.chisquare(others)
            assert p > 0.01

    def test_zero_ratio_never_uses_own_column(self):
        ds = bd.gen_glyphs(glyph_spec(samples_per_class=200))
        biased = bd.apply_one_pixel_bias(ds, bd.BiasSpec(kind="one_pixel", bias_ratio=0.0))
        assert not np.any(biased.bias_values == biased.labels)

    def test_width_narrower_than_classes_rejected(self):
        ds = bd.gen_glyphs(glyph_spec(num_classes=4, image_size=(8, 8, 1)))
        narrow = ds.replace(images=ds.images[:, :, :3, :])
        with pytest.raises(UsageError, match="columns"):
            bd.apply_one_pixel_bias(narrow, bd.BiasSpec(kind="one_pixel"))

    def test_pixel_value_validated(self):
        ds = bd.gen_glyphs(glyph_spec())
        with pytest.raises(UsageError, match="pixel_value"):
            bd.apply_one_pixel_bias(ds, bd.BiasSpec(kind="one_pixel", pixel_value=2.0))

    def test_glyph_mask_preserved(self):
        ds = bd.gen_glyphs(glyph_spec())
        biased = bd.apply_one_pixel_bias(ds, bd.BiasSpec(kind="one_pixel", bias_ratio=1.0))
        mask_before = ds.images[:, 1:, :, 0] >= bd.GLYPH_MASK_THRESHOLD
        mask_after = biased.images[:, 1:, :, 0] >= bd.GLYPH_MASK_THRESHOLD
        assert np.array_equal(mask_before, mask_after)


class TestColorBias:
    def test_background_fully_biased_indices_match_labels(self):
        ds = bd.gen_glyphs(glyph_spec())
        biased = bd.apply_background_bias(ds, bd.BiasSpec(kind="background_color", bias_ratio=1.0))
        assert np.array_equal(biased.bias_values, biased.labels)
        assert biased.images.shape[-1] == 3

    def test_background_zero_noise_exact_palette(self):
        ds = bd.gen_glyphs(glyph_spec())
        spec = bd.BiasSpec(kind="background_color", bias_ratio=1.0, color_noise_std=0.0)
        biased = bd.apply_background_bias(ds, spec)
        palette = np.asarray(spec.resolved_palette(4))
        intensity = ds.images[..., 0]
        for i in range(len(ds)):
            bg = intensity[i] < bd.GLYPH_MASK_THRESHOLD
            assert np.array_equal(
                biased.images[i][bg], np.tile(palette[ds.labels[i]], (bg.sum(), 1))
            )

    def test_alignment_fraction_binomial_bound(self):
        ds = bd.gen_glyphs(glyph_spec(samples_per_class=500))
        spec = bd.BiasSpec(kind="background_color", bias_ratio=0.95)
        biased = bd.apply_background_bias(ds, spec)
        frac = biased.aligned.mean()
        assert 0.935 <= frac <= 0.965

    def test_foreground_mean_color_near_palette(self):
        ds = bd.gen_glyphs(glyph_spec(samples_per_class=250))
        spec = bd.BiasSpec(kind="foreground_color", bias_ratio=1.0, color_noise_std=0.005)
        biased = bd.apply_foreground_bias(ds, spec)
        palette = np.asarray(spec.resolved_palette(4))
        for k in range(4):
            sel = biased.labels == k
            fg_colors = []
            for img, base in zip(biased.images[sel], ds.images[sel]):
                fg = base[..., 0] >= bd.GLYPH_MASK_THRESHOLD
                fg_colors.append(img[fg].mean(axis=0))
            assert np.all(np.abs(np.mean(fg_colors, axis=0) - palette[k]) < 0.01)

    def test_foreground_mask_identical(self):
        ds = bd.gen_glyphs(glyph_spec())
        biased = bd.apply_foreground_bias(ds, bd.BiasSpec(kind="foreground_color", bias_ratio=1.0))
        mask_before = ds.images[..., 0] >= bd.GLYPH_MASK_THRESHOLD
        mask_after = biased.images.max(axis=-1) >= bd.GLYPH_MASK_THRESHOLD
        assert np.array_equal(mask_before, mask_after)

    def test_foreground_promotes_grayscale(self):
        ds = bd.gen_glyphs(glyph_spec())
        biased = bd.apply_foreground_bias(ds, bd.BiasSpec(kind="foreground_color"))
        assert biased.images.shape[-1] == 3

    def test_misaligned_draws_other_class_color(self):
        ds = bd.gen_glyphs(glyph_spec(samples_per_class=300))
        biased = bd.apply_background_bias(ds, bd.BiasSpec(kind="background_color", bias_ratio=0.0))
        assert not np.any(biased.bias_values == biased.labels)

    def test_palette_size_mismatch_rejected(self):
        ds = bd.gen_glyphs(glyph_spec())
        with pytest.raises(UsageError, match="palette"):
            bd.apply_background_bias(
                ds, bd.BiasSpec(kind="background_color", palette=[[1.0, 0.0, 0.0]])
            )


class TestCorruptions:
    def test_brightness_definition(self):
        img = np.full((4, 4, 3), 0.5)
        assert np.allclose(bd.corrupt_brightness(img), 0.8)

    def test_pixelate_idempotent(self):
        rng = np.random.default_rng(0)
        img = rng.random((8, 8, 3))
        once = bd.corrupt_pixelate(img)
        twice = bd.corrupt_pixelate(once)
        assert np.allclose(once, twice, atol=1e-15)

    def test_contrast_halves_std(self):
        rng = np.random.default_rng(1)
        img = rng.random((32, 32, 3))
        out = bd.corrupt_contrast(img)
        assert abs(out.std() - 0.5 * img.std()) < 1e-12

    def test_saturate_pushes_away_from_mean(self):
        img = np.zeros((1, 1, 3))
        img[0, 0] = [0.2, 0.5, 0.5]
        out = bd.corrupt_saturate(img)
        mean = img[0, 0].mean()
        assert np.allclose(out[0, 0], np.clip(mean + 1.8 * (img[0, 0] - mean), 0, 1))

    def test_unknown_corruption_rejected(self):
        with pytest.raises(UsageError, match="unknown corruption"):
            bd.apply_corruption("snow", np.zeros((2, 2, 1)))

    def test_corruption_bias_records_ids(self):
        ds = bd.gen_glyphs(glyph_spec())
        biased = bd.apply_corruption_bias(ds, bd.BiasSpec(kind="corruption", bias_ratio=1.0))
        assert np.array_equal(biased.bias_values, biased.labels)


class TestEvalSets:
    def test_independent_passes_chi_square(self):
        base = bd.gen_glyphs(glyph_spec(samples_per_class=1000, seed=77))
        spec = bd.BiasSpec(kind="background_color")
        ev = bd.make_eval_set(base, spec, bd.EvalMode(mode="independent"))
        table = np.zeros((4, 4))
        np.add.at(table, (ev.labels, ev.bias_values), 1)
        _, p, _, _ = stats.chi2_contingency(table)
        assert p > 0.01

    def test_conditioned_black_background(self):
        base = bd.gen_glyphs(glyph_spec(seed=78))
        spec = bd.BiasSpec(kind="background_color")
        ev = bd.make_eval_set(
            base, spec, bd.EvalMode(mode="conditioned", conditioned_value=[0.0, 0.0, 0.0])
        )
        intensity = base.images[..., 0]
        for i in range(len(ev)):
            bg = intensity[i] < bd.GLYPH_MASK_THRESHOLD
            assert ev.images[i][bg].max() < 0.05

    def test_conditioned_clean_for_one_pixel(self):
        base = bd.gen_glyphs(glyph_spec(seed=79))
        ev = bd.make_eval_set(
            base,
            bd.BiasSpec(kind="one_pixel"),
            bd.EvalMode(mode="conditioned", conditioned_value="clean"),
        )
        assert np.array_equal(ev.images, base.images)

    def test_conditioned_value_required(self):
        base = bd.gen_glyphs(glyph_spec())
        with pytest.raises(UsageError, match="conditioned_value"):
            bd.make_eval_set(base, bd.BiasSpec(kind="one_pixel"), bd.EvalMode(mode="conditioned"))

    def test_disjoint_seeds_share_no_images(self):
        train = bd.gen_glyphs(glyph_spec(seed=0, samples_per_class=50))
        test = bd.gen_glyphs(glyph_spec(seed=1, samples_per_class=50))
        train_hashes = {hashlib.sha256(img.tobytes()).hexdigest() for img in train.images}
        test_hashes = {hashlib.sha256(img.tobytes()).hexdigest() for img in test.images}
        assert not train_hashes & test_hashes


class TestAugmentation:
    def test_identity_when_disabled(self):
        ds = bd.gen_glyphs(glyph_spec())
        out = bd.augment_random_crop_flip(ds, padding=0, flip=False, seed=5)
        assert np.array_equal(out.images, ds.images)

    def test_offset_coverage_over_many_draws(self):
        probe = np.zeros((10000, 16, 16, 1))
        probe[:, 8, 8, 0] = 1.0
        ds = bd.LabeledDataset(
            images=probe,
            labels=np.zeros(10000, dtype=np.int64),
            bias_values=np.full(10000, -1),
            aligned=np.ones(10000, dtype=bool),
            seed=123,
            provenance="probe",
        )
        out = bd.augment_random_crop_flip(ds, padding=4, flip=False, seed=123)
        seen = set()
        for img in out.images:
            pos = np.argwhere(img[..., 0] == 1.0)
            assert len(pos) == 1
            r, c = pos[0]
            seen.add((int(12 - r), int(12 - c)))
        assert seen == {(a, b) for a in range(9) for b in range(9)}

    def test_double_flip_is_identity(self):
        ds = bd.gen_glyphs(glyph_spec())
        flipped_twice = bd.flip_images_horizontal(bd.flip_images_horizontal(ds.images))
        assert np.array_equal(flipped_twice, ds.images)


class TestIdx:
    def _write_fixture(self, tmp_path, n=2, rows=4, cols=4, image_magic=0x803, label_magic=0x801, label_count=None):
        import struct as st

        pixels = (np.arange(n * rows * cols) * 7 % 256).astype(np.uint8)
        pixels[0] = 255
        images = tmp_path / "images.idx"
        with open(images, "wb") as fh:
            fh.write(st.pack(">IIII", image_magic, n, rows, cols))
            fh.write(pixels.tobytes())
        labels = tmp_path / "labels.idx"
        with open(labels, "wb") as fh:
            fh.write(st.pack(">II", label_magic, label_count if label_count is not None else n))
            fh.write(bytes(range(label_count if label_count is not None else n)))
        return images, labels

    def test_well_formed_round_trip(self, tmp_path):
        images, labels = self._write_fixture(tmp_path)
        ds = bd.load_idx(images, labels)
        assert ds.images.shape == (2, 4, 4, 1)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.images[0, 0, 0, 0] == 1.0  # byte 255 scales to exactly 1.0
        assert np.array_equal(ds.labels, [0, 1])

    def test_magic_mismatch_rejected(self, tmp_path):
        images, labels = self._write_fixture(tmp_path, image_magic=0x804)
        with pytest.raises(FormatError, match="magic"):
            bd.load_idx(images, labels)

    def test_count_mismatch_rejected(self, tmp_path):
        images, labels = self._write_fixture(tmp_path, label_count=3)
        with pytest.raises(FormatError, match="labels"):
            bd.load_idx(images, labels)

    def test_truncated_rejected(self, tmp_path):
        images, labels = self._write_fixture(tmp_path)
        data = images.read_bytes()[:-5]
        images.write_bytes(data)
        with pytest.raises(FormatError, match="truncated"):
            bd.load_idx(images, labels)


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        ds = bd.apply_background_bias(
            bd.gen_glyphs(glyph_spec(samples_per_class=5)), bd.BiasSpec(kind="background_color")
        )
        path = tmp_path / "x.dataset"
        bd.save_dataset(path, ds)
        loaded = bd.load_dataset(path)
        assert np.array_equal(loaded.images, ds.images)
        assert np.array_equal(loaded.labels, ds.labels)
        assert np.array_equal(loaded.bias_values, ds.bias_values)
        assert np.array_equal(loaded.aligned, ds.aligned)
        assert loaded.provenance == ds.provenance
        assert loaded.seed == ds.seed

    def test_pure_function_of_spec_and_seed(self):
        spec = bd.BiasSpec(kind="foreground_color", bias_ratio=0.9)
        a = bd.apply_foreground_bias(bd.gen_glyphs(glyph_spec(seed=9)), spec)
        b = bd.apply_foreground_bias(bd.gen_glyphs(glyph_spec(seed=9)), spec)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.bias_values, b.bias_values)
