"""Dataset tests: determinism, bucket/bbox consistency, glyph decodability
via a pixel template-match oracle, PPM format exactness, augmentation
behavior, and split/manifest round trips."""

import hashlib
import os

import numpy as np
import pytest

from mdcm.data import (
    BUCKETS,
    GLYPH_COLORS,
    GLYPH_MASKS,
    Sample,
    SynthSpec,
    augment,
    bucket_of,
    build_split,
    generate_sample,
    glyph_geometry,
    load_split,
    read_ppm,
    sample_rng,
    split_plan,
    write_ppm,
)
from mdcm.data import _GLYPH_OFF
from mdcm.errors import DataError


def match_glyph(image: np.ndarray, bbox) -> int:
    """Pixel template match over all classes; returns the best class id."""
    gx, gy, cell = glyph_geometry(bbox)
    region = image[gy:gy + 3 * cell, gx:gx + 3 * cell]
    best_err, best_c = np.inf, -1
    for c in range(len(GLYPH_MASKS)):
        tmpl = np.where(GLYPH_MASKS[c][..., None] == 1,
                        GLYPH_COLORS[c][None, None], _GLYPH_OFF[None, None])
        big = np.kron(tmpl, np.ones((cell, cell, 1)))
        err = np.abs(region - big).sum()
        if err < best_err:
            best_err, best_c = err, c
    return best_c


class TestBuckets:
    def test_ranges(self):
        assert bucket_of(0.15) == "S"
        assert bucket_of(0.29) == "S"
        assert bucket_of(0.30) == "M"
        assert bucket_of(0.54) == "M"
        assert bucket_of(0.55) == "L"
        assert bucket_of(0.85) == "L"

    def test_out_of_range(self):
        with pytest.raises(DataError):
            bucket_of(0.1)
        with pytest.raises(DataError):
            bucket_of(0.9)


class TestGenerateSample:
    def test_same_seed_bit_identical(self):
        a = generate_sample(3, "M", np.random.default_rng(11))
        b = generate_sample(3, "M", np.random.default_rng(11))
        assert np.array_equal(a.image, b.image)
        assert a.bbox == b.bbox

    def test_values_in_unit_range(self):
        s = generate_sample(0, "L", np.random.default_rng(0))
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.image.shape == (64, 64, 3)

    def test_bbox_inside_frame_and_bucket_consistent(self):
        for seed in range(10):
            for bucket in BUCKETS:
                for c in range(8):
                    s = generate_sample(c, bucket,
                                        np.random.default_rng(seed))
                    x, y, w, h = s.bbox
                    assert 0 <= x and x + w <= 64
                    assert 0 <= y and y + h <= 64
                    assert bucket_of(max(w, h) / 64) == bucket

    def test_clutter_free_background_is_flat(self):
        spec = SynthSpec(clutter_density=0.0)
        s = generate_sample(0, "S", np.random.default_rng(5), spec)
        # Outside the bbox everything is the background color.
        x, y, w, h = s.bbox
        mask = np.ones((64, 64), dtype=bool)
        mask[y:y + h, x:x + w] = False
        outside = s.image[mask]
        assert np.all(outside == outside[0])

    def test_classes_differ_only_inside_glyph(self):
        for seed in [7, 8, 9]:
            a = generate_sample(1, "M", np.random.default_rng(seed))
            b = generate_sample(6, "M", np.random.default_rng(seed))
            assert a.bbox == b.bbox
            diff = np.any(a.image != b.image, axis=-1)
            gx, gy, cell = glyph_geometry(a.bbox)
            side = 3 * cell
            outside = diff.copy()
            outside[gy:gy + side, gx:gx + side] = False
            assert outside.sum() == 0
            assert diff[gy:gy + side, gx:gx + side].sum() > 0

    def test_glyph_template_match_is_perfect_without_clutter(self):
        spec = SynthSpec(clutter_density=0.0)
        for seed in range(4):
            for bucket in BUCKETS:
                for c in range(8):
                    s = generate_sample(c, bucket,
                                        np.random.default_rng(200 + seed),
                                        spec)
                    assert match_glyph(s.image, s.bbox) == c

    def test_glyph_template_match_survives_clutter(self):
        for seed in range(4):
            for bucket in BUCKETS:
                for c in range(8):
                    s = generate_sample(c, bucket,
                                        np.random.default_rng(300 + seed))
                    assert match_glyph(s.image, s.bbox) == c

    def test_bad_inputs(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DataError):
            generate_sample(8, "M", rng)
        with pytest.raises(DataError):
            generate_sample(0, "XL", rng)


class TestAugment:
    def test_eval_deterministic(self):
        img = generate_sample(0, "M", np.random.default_rng(1)).image
        a = augment(img, train=False)
        b = augment(img, train=False)
        assert np.array_equal(a, b)
        assert a.shape == (64, 64, 3)

    def test_eval_is_center_crop_of_resize(self):
        from mdcm.bilinear import resize_image
        img = generate_sample(0, "M", np.random.default_rng(2)).image
        out = augment(img, train=False)
        big = resize_image(img, 72, 72)
        np.testing.assert_array_equal(out, big[4:68, 4:68])

    def test_train_stays_in_unit_range(self):
        img = generate_sample(3, "L", np.random.default_rng(3)).image
        out = augment(img, train=True, rng=np.random.default_rng(4))
        assert out.shape == (64, 64, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_train_needs_rng(self):
        with pytest.raises(DataError):
            augment(np.zeros((64, 64, 3)), train=True)

    def test_crop_offsets_cover_range_uniformly(self):
        rng = np.random.default_rng(5)
        counts = np.zeros(9)
        img = np.zeros((64, 64, 3))
        draws = 3000
        for _ in range(draws):
            oy = int(rng.integers(0, 9))
            rng.integers(0, 9)
            rng.random()
            counts[oy] += 1
        # chi-squared against uniform: 8 dof, 3000 draws; 30 is generous
        expected = draws / 9
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        assert chi2 < 30.0

    def test_flip_is_involution(self):
        img = generate_sample(0, "M", np.random.default_rng(6)).image
        flipped = np.ascontiguousarray(img[:, ::-1])
        np.testing.assert_array_equal(flipped[:, ::-1], img)


class TestPpm:
    def test_white_pixel_exact_bytes(self):
        got = write_ppm(np.ones((1, 1, 3)))
        assert got == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_round_trip_within_quantization(self):
        rng = np.random.default_rng(7)
        img = rng.random((9, 11, 3))
        back = read_ppm(write_ppm(img))
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 1 / 255

    def test_rejects_wrong_magic(self):
        with pytest.raises(DataError, match="byte 0"):
            read_ppm(b"P5\n1 1\n255\n\x00")

    def test_rejects_short_payload(self):
        data = write_ppm(np.zeros((2, 2, 3)))
        with pytest.raises(DataError, match="truncated"):
            read_ppm(data[:-1])

    def test_rejects_bad_maxval(self):
        with pytest.raises(DataError, match="maxval"):
            read_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")

    def test_rejects_values_outside_unit_range(self):
        with pytest.raises(DataError):
            write_ppm(np.full((1, 1, 3), 1.5))

    def test_ignores_comments(self):
        data = b"P6\n# a comment\n1 1\n255\n\x10\x20\x30"
        img = read_ppm(data)
        np.testing.assert_allclose(img[0, 0], [16 / 255, 32 / 255, 48 / 255],
                                   atol=1e-12)


class TestSplits:
    def test_plan_is_class_and_bucket_balanced(self):
        plan = split_plan(512, 8)
        labels = [p[0] for p in plan]
        for c in range(8):
            assert labels.count(c) == 64
        for c in range(8):
            buckets = [b for lab, b in plan if lab == c]
            counts = [buckets.count(x) for x in BUCKETS]
            assert max(counts) - min(counts) <= 1

    def test_build_and_load_round_trip(self, tmp_path):
        out = str(tmp_path)
        manifest = build_split(out, "train", 16, seed=3)
        assert os.path.exists(manifest)
        d = load_split(out, "train")
        assert d.images.shape == (16, 64, 64, 3)
        assert len(d.labels) == 16
        plan = split_plan(16, 8)
        np.testing.assert_array_equal(d.labels, [p[0] for p in plan])
        assert d.buckets == [p[1] for p in plan]
        # Loaded image equals regenerated sample up to PPM quantization.
        s = generate_sample(d.labels[0], d.buckets[0],
                            sample_rng(3, "train", 0))
        assert np.abs(d.images[0] - s.image).max() <= 1 / 255
        assert tuple(d.bboxes[0]) == s.bbox

    def test_regeneration_is_hash_identical(self, tmp_path):
        a_dir, b_dir = str(tmp_path / "a"), str(tmp_path / "b")
        build_split(a_dir, "test", 8, seed=9)
        build_split(b_dir, "test", 8, seed=9)

        def digest(root):
            h = hashlib.sha256()
            for name in sorted(os.listdir(os.path.join(root, "images"))):
                with open(os.path.join(root, "images", name), "rb") as f:
                    h.update(f.read())
            with open(os.path.join(root, "test.txt"), "rb") as f:
                h.update(f.read())
            return h.hexdigest()

        assert digest(a_dir) == digest(b_dir)

    def test_train_and_test_rngs_disjoint(self):
        a = generate_sample(0, "S", sample_rng(5, "train", 0))
        b = generate_sample(0, "S", sample_rng(5, "test", 0))
        assert not np.array_equal(a.image, b.image)

    def test_too_few_samples_rejected(self, tmp_path):
        with pytest.raises(DataError):
            build_split(str(tmp_path), "train", 4, seed=0)

    def test_bucket_matches_stored_bbox(self, tmp_path):
        out = str(tmp_path)
        build_split(out, "test", 24, seed=1)
        d = load_split(out, "test")
        for bucket, bbox in zip(d.buckets, d.bboxes):
            assert bucket_of(max(bbox[2], bbox[3]) / 64) == bucket
