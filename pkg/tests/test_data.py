"""Dataset plumbing: PGM files, manifests, resizing, the synthetic corpus."""

import numpy as np
import pytest

from regionmim.data import (ClassTexture, SyntheticSpec, bilinear_resize,
                            generate_synthetic, load_manifest, load_sample,
                            load_split, nearest_resize, read_pgm, write_pgm)
from regionmim.errors import DataError

SMALL_SPEC = SyntheticSpec(image_size=16, per_class=5, seed=11)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic(SyntheticSpec(image_size=32, per_class=25, seed=0), root)
    return load_manifest(manifest)


class TestPgm:
    def test_round_trip(self, tmp_path):
        values = np.random.default_rng(0).integers(0, 256, (13, 9)).astype(np.uint8)
        path = tmp_path / "img.pgm"
        write_pgm(path, values)
        np.testing.assert_array_equal(read_pgm(path), values)

    def test_header_comment_supported(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x10\x20\x30")
        np.testing.assert_array_equal(read_pgm(path), [[0, 16], [32, 48]])

    def test_rejects_non_p5(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
        with pytest.raises(DataError, match="P5"):
            read_pgm(path)

    def test_rejects_truncated_payload(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(DataError, match="expected 16 pixels"):
            read_pgm(path)


class TestResize:
    def test_identity_pass_through(self):
        values = np.random.default_rng(1).uniform(0, 1, (224, 224))
        out = bilinear_resize(values, 224, 224)
        assert (out == values).all()

    def test_nearest_upscale_quadrants(self):
        mask = np.array([[1.0, 0.0], [0.0, 0.0]])
        out = nearest_resize(mask, 4, 4)
        expected = np.zeros((4, 4))
        expected[:2, :2] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_bilinear_stays_in_range(self):
        values = np.random.default_rng(2).uniform(0, 1, (32, 32))
        out = bilinear_resize(values, 11, 47)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_bilinear_constant_preserved(self):
        out = bilinear_resize(np.full((8, 8), 0.37), 15, 5)
        np.testing.assert_allclose(out, 0.37, atol=1e-12)


class TestManifest:
    def test_synthetic_manifest_loads(self, corpus):
        assert corpus.classes == 4
        assert len(corpus.records) == 100
        assert len(corpus.split("train")) == 80
        assert len(corpus.split("test")) == 20

    def test_stratified_split_within_one_sample_of_80_percent(self, corpus):
        for cls in range(4):
            train = sum(1 for r in corpus.split("train") if r.label_id == cls)
            assert abs(train - 0.8 * 25) <= 1

    def test_missing_mask_file_names_row(self, tmp_path):
        manifest = generate_synthetic(SMALL_SPEC, tmp_path)
        loaded = load_manifest(manifest)
        loaded.records[2].mask_path.unlink()
        with pytest.raises(DataError, match="row 4.*missing mask"):
            load_manifest(manifest)

    def test_duplicate_image_path_rejected(self, tmp_path):
        manifest = generate_synthetic(SMALL_SPEC, tmp_path)
        lines = manifest.read_text().splitlines()
        lines.append(lines[1])
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="duplicate image path"):
            load_manifest(manifest)

    def test_label_gap_rejected(self, tmp_path):
        manifest = generate_synthetic(SMALL_SPEC, tmp_path)
        text = manifest.read_text().replace(",1,", ",3,")
        manifest.write_text(text)
        with pytest.raises(DataError, match="label ids \\[1\\] missing"):
            load_manifest(manifest)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("image,mask,label,split\n")
        with pytest.raises(DataError, match="header"):
            load_manifest(path)


class TestLoadSample:
    def test_pass_through_and_ranges(self, corpus):
        record = corpus.records[0]
        img, mask = load_sample(record, 32, 32)
        raw = read_pgm(record.image_path)
        np.testing.assert_array_equal(img.pixels[:, :, 0], raw / 255.0)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
        assert set(np.unique(mask.bits)) <= {0, 1}

    def test_mask_survives_downscale_binarized(self, corpus):
        img, mask = load_sample(corpus.records[0], 16, 16)
        assert img.pixels.shape == (16, 16, 1)
        assert mask.bits.shape == (16, 16)
        assert set(np.unique(mask.bits)) <= {0, 1}

    def test_resized_valid_set_matches_pixel_loop(self, corpus):
        from tests.test_patching import valid_set_pixel_loop
        from regionmim.patching import MaskImage, compute_valid_set
        _, mask = load_sample(corpus.records[3], 16, 16)
        got = set(compute_valid_set(mask, 4))
        assert got == valid_set_pixel_loop(mask.bits, 4)


class TestSynthetic:
    def test_counts(self, tmp_path):
        spec = SyntheticSpec(image_size=32, per_class=25, seed=5)
        manifest = generate_synthetic(spec, tmp_path)
        loaded = load_manifest(manifest)
        assert len(loaded.records) == 100
        assert len(list((tmp_path / "images").glob("*.pgm"))) == 100
        assert len(list((tmp_path / "masks").glob("*.pgm"))) == 100

    def test_mask_coverage_bounds(self, corpus):
        for record in corpus.records:
            bits = read_pgm(record.mask_path) > 127
            assert 0.20 <= bits.mean() <= 0.50

    def test_deterministic_in_seed(self, tmp_path):
        spec = SyntheticSpec(image_size=16, per_class=3, seed=9)
        a = generate_synthetic(spec, tmp_path / "a")
        b = generate_synthetic(spec, tmp_path / "b")
        assert a.read_text() == b.read_text()
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*.pgm")):
            assert ((tmp_path / "a" / rel).read_bytes()
                    == (tmp_path / "b" / rel).read_bytes()), rel

    def test_outside_pixels_carry_no_class_signal(self, corpus):
        """Leakage probe: nearest-centroid on outside-only statistics ~ chance."""
        rng = np.random.default_rng(17)

        def outside_features(split):
            feats, labels = [], []
            for img, mask, label in load_split(corpus, split, 32, 32):
                outside = img.pixels[:, :, 0][mask.bits == 0]
                feats.append([outside.mean(), outside.std(),
                              np.percentile(outside, 25), np.percentile(outside, 75)])
                labels.append(label)
            return np.asarray(feats), np.asarray(labels)

        train_x, train_y = outside_features("train")
        test_x, test_y = outside_features("test")
        centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in range(4)])
        scale = train_x.std(axis=0) + 1e-9
        distances = np.linalg.norm(
            (test_x[:, None, :] - centroids[None, :, :]) / scale, axis=-1)
        accuracy = (distances.argmin(axis=1) == test_y).mean()
        sigma = np.sqrt(0.25 * 0.75 / test_y.size)
        assert accuracy <= 0.25 + 3 * sigma + 1e-9, accuracy
