"""Manifest parsing, patch features, splits, batching, synthetic datasets."""

import json

import numpy as np
import pytest
from PIL import Image

from retinagen.data import (
    ImageConfig,
    batch_iter,
    load_feature_file,
    load_image_features,
    make_splits,
    prepare_dataset,
    read_manifest,
    save_feature_file,
    write_manifest,
)
from retinagen.errors import DataError
from retinagen.synth import (
    LATENT_KEYWORDS,
    VISUAL_KEYWORDS,
    SynthConfig,
    compose_report,
    generate_dataset,
    render_fundus,
)
from retinagen.text import tokenize


def _write_image(path, value=128, size=64):
    arr = np.full((size, size, 3), value, dtype=np.uint8)
    Image.fromarray(arr).save(path)


def _write_dataset(tmp_path, n=3):
    (tmp_path / "images").mkdir()
    records = []
    for i in range(n):
        name = f"img_{i}.png"
        _write_image(tmp_path / "images" / name, value=(40 * (i + 1)) % 255)
        records.append(
            {
                "id": f"s{i}",
                "image": f"images/{name}",
                "keywords": "macular edema; drusen deposits" if i % 2 else "",
                "description": f"report number {i} describes the retina .",
            }
        )
    manifest = tmp_path / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


class TestImageConfig:
    def test_derived_geometry(self):
        cfg = ImageConfig(size=64, patch=16, channels=3)
        assert cfg.grid == 4
        assert cfg.regions == 16
        assert cfg.region_dim == 16 * 16 * 3

    def test_validation(self):
        with pytest.raises(DataError):
            ImageConfig(size=60, patch=16)
        with pytest.raises(DataError):
            ImageConfig(channels=2)

    def test_dict_round_trip(self):
        cfg = ImageConfig(size=32, patch=8, channels=1)
        assert ImageConfig.from_dict(cfg.to_dict()) == cfg


class TestManifest:
    def test_read_valid(self, tmp_path):
        manifest = _write_dataset(tmp_path)
        records = read_manifest(manifest)
        assert [r.sample_id for r in records] == ["s0", "s1", "s2"]
        assert records[1].keyword_labels == ["macular edema", "drusen deposits"]
        assert records[0].image_path.is_file()

    def test_missing_header(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"image": "x.png", "keywords": "", "description": "d"}\n')
        with pytest.raises(DataError, match="schema_version"):
            read_manifest(path)

    def test_dangling_image_with_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"schema_version": 1}\n'
            '{"image": "nope.png", "keywords": "", "description": "d"}\n'
        )
        with pytest.raises(DataError, match="m.jsonl:2.*not found"):
            read_manifest(path)

    def test_duplicate_id(self, tmp_path):
        (tmp_path / "a.png").touch()
        _write_image(tmp_path / "a.png")
        _write_image(tmp_path / "b.png")
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"schema_version": 1}\n'
            '{"id": "x", "image": "a.png", "keywords": "", "description": "d"}\n'
            '{"id": "x", "image": "b.png", "keywords": "", "description": "d"}\n'
        )
        with pytest.raises(DataError, match="duplicate sample id"):
            read_manifest(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"schema_version": 1}\n{"image": "a.png", "keywords": ""}\n')
        with pytest.raises(DataError, match="missing field 'description'"):
            read_manifest(path)


class TestFeatures:
    def test_patch_layout_row_major(self, tmp_path):
        # a 4x4 image with 2x2 patches: pixel values identify their patch
        cfg = ImageConfig(size=4, patch=2, channels=3)
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        arr[:2, :2] = 10   # patch 0 (top-left)
        arr[:2, 2:] = 20   # patch 1 (top-right)
        arr[2:, :2] = 30   # patch 2 (bottom-left)
        arr[2:, 2:] = 40   # patch 3 (bottom-right)
        path = tmp_path / "tiny.png"
        Image.fromarray(arr).save(path)
        feats = load_image_features(path, cfg)
        assert feats.shape == (4, 12)
        np.testing.assert_allclose(feats[0], 10 / 255.0)
        np.testing.assert_allclose(feats[1], 20 / 255.0)
        np.testing.assert_allclose(feats[2], 30 / 255.0)
        np.testing.assert_allclose(feats[3], 40 / 255.0)

    def test_values_unit_interval(self, tmp_path):
        cfg = ImageConfig()
        path = tmp_path / "img.png"
        _write_image(path, value=255)
        feats = load_image_features(path, cfg)
        assert feats.shape == (cfg.regions, cfg.region_dim)
        assert feats.max() <= 1.0 and feats.min() >= 0.0

    def test_decode_is_deterministic(self, tmp_path):
        cfg = ImageConfig()
        path = tmp_path / "img.png"
        _write_image(path, value=77)
        a = load_image_features(path, cfg)
        b = load_image_features(path, cfg)
        assert np.array_equal(a, b)

    def test_feature_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        feats = rng.random((16, 768))
        path = tmp_path / "x.feat"
        save_feature_file(path, feats)
        assert np.array_equal(load_feature_file(path), feats)

    def test_feature_file_dispatch(self, tmp_path):
        cfg = ImageConfig()
        rng = np.random.default_rng(4)
        feats = rng.random((cfg.regions, cfg.region_dim))
        path = tmp_path / "x.feat"
        save_feature_file(path, feats)
        assert np.array_equal(load_image_features(path, cfg), feats)

    def test_feature_file_wrong_shape(self, tmp_path):
        cfg = ImageConfig()
        path = tmp_path / "x.feat"
        save_feature_file(path, np.zeros((2, 2)))
        with pytest.raises(DataError, match="does not match image config"):
            load_image_features(path, cfg)

    def test_feature_file_truncated(self, tmp_path):
        path = tmp_path / "x.feat"
        save_feature_file(path, np.zeros((4, 4)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError, match="length"):
            load_feature_file(path)


class TestSplits:
    def test_counts_and_remainder(self):
        records = list(range(10))
        splits = make_splits(records, fractions=(0.7, 0.15, 0.15), seed=1)
        assert len(splits["train"]) == 7
        assert len(splits["val"]) == 1
        assert len(splits["test"]) == 2  # remainder lands in the last split
        combined = splits["train"] + splits["val"] + splits["test"]
        assert sorted(combined) == records

    def test_deterministic_given_seed(self):
        records = list(range(20))
        a = make_splits(records, seed=5)
        b = make_splits(records, seed=5)
        assert a == b
        c = make_splits(records, seed=6)
        assert a != c

    def test_empty_split_rejected(self):
        with pytest.raises(DataError, match="empty"):
            make_splits([1, 2], fractions=(0.5, 0.25, 0.25), seed=0)

    def test_zero_fraction_allowed(self):
        splits = make_splits(list(range(4)), fractions=(0.75, 0.0, 0.25), seed=0)
        assert splits["val"] == []

    def test_bad_fractions(self):
        with pytest.raises(DataError):
            make_splits([1, 2, 3], fractions=(0.5, 0.2, 0.2))


class TestBatchIter:
    def test_partitions_everything(self):
        batches = list(batch_iter(list(range(10)), 3, seed=0, epoch=0))
        assert [len(b) for b in batches] == [3, 3, 3, 1]
        assert sorted(x for b in batches for x in b) == list(range(10))

    def test_epoch_keyed_shuffle(self):
        items = list(range(32))
        e0 = [x for b in batch_iter(items, 8, seed=1, epoch=0) for x in b]
        e0_again = [x for b in batch_iter(items, 8, seed=1, epoch=0) for x in b]
        e1 = [x for b in batch_iter(items, 8, seed=1, epoch=1) for x in b]
        assert e0 == e0_again
        assert e0 != e1

    def test_no_shuffle_preserves_order(self):
        flat = [x for b in batch_iter([3, 1, 2], 2, shuffle=False) for x in b]
        assert flat == [3, 1, 2]


class TestPrepareDataset:
    def test_end_to_end(self, tmp_path):
        manifest = _write_dataset(tmp_path, n=8)
        data = prepare_dataset(manifest, max_len=20, fractions=(0.5, 0.25, 0.25), seed=0)
        assert set(data.splits) == {"train", "val", "test"}
        assert len(data.train) == 4
        sample = data.train[0]
        assert sample.features.shape == (16, 768)
        assert sample.report_ids[0] == 1  # <bos>
        assert len(sample.report_ids) == 20
        # keyword ids are canonical (sorted) regardless of manifest order
        assert list(sample.keywords.ids) == sorted(sample.keywords.ids)

    def test_vocab_from_train_split_only(self, tmp_path):
        manifest = _write_dataset(tmp_path, n=8)
        data = prepare_dataset(manifest, fractions=(0.5, 0.25, 0.25), seed=0)
        train_tokens = {t for s in data.train for t in s.report_tokens}
        for tok in train_tokens:
            assert data.vocab.encode_token(tok) >= 4


class TestSynth:
    def test_dataset_generates_and_validates(self, tmp_path):
        cfg = SynthConfig(n_samples=10, seed=7)
        manifest = generate_dataset(tmp_path / "ds", cfg)
        records = read_manifest(manifest)
        assert len(records) == 10
        data = prepare_dataset(manifest, fractions=(0.6, 0.2, 0.2), seed=0)
        assert len(data.train) == 6

    def test_images_reflect_visual_keywords(self):
        cfg = ImageConfig()
        with_marker = render_fundus("amber", ["macular edema"], cfg)
        without = render_fundus("amber", [], cfg)
        assert not np.array_equal(with_marker, without)
        # latent keywords never touch the image
        assert np.array_equal(render_fundus("amber", [], cfg), without)

    def test_rendering_deterministic(self):
        cfg = ImageConfig()
        a = render_fundus("pale", ["drusen deposits", "hard exudates"], cfg)
        b = render_fundus("pale", ["hard exudates", "drusen deposits"], cfg)
        assert np.array_equal(a, b)

    def test_report_composition(self):
        text = compose_report("amber", ["macular edema", "followup advised"], False)
        assert text.startswith("the fundus photograph demonstrates an amber retina .")
        assert "macular edema thickens" in text
        assert "followup" in text

    def test_long_reports_are_long_and_plan_depends_on_keywords(self):
        base = compose_report("tawny", [], True)
        assert len(tokenize(base)) >= 40
        assert base.endswith("the plan is routine review .")
        urgent = compose_report("tawny", ["followup advised"], True)
        assert urgent.endswith("the plan is urgent review .")
        early = compose_report("tawny", ["retinal hemorrhage"], True)
        assert early.endswith("the plan is early review .")

    def test_prefix_stability(self, tmp_path):
        small = generate_dataset(tmp_path / "small", SynthConfig(n_samples=4, seed=3))
        big = generate_dataset(tmp_path / "big", SynthConfig(n_samples=8, seed=3))
        small_lines = small.read_text().splitlines()
        big_lines = big.read_text().splitlines()
        for a, b in zip(small_lines[1:], big_lines[1 : len(small_lines)]):
            assert json.loads(a)["description"] == json.loads(b)["description"]

    def test_keyword_cap(self, tmp_path):
        manifest = generate_dataset(
            tmp_path / "ds",
            SynthConfig(n_samples=40, seed=1, visual_rate=0.9, latent_rate=0.9),
        )
        for rec in read_manifest(manifest):
            assert len(rec.keyword_labels) <= 4

    def test_keyword_mix_present(self, tmp_path):
        manifest = generate_dataset(tmp_path / "ds", SynthConfig(n_samples=60, seed=2))
        seen = {k for rec in read_manifest(manifest) for k in rec.keyword_labels}
        assert seen & set(VISUAL_KEYWORDS)
        assert seen & set(LATENT_KEYWORDS)


class TestFeaturesToRaster:
    def test_inverts_the_patch_cut(self, tmp_path):
        from PIL import Image

        from retinagen.data import features_to_raster, load_image_features

        cfg = ImageConfig(size=8, patch=4, channels=3)
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        path = tmp_path / "img.png"
        Image.fromarray(pixels).save(path)
        feats = load_image_features(path, cfg)
        assert np.array_equal(features_to_raster(feats, cfg), pixels)

    def test_grayscale_replicates_channels(self):
        from retinagen.data import features_to_raster

        cfg = ImageConfig(size=8, patch=4, channels=1)
        feats = np.full((cfg.regions, cfg.region_dim), 0.5)
        raster = features_to_raster(feats, cfg)
        assert raster.shape == (8, 8, 3)
        assert np.all(raster[:, :, 0] == raster[:, :, 2])

    def test_shape_mismatch_rejected(self):
        from retinagen.data import features_to_raster
        from retinagen.errors import DataError

        cfg = ImageConfig(size=8, patch=4, channels=1)
        with pytest.raises(DataError):
            features_to_raster(np.zeros((3, 3)), cfg)
