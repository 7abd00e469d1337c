import json

import numpy as np
import pytest

from mfdcd import datakit as dk
from mfdcd.errors import ContractViolation, FormatError


class TestTaxonomy:
    def test_class_table(self):
        assert dk.NUM_CLASSES == 12
        assert dk.CLASS_NAMES[0] == "background"
        table = dk.transition_table()
        assert table[2].name == "water -> bridge"
        assert table[2].from_category == "water"
        assert table[2].to_category == "bridge"
        for row in table[1:]:
            assert row.from_category in dk.CATEGORIES
            assert row.to_category in dk.CATEGORIES

    def test_palette_covers_categories(self):
        assert set(dk.PALETTE) == set(dk.CATEGORIES)


class TestGenScene:
    def test_deterministic(self):
        a = dk.gen_scene(42, 256)
        b = dk.gen_scene(42, 256)
        np.testing.assert_array_equal(a.t1, b.t1)
        np.testing.assert_array_equal(a.t2, b.t2)
        np.testing.assert_array_equal(a.label, b.label)

    def test_seed_changes_scene(self):
        a = dk.gen_scene(1, 256)
        b = dk.gen_scene(2, 256)
        assert not np.array_equal(a.t1, b.t1)

    def test_shapes_and_dtypes(self):
        pair = dk.gen_scene(0, 128)
        assert pair.t1.shape == (3, 128, 128) and pair.t1.dtype == np.uint8
        assert pair.t2.shape == (3, 128, 128)
        assert pair.label.shape == (128, 128) and pair.label.dtype == np.uint8
        assert pair.label.max() < dk.NUM_CLASSES

    def test_changed_regions_present(self):
        pair = dk.gen_scene(5, 256)
        assert (pair.label != 0).any()

    def test_background_appearance_shift_is_bounded(self):
        # the acquisitions differ in cast/illumination/pseudo-changes, but the
        # background stays the same category: the shift is label-free and
        # bounded well below a palette transition
        pair = dk.gen_scene(9, 256)
        cfg = dk.GenConfig()
        bg = pair.label == 0
        d = pair.t1[:, bg].astype(np.int64) - pair.t2[:, bg].astype(np.int64)
        assert abs(d.mean()) < 2 * cfg.cast + cfg.pseudo_delta

    def test_background_unchanged_without_acquisition_effects(self):
        # with casts and pseudo-changes off the phases share the palette, so
        # the background difference is centered on zero
        cfg = dk.GenConfig(cast=0.0, max_pseudo_regions=0)
        pair = dk.gen_scene(9, 256, config=cfg)
        bg = pair.label == 0
        d = pair.t1[:, bg].astype(np.int64) - pair.t2[:, bg].astype(np.int64)
        assert abs(d.mean()) < 2.0

    def test_degenerate_mix_single_class(self):
        mix = np.zeros(11)
        mix[2] = 1.0  # only "water -> road"
        pair = dk.gen_scene(3, 256, transition_mix=mix)
        present = set(np.unique(pair.label)) - {0}
        assert present == {3}

    def test_invalid_mix(self):
        with pytest.raises(ContractViolation):
            dk.gen_scene(0, 256, transition_mix=np.zeros(11))
        with pytest.raises(ContractViolation):
            dk.gen_scene(0, 256, transition_mix=np.ones(5))

    def test_bad_size(self):
        with pytest.raises(ContractViolation):
            dk.gen_scene(0, 100)

    def test_area_budget(self):
        fracs = [np.mean(dk.gen_scene(s, 256).label != 0) for s in range(40)]
        budget = dk.GenConfig().area_budget
        assert 0.8 * budget <= np.mean(fracs) <= 1.2 * budget


class TestTile:
    def test_512_gives_four(self):
        pair = dk.gen_scene(0, 512)
        tiles = dk.tile(pair, 256)
        assert len(tiles) == 4
        assert sorted(t.id for t in tiles) == [
            f"{pair.id}_y{gy}x{gx}" for gy in (0, 1) for gx in (0, 1)]
        recon = np.block([[tiles[0].label, tiles[1].label],
                          [tiles[2].label, tiles[3].label]])
        np.testing.assert_array_equal(recon, pair.label)

    def test_256_identity(self):
        pair = dk.gen_scene(1, 256)
        tiles = dk.tile(pair, 256)
        assert len(tiles) == 1
        np.testing.assert_array_equal(tiles[0].t1, pair.t1)

    def test_remainder_dropped(self):
        pair = dk.gen_scene(2, 320)
        assert len(dk.tile(pair, 256)) == 1

    def test_scene_too_small(self):
        pair = dk.gen_scene(3, 128)
        with pytest.raises(ContractViolation):
            dk.tile(pair, 256)


class TestRasterIO:
    def test_u8_round_trip(self, tmp_path):
        data = np.random.default_rng(0).integers(0, 255, (3, 10, 12), dtype=np.uint8)
        path = tmp_path / "a.rbr"
        dk.write_raster(path, data)
        np.testing.assert_array_equal(dk.read_raster(path), data)

    def test_f32_round_trip(self, tmp_path):
        data = np.random.default_rng(1).standard_normal((2, 5, 7)).astype(np.float32)
        path = tmp_path / "b.rbr"
        dk.write_raster(path, data)
        np.testing.assert_array_equal(dk.read_raster(path), data)

    def test_2d_promoted(self, tmp_path):
        data = np.arange(12, dtype=np.uint8).reshape(3, 4)
        path = tmp_path / "c.rbr"
        dk.write_raster(path, data)
        assert dk.read_raster(path).shape == (1, 3, 4)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.rbr"
        path.write_bytes(b"JUNK" + b"\0" * 20)
        with pytest.raises(FormatError, match="magic"):
            dk.read_raster(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "e.rbr"
        dk.write_raster(path, np.zeros((1, 4, 4), dtype=np.uint8))
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="bytes"):
            dk.read_raster(path)

    def test_dtype_enforced(self, tmp_path):
        path = tmp_path / "f.rbr"
        dk.write_raster(path, np.zeros((1, 4, 4), dtype=np.float32))
        with pytest.raises(FormatError, match="required"):
            dk.read_raster(path, expect_dtype=np.uint8)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(FormatError):
            dk.write_raster(tmp_path / "g.rbr", np.zeros((1, 2, 2), dtype=np.int32))

    def test_ppm_pgm_headers(self, tmp_path):
        dk.write_ppm(tmp_path / "img.ppm", np.zeros((3, 4, 6), dtype=np.uint8))
        raw = (tmp_path / "img.ppm").read_bytes()
        assert raw.startswith(b"P6\n6 4\n255\n")
        assert len(raw) == len(b"P6\n6 4\n255\n") + 3 * 4 * 6
        dk.write_pgm(tmp_path / "img.pgm", np.zeros((4, 6), dtype=np.uint8))
        assert (tmp_path / "img.pgm").read_bytes().startswith(b"P5\n6 4\n255\n")


class TestManifestAndCorpus:
    def test_corpus_round_trip(self, tmp_path):
        manifest = dk.generate_corpus(tmp_path, seed=7, train_scenes=3,
                                      test_scenes=2, size=128)
        assert len(manifest.split("train")) == 3
        assert len(manifest.split("test")) == 2
        back = dk.read_manifest(tmp_path / "manifest.json")
        assert [e.id for e in back.entries] == [e.id for e in manifest.entries]
        pair = dk.load_pair(tmp_path, back.entries[0])
        assert pair.t1.shape == (3, 128, 128)
        assert pair.label.shape == (128, 128)

    def test_corpus_deterministic(self, tmp_path):
        dk.generate_corpus(tmp_path / "a", seed=7, train_scenes=2, test_scenes=1,
                           size=128)
        dk.generate_corpus(tmp_path / "b", seed=7, train_scenes=2, test_scenes=1,
                           size=128)
        for rel in ["manifest.json", "rasters/train0000_t1.rbr",
                    "rasters/test0002_label.rbr"]:
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes()

    def test_manifest_duplicate_id(self, tmp_path):
        doc = {"classes": dk.CLASS_NAMES,
               "entries": [{"id": "x", "t1_path": "a", "t2_path": "b",
                            "label_path": "c", "split": "train"}] * 2}
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(FormatError, match="duplicate"):
            dk.read_manifest(path)

    def test_manifest_bad_split(self, tmp_path):
        doc = {"classes": dk.CLASS_NAMES,
               "entries": [{"id": "x", "t1_path": "a", "t2_path": "b",
                            "label_path": "c", "split": "val"}]}
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(FormatError, match="split"):
            dk.read_manifest(path)

    def test_manifest_invalid_json(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{nope")
        with pytest.raises(FormatError):
            dk.read_manifest(path)


class TestStats:
    def test_histogram_oracle(self, tmp_path):
        manifest = dk.generate_corpus(tmp_path, seed=3, train_scenes=2,
                                      test_scenes=1, size=128)
        doc = dk.stats(manifest, tmp_path)
        ref = np.zeros(dk.NUM_CLASSES, dtype=np.int64)
        for entry in manifest.split("train"):
            label = dk.load_pair(tmp_path, entry).label
            for v in label.ravel():
                ref[v] += 1
        np.testing.assert_array_equal(doc["train"]["pixel_counts"], ref)
        assert doc["train"]["total_pixels"] == int(ref.sum())
        text = dk.stats_text(doc)
        assert "background" in text and "water -> bridge" in text
