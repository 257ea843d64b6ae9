"""Exporter tests: layer defaults, fraction oracle, primary-format validation."""

import numpy as np
import pytest
from PIL import Image

from adp_exporter import backbones, cli
from adp_exporter.export import ExportConfig, export_dataset, patch_fractions

from adp import store  # the training engine validates what we write


def write_images(tmp_path, n=3, size=64, with_masks=True, full_mask_index=None):
    images = tmp_path / "images"
    masks = tmp_path / "masks"
    images.mkdir()
    masks.mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
        Image.fromarray(arr).save(images / f"im{i}.png")
        if with_masks and i % 2 == 1:
            mask = np.zeros((size, size), dtype=np.uint8)
            if full_mask_index is not None and i == full_mask_index:
                mask[:] = 255
            else:
                mask[10:30, 5:25] = 255
            Image.fromarray(mask).save(masks / f"im{i}.png")
    return images, masks


def tiny_config(**kw):
    defaults = dict(backbone="dinov2-base", image_size=64, random_init=True,
                    test_width=32, seed=5)
    defaults.update(kw)
    return ExportConfig(**defaults)


class TestLayerDefaults:
    def test_twelve_layer_backbones_use_3_6_9_12(self):
        assert backbones.default_layers(12) == (3, 6, 9, 12)

    def test_deeper_models(self):
        assert backbones.default_layers(24) == (6, 12, 18, 24)
        assert backbones.default_layers(32) == (8, 16, 24, 32)

    def test_unknown_backbone_rejected(self):
        with pytest.raises(ValueError, match="unavailable backbone"):
            backbones.load_backbone("resnet-50", random_init=True)

    def test_backbone_without_weights_rejected(self):
        with pytest.raises(ValueError, match="unavailable backbone"):
            backbones.load_backbone("dinov2-base")

    def test_imagebind_unavailable(self):
        with pytest.raises(ValueError, match="imagebind"):
            backbones.load_backbone("imagebind", random_init=True)


class TestPatchFractions:
    def brute_force(self, mask, grid):
        h, w = mask.shape
        ch, cw = h // grid, w // grid
        out = np.zeros((grid, grid), dtype=np.float64)
        for y in range(grid):
            for x in range(grid):
                total = 0.0
                for yy in range(y * ch, (y + 1) * ch):
                    for xx in range(x * cw, (x + 1) * cw):
                        total += mask[yy, xx]
                out[y, x] = total / (ch * cw)
        return out

    def test_matches_pixel_mean_oracle_exactly(self):
        rng = np.random.default_rng(1)
        mask = (rng.uniform(size=(64, 64)) < 0.3).astype(np.float32)
        got = patch_fractions(mask, 4)
        np.testing.assert_array_equal(got, self.brute_force(mask, 4).astype(np.float32))

    def test_full_mask_gives_all_ones(self):
        np.testing.assert_array_equal(patch_fractions(np.ones((32, 32)), 2),
                                      np.ones((2, 2), dtype=np.float32))

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            patch_fractions(np.zeros((30, 30)), 4)


class TestExportDataset:
    def test_records_pass_primary_validation(self, tmp_path):
        images, masks = write_images(tmp_path)
        manifest_path = export_dataset(images, masks, "train", "widget",
                                       tmp_path / "out", tiny_config())
        manifest = store.load_manifest(manifest_path)
        assert len(manifest.entries) == 3
        for entry in manifest.entries:
            record = manifest.load(entry)  # read_record + label consistency
            assert len(record.levels) == 4  # default 12-layer rule exports 4 levels
            assert record.levels[0].shape == (4, 4, 32)  # 64px / 16px patches
            assert record.augmented_levels is not None
            assert record.anomaly_fraction_maps is not None

    def test_normal_image_all_zero_fractions_label_zero(self, tmp_path):
        images, masks = write_images(tmp_path, n=1, with_masks=False)
        manifest_path = export_dataset(images, None, "test", "widget",
                                       tmp_path / "out", tiny_config())
        manifest = store.load_manifest(manifest_path)
        record = manifest.load(manifest.entries[0])
        assert record.image_label == 0
        assert all(m.max() == 0.0 for m in record.anomaly_fraction_maps)

    def test_full_image_mask_gives_all_ones(self, tmp_path):
        images, masks = write_images(tmp_path, n=2, full_mask_index=1)
        manifest_path = export_dataset(images, masks, "test", "widget",
                                       tmp_path / "out", tiny_config(augment=False))
        manifest = store.load_manifest(manifest_path)
        abnormal = [e for e in manifest.entries if e.image_label == 1]
        record = manifest.load(abnormal[0])
        for m in record.anomaly_fraction_maps:
            np.testing.assert_array_equal(m, 1.0)

    def test_test_split_has_no_augmented_twins(self, tmp_path):
        images, masks = write_images(tmp_path)
        manifest_path = export_dataset(images, masks, "test", "widget",
                                       tmp_path / "out", tiny_config())
        manifest = store.load_manifest(manifest_path)
        for entry in manifest.entries:
            assert manifest.load(entry).augmented_levels is None

    def test_fixed_seed_is_byte_identical(self, tmp_path):
        images, masks = write_images(tmp_path)
        for name in ("a", "b"):
            export_dataset(images, masks, "train", "widget", tmp_path / name,
                           tiny_config())
        a_files = sorted((tmp_path / "a").glob("*.adfr"))
        b_files = sorted((tmp_path / "b").glob("*.adfr"))
        assert [p.read_bytes() for p in a_files] == [p.read_bytes() for p in b_files]

    def test_mask_size_mismatch_rejected(self, tmp_path):
        images, masks = write_images(tmp_path, n=2)
        bad = np.zeros((32, 32), dtype=np.uint8)
        Image.fromarray(bad).save(masks / "im1.png")  # smaller than the image
        with pytest.raises(ValueError, match="does not match"):
            export_dataset(images, masks, "train", "widget", tmp_path / "out",
                           tiny_config())

    def test_layer_out_of_range_rejected(self, tmp_path):
        images, masks = write_images(tmp_path, n=1, with_masks=False)
        with pytest.raises(ValueError, match="out of range"):
            export_dataset(images, None, "train", "widget", tmp_path / "out",
                           tiny_config(layers=(3, 14)))

    def test_manifest_rejects_duplicate_appends(self, tmp_path):
        images, _ = write_images(tmp_path, n=1, with_masks=False)
        export_dataset(images, None, "train", "widget", tmp_path / "out", tiny_config())
        with pytest.raises(ValueError, match="already lists"):
            export_dataset(images, None, "train", "widget", tmp_path / "out",
                           tiny_config())


class TestExporterCli:
    def test_end_to_end_cli(self, tmp_path, capsys):
        images, masks = write_images(tmp_path)
        code = cli.run(["--backbone", "dinov2-base", "--images", str(images),
                        "--masks", str(masks), "--split", "train",
                        "--class-id", "widget", "--out", str(tmp_path / "out"),
                        "--image-size", "64", "--random-init", "--seed", "3"])
        assert code == 0
        out = capsys.readouterr().out
        assert "wrote" in out
        manifest = store.load_manifest(tmp_path / "out" / "manifest.jsonl")
        assert len(manifest.entries) == 3

    def test_error_exits_nonzero(self, tmp_path, capsys):
        code = cli.run(["--images", str(tmp_path / "missing"), "--split", "train",
                        "--out", str(tmp_path / "out"), "--random-init"])
        assert code == 1
        assert "error:" in capsys.readouterr().err
