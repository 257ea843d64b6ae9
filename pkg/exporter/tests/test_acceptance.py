"""Exporter acceptance: depth-default layers, primary validation, oracle."""

import contextlib

import numpy as np

from adp_exporter import backbones
from adp_exporter.export import export_dataset, patch_fractions

from adp import store

from test_exporter import tiny_config, write_images
from test_exporter import TestPatchFractions


@contextlib.contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} FAIL: {description}")
        raise
    print(f"ACCEPTANCE {number} PASS: {description}")


def test_10_exporter_contract(tmp_path):
    with criterion(10, "12-layer exports use layers [3,6,9,12], validate, match oracle"):
        assert backbones.default_layers(12) == (3, 6, 9, 12)

        images, masks = write_images(tmp_path)
        manifest_path = export_dataset(images, masks, "train", "widget",
                                       tmp_path / "out", tiny_config())
        manifest = store.load_manifest(manifest_path)
        assert manifest.entries
        for entry in manifest.entries:
            record = manifest.load(entry)  # primary read_record validation
            assert len(record.levels) == 4  # one level per default layer

        oracle = TestPatchFractions().brute_force
        rng = np.random.default_rng(9)
        mask = (rng.uniform(size=(64, 64)) < 0.4).astype(np.float32)
        got = patch_fractions(mask, 4)
        np.testing.assert_array_equal(got, oracle(mask, 4).astype(np.float32))
