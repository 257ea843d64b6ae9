"""Synthetic generator and training-loop tests."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from adp import pretrain, store, synthetic
from adp.losses import LossConfig
from adp.projector import ProjectorConfig
from adp.pretrain import TrainConfig
from adp.synthetic import SyntheticSpec


def tiny_spec(**kw):
    defaults = dict(classes=2, train_per_class=10, reference_per_class=4,
                    test_per_class=4, abnormal_fraction=0.5,
                    level_dims=((6, 6, 8),), anomaly_offset_sigma=6.0, seed=7)
    defaults.update(kw)
    return SyntheticSpec(**defaults)


def tiny_config(**kw):
    defaults = dict(batch_size=5, epochs=2, learning_rate=3e-3, seed=11,
                    k_choices=(1, 2, 4),
                    projector=ProjectorConfig(n_r=16, n_heads=2, init_seed=0),
                    loss=LossConfig())
    defaults.update(kw)
    return TrainConfig(**defaults)


def dir_digest(path: Path) -> str:
    digest = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


class TestSyntheticGenerator:
    def test_zero_anomaly_rate_gives_all_normal(self, tmp_path):
        spec = tiny_spec(abnormal_fraction=0.0)
        manifest = store.load_manifest(synthetic.generate_synthetic(spec, tmp_path))
        assert all(e.image_label == 0 for e in manifest.entries)
        for e in manifest.entries[:5]:
            rec = manifest.load(e)
            for m in rec.anomaly_fraction_maps:
                assert m.max() == 0.0

    def test_fixed_seed_is_byte_identical(self, tmp_path):
        spec = tiny_spec()
        synthetic.generate_synthetic(spec, tmp_path / "a")
        synthetic.generate_synthetic(spec, tmp_path / "b")
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")

    def test_split_sizes_and_augmented_presence(self, tmp_path):
        spec = tiny_spec()
        manifest = store.load_manifest(synthetic.generate_synthetic(spec, tmp_path))
        assert len(manifest.split("train")) == 2 * spec.train_per_class
        assert len(manifest.split("reference")) == 2 * spec.reference_per_class
        assert len(manifest.split("test")) == 2 * spec.test_per_class
        train_rec = manifest.load(manifest.split("train")[0])
        assert train_rec.augmented_levels is not None
        test_rec = manifest.load(manifest.split("test")[0])
        assert test_rec.augmented_levels is None

    def test_abnormal_records_have_planted_regions(self, tmp_path):
        spec = tiny_spec()
        manifest = store.load_manifest(synthetic.generate_synthetic(spec, tmp_path))
        abnormal = [e for e in manifest.split("test") if e.image_label == 1]
        rec = manifest.load(abnormal[0])
        frac = rec.anomaly_fraction_maps[0]
        assert frac.max() == 1.0 and frac.min() == 0.0

    def test_spec_text_round_trip(self):
        text = "classes=3\ntrain_per_class=5\nlevel_dims=4x4x8,2x2x8\nseed=9\n"
        spec = synthetic.parse_synthetic_spec(text)
        assert spec.classes == 3
        assert spec.level_dims == ((4, 4, 8), (2, 2, 8))
        with pytest.raises(ValueError, match="unknown key"):
            synthetic.parse_synthetic_spec("bogus=1\n")


class TestTrainConfig:
    def test_epochs_zero_rejected(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0)

    def test_batch_size_one_rejected(self):
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(batch_size=1)

    def test_defaults_match_published_settings(self):
        resolved = pretrain.resolved_config(TrainConfig())
        assert resolved["tau"] == 0.15
        assert resolved["delta_r"] == 0.75
        assert resolved["lambda"] == 1.0
        assert resolved["r"] == 0.4
        assert resolved["n_r"] == 2048
        assert resolved["batch_size"] == 32
        assert resolved["learning_rate"] == 1e-4
        assert resolved["epochs"] == 10
        assert resolved["seed"] == 42
        assert resolved["k_choices"] == "1,4,8"
        assert resolved["align_grid_size"] == 5
        assert resolved["align_centers_per_cell"] == 5
        assert resolved["reference_count"] == 8

    def test_config_text_round_trip(self):
        cfg = tiny_config()
        text = "\n".join(f"{k}={v}" for k, v in pretrain.resolved_config(cfg).items()
                         if k not in ("reference_count", "align_grid_size",
                                      "align_centers_per_cell"))
        parsed = pretrain.parse_config(text)
        assert pretrain.resolved_config(parsed) == pretrain.resolved_config(cfg)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown key"):
            pretrain.parse_config("not_a_key=3\n")


class TestPretrain:
    def make_dataset(self, tmp_path, **spec_kw):
        manifest_path = synthetic.generate_synthetic(tiny_spec(**spec_kw), tmp_path)
        return store.load_manifest(manifest_path)

    def test_loss_decreases_on_two_cluster_data(self, tmp_path):
        manifest = self.make_dataset(tmp_path)
        cfg = tiny_config(epochs=10)
        state, history = pretrain.pretrain(manifest, cfg)
        assert len(history) >= 30
        first = np.mean([h["total"] for h in history[:4]])
        last = np.mean([h["total"] for h in history[-4:]])
        assert last < first

    def test_two_runs_are_bit_identical(self, tmp_path):
        manifest = self.make_dataset(tmp_path / "data")
        cfg = tiny_config()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        pretrain.pretrain(manifest, cfg, out_path=p1)
        pretrain.pretrain(manifest, cfg, out_path=p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        manifest = self.make_dataset(tmp_path / "data")
        full_cfg = tiny_config(epochs=4)
        ckpt_full = tmp_path / "full.ckpt"
        _, history_full = pretrain.pretrain(manifest, full_cfg, out_path=ckpt_full)

        half_cfg = tiny_config(epochs=2)
        ckpt_half = tmp_path / "half.ckpt"
        pretrain.pretrain(manifest, half_cfg, out_path=ckpt_half)
        ckpt_resumed = tmp_path / "resumed.ckpt"
        _, history_resumed = pretrain.pretrain(manifest, full_cfg, out_path=ckpt_resumed,
                                               resume_from=ckpt_half)
        # continued losses equal the uninterrupted run's tail bit-exactly
        tail = [h["total"] for h in history_full if h["epoch"] >= 2]
        resumed = [h["total"] for h in history_resumed]
        assert resumed == tail
        assert ckpt_resumed.read_bytes() == ckpt_full.read_bytes()

    def test_resume_with_different_config_rejected(self, tmp_path):
        manifest = self.make_dataset(tmp_path / "data")
        ckpt = tmp_path / "c.ckpt"
        pretrain.pretrain(manifest, tiny_config(epochs=1), out_path=ckpt)
        with pytest.raises(ValueError, match="differs"):
            pretrain.pretrain(manifest, tiny_config(epochs=2, learning_rate=1e-2),
                              resume_from=ckpt)

    def test_missing_augmented_twin_names_record(self, tmp_path):
        manifest = self.make_dataset(tmp_path)
        entry = manifest.split("train")[0]
        rec = manifest.load(entry)
        rec.augmented_levels = None
        store.write_record(rec, manifest.resolve(entry))
        with pytest.raises(ValueError, match=rec.image_id):
            pretrain.pretrain(manifest, tiny_config())

    def test_empty_train_split_rejected(self, tmp_path):
        manifest_path = synthetic.generate_synthetic(tiny_spec(), tmp_path)
        manifest = store.load_manifest(manifest_path)
        manifest.entries = [e for e in manifest.entries if e.split != "train"]
        store.save_manifest(manifest, tmp_path / "no_train.jsonl")
        with pytest.raises(ValueError, match="train split"):
            pretrain.pretrain(store.load_manifest(tmp_path / "no_train.jsonl"),
                              tiny_config())

    def test_checkpoint_round_trip_preserves_state(self, tmp_path):
        manifest = self.make_dataset(tmp_path / "data")
        ckpt = tmp_path / "c.ckpt"
        state, _ = pretrain.pretrain(manifest, tiny_config(epochs=1), out_path=ckpt)
        loaded = pretrain.load_checkpoint(ckpt)
        assert loaded.epochs_done == 1
        assert loaded.levels == state.levels
        for lvl in state.levels:
            for name, arr in state.params[lvl].arrays.items():
                np.testing.assert_array_equal(loaded.params[lvl].arrays[name], arr)
            np.testing.assert_array_equal(loaded.centers[lvl].center,
                                          state.centers[lvl].center)
        # saving the loaded state reproduces the same bytes
        ckpt2 = tmp_path / "c2.ckpt"
        pretrain.save_checkpoint(loaded, ckpt2)
        assert ckpt2.read_bytes() == ckpt.read_bytes()

    def test_epoch_center_mode_runs(self, tmp_path):
        manifest = self.make_dataset(tmp_path)
        cfg = tiny_config(epochs=1, center_mode="epoch")
        state, history = pretrain.pretrain(manifest, cfg)
        assert history
        for lvl in state.levels:
            assert state.centers[lvl].initialized
