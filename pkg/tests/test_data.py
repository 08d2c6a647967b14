"""Container round-trips, format guards, and the synthetic benchmark."""

import json
import struct

import numpy as np
import pytest

from smile_mil import data as smdata
from smile_mil.data import (
    BadMagicError,
    BagDataset,
    ChecksumMismatchError,
    FeatureBag,
    SynthConfig,
    TruncatedFileError,
    UnsupportedVersionError,
    load_dataset,
    save_dataset,
    synth_generate,
    synth_generate_with_witnesses,
)


def _toy_dataset():
    rng = np.random.default_rng(11)
    bags = [
        FeatureBag(f"b{i}", rng.standard_normal((3 + i, 4)).astype(np.float32).astype(np.float64), i % 2)
        for i in range(6)
    ]
    return BagDataset(bags, 4, provenance="synthetic")


class TestContainer:
    def test_round_trip_is_bitwise(self, tmp_path):
        ds = _toy_dataset()
        path = tmp_path / "toy.milb"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.provenance == "synthetic"
        assert back.feature_dim == ds.feature_dim
        assert [b.bag_id for b in back.bags] == [b.bag_id for b in ds.bags]
        assert [b.label for b in back.bags] == [b.label for b in ds.bags]
        for a, b in zip(ds.bags, back.bags):
            assert np.array_equal(a.features, b.features)

    def test_sidecar_is_optional(self, tmp_path):
        ds = _toy_dataset()
        path = tmp_path / "toy.milb"
        save_dataset(ds, path)
        (tmp_path / "toy.json").unlink()
        back = load_dataset(path)
        assert back.provenance == "external"
        assert len(back) == len(ds)

    def test_empty_dataset_round_trips(self, tmp_path):
        ds = BagDataset([], 16, provenance="synthetic")
        path = tmp_path / "empty.milb"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert len(back) == 0
        assert back.feature_dim == 16

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.milb"
        save_dataset(_toy_dataset(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_dataset(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "ver.milb"
        save_dataset(_toy_dataset(), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        # rewrite the checksum so only the version is at fault
        raw[-4:] = struct.pack("<I", __import__("zlib").crc32(bytes(raw[:-4])) & 0xFFFFFFFF)
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_dataset(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "trunc.milb"
        save_dataset(_toy_dataset(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            load_dataset(path)

    def test_corrupted_payload_fails_checksum(self, tmp_path):
        path = tmp_path / "corrupt.milb"
        save_dataset(_toy_dataset(), path)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatchError):
            load_dataset(path)

    def test_checkpoint_version_not_a_dataset(self, tmp_path):
        path = tmp_path / "ckpt.milb"
        smdata.write_container(path, 1, [("w", 0, np.zeros((2, 1)))], version=2)
        with pytest.raises(UnsupportedVersionError):
            load_dataset(path)

    def test_float64_container_round_trip(self, tmp_path):
        path = tmp_path / "v2.milb"
        tensor = np.random.default_rng(5).standard_normal((3, 1))
        smdata.write_container(path, 1, [("w", 0, tensor)], version=2)
        version, dim, records = smdata.read_container(path)
        assert version == 2 and dim == 1
        assert np.array_equal(records[0][2], tensor)


class TestImportManifest:
    def test_import_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        entries = []
        for i in range(3):
            mat = rng.standard_normal((2 + i, 5)).astype("<f4")
            fname = f"bag_{i}.bin"
            (tmp_path / fname).write_bytes(mat.tobytes())
            entries.append({"id": f"bag_{i}", "file": fname, "label": i % 2})
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"feature_dim": 5, "bags": entries}))
        ds = smdata.import_feature_dir(manifest)
        assert ds.feature_dim == 5
        assert [b.bag_id for b in ds.bags] == ["bag_0", "bag_1", "bag_2"]
        assert ds.bags[1].n_instances == 3

    def test_import_rejects_ragged_file(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"\x00" * 10)
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"feature_dim": 3, "bags": [{"id": "x", "file": "bad.bin", "label": 0}]}))
        with pytest.raises(smdata.DataFormatError):
            smdata.import_feature_dir(manifest)


class TestSynthGenerator:
    def test_every_positive_bag_has_a_witness(self):
        cfg = SynthConfig(n_bags=80, bag_size_range=(1, 8), witness_rate=0.01, seed=3)
        ds, witnesses = synth_generate_with_witnesses(cfg)
        for bag in ds.bags:
            count = len(witnesses[bag.bag_id])
            if bag.label == 1:
                assert count >= 1
            else:
                assert count == 0

    def test_witness_rows_carry_the_shift(self):
        cfg = SynthConfig(n_bags=60, separation=4.0, seed=9)
        ds, witnesses = synth_generate_with_witnesses(cfg)
        # recover the planted direction the same way the generator derives it
        rng = np.random.default_rng(cfg.seed)
        direction = rng.standard_normal(cfg.feature_dim)
        direction /= np.sqrt(np.mean(direction ** 2))
        unit = direction / np.linalg.norm(direction)
        w_proj, rest_proj = [], []
        for bag in ds.bags:
            proj = bag.features @ unit
            idx = witnesses[bag.bag_id]
            w_proj.extend(proj[idx])
            mask = np.ones(len(proj), dtype=bool)
            mask[idx] = False
            rest_proj.extend(proj[mask])
        assert np.mean(w_proj) > np.mean(rest_proj) + 2.0

    def test_class_counts_match_fraction(self):
        cfg = SynthConfig(n_bags=101, pos_fraction=0.3, seed=1)
        pos, neg = synth_generate(cfg).class_counts()
        assert abs(pos - 101 * 0.3) <= 1
        assert pos + neg == 101

    def test_determinism_bytes(self, tmp_path):
        cfg = SynthConfig(n_bags=40, seed=21)
        a, b = tmp_path / "a.milb", tmp_path / "b.milb"
        save_dataset(synth_generate(cfg), a)
        save_dataset(synth_generate(cfg), b)
        assert a.read_bytes() == b.read_bytes()

    def test_bag_sizes_respect_range(self):
        cfg = SynthConfig(n_bags=50, bag_size_range=(4, 9), seed=2)
        ds = synth_generate(cfg)
        sizes = [bag.n_instances for bag in ds.bags]
        assert min(sizes) >= 4 and max(sizes) <= 9

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(n_bags=1)
        with pytest.raises(ValueError):
            SynthConfig(pos_fraction=0.0)
        with pytest.raises(ValueError):
            SynthConfig(bag_size_range=(0, 5))
        with pytest.raises(ValueError):
            SynthConfig(witness_rate=0.0)
        with pytest.raises(ValueError):
            SynthConfig(separation=-0.1)

    def test_mean_pooled_probe_finds_signal(self):
        # the benchmark must be learnable even by a linear probe on bag means
        sklearn = pytest.importorskip("sklearn")
        from sklearn.linear_model import LogisticRegression
        from sklearn.metrics import roc_auc_score

        ds = synth_generate(SynthConfig())
        X = np.array([bag.features.mean(axis=0) for bag in ds.bags])
        y = ds.labels()
        rng = np.random.default_rng(0)
        idx = rng.permutation(len(y))
        tr, te = idx[:350], idx[350:]
        clf = LogisticRegression(max_iter=2000).fit(X[tr], y[tr])
        assert roc_auc_score(y[te], clf.decision_function(X[te])) > 0.7


class TestValidation:
    def test_mismatched_dim_rejected(self):
        with pytest.raises(ValueError):
            BagDataset([FeatureBag("a", np.zeros((2, 3)), 0)], 4)

    def test_duplicate_ids_rejected(self):
        bags = [FeatureBag("a", np.zeros((1, 2)), 0), FeatureBag("a", np.zeros((1, 2)), 1)]
        with pytest.raises(ValueError):
            BagDataset(bags, 2)

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError):
            FeatureBag("a", np.zeros((1, 2)), 2)
