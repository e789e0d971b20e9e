from __future__ import annotations

import numpy as np
import pytest
import torch

from gompertz_kd.data import (
    DatasetSpec,
    SyntheticSpec,
    load_dataset,
    make_synthetic,
    stratified_subset_indices,
    write_cifar_binary,
)
from gompertz_kd.errors import ConfigurationError, IngestError


def _write_mini_cifar10(root, per_file=400, seed=0):
    """Hand-rolled small CIFAR-10-format files (independent of the writer)."""
    rng = np.random.default_rng(seed)
    base = root / "cifar-10-batches-bin"
    base.mkdir(parents=True)
    for fname in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        recs = np.zeros((per_file, 3073), dtype=np.uint8)
        recs[:, 0] = np.tile(np.arange(10), per_file // 10)
        recs[:, 1:] = rng.integers(0, 256, size=(per_file, 3072), dtype=np.uint8)
        (base / fname).write_bytes(recs.tobytes())
    return base


class TestCifarIngestion:
    def test_reads_hand_written_records(self, tmp_path):
        _write_mini_cifar10(tmp_path)
        ds = load_dataset(DatasetSpec(name="cifar10", root=str(tmp_path), split="train"))
        assert len(ds) == 2000
        assert ds.num_classes == 10
        assert ds.images.shape == (2000, 3, 32, 32)
        assert ds.images.dtype == torch.float32
        np.testing.assert_array_equal(ds.class_counts(), [200] * 10)

    def test_pixel_layout_round_trip(self, tmp_path):
        # one known record: label 7, channel-major pixel ramp
        base = tmp_path / "cifar-10-batches-bin"
        base.mkdir()
        pixels = np.arange(3072, dtype=np.uint8)
        rec = np.concatenate([[np.uint8(7)], pixels])
        for fname in [f"data_batch_{i}.bin" for i in range(1, 6)]:
            (base / fname).write_bytes(rec.tobytes())
        (base / "test_batch.bin").write_bytes(rec.tobytes())
        spec = DatasetSpec(
            name="cifar10",
            root=str(tmp_path),
            split="train",
            normalization=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
        )
        ds = load_dataset(spec)
        assert int(ds.labels[0]) == 7
        expected = pixels.reshape(3, 32, 32).astype(np.float32) / 255.0
        np.testing.assert_allclose(ds.images[0].numpy(), expected, atol=1e-7)

    def test_truncated_file_reports_byte_offset(self, tmp_path):
        base = _write_mini_cifar10(tmp_path)
        path = base / "data_batch_3.bin"
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])  # cut into the final record
        with pytest.raises(IngestError) as exc:
            load_dataset(DatasetSpec(name="cifar10", root=str(tmp_path), split="train"))
        assert exc.value.byte_offset == (len(raw) - 100) // 3073 * 3073

    def test_out_of_range_label_reports_record(self, tmp_path):
        base = _write_mini_cifar10(tmp_path)
        path = base / "test_batch.bin"
        raw = bytearray(path.read_bytes())
        raw[5 * 3073] = 31  # label byte of record 5
        path.write_bytes(bytes(raw))
        with pytest.raises(IngestError) as exc:
            load_dataset(DatasetSpec(name="cifar10", root=str(tmp_path), split="test"))
        assert exc.value.byte_offset == 5 * 3073

    def test_missing_file(self, tmp_path):
        base = _write_mini_cifar10(tmp_path)
        (base / "data_batch_2.bin").unlink()
        with pytest.raises(IngestError):
            load_dataset(DatasetSpec(name="cifar10", root=str(tmp_path), split="train"))

    def test_cifar100_fine_label_is_second_byte(self, tmp_path):
        base = tmp_path / "cifar-100-binary"
        base.mkdir()
        rng = np.random.default_rng(1)
        for fname, n in (("train.bin", 300), ("test.bin", 100)):
            recs = np.zeros((n, 3074), dtype=np.uint8)
            recs[:, 0] = rng.integers(0, 20, size=n)  # coarse label, ignored
            recs[:, 1] = np.arange(n) % 100  # fine label
            recs[:, 2:] = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
            (base / fname).write_bytes(recs.tobytes())
        ds = load_dataset(DatasetSpec(name="cifar100", root=str(tmp_path), split="train"))
        assert ds.num_classes == 100
        assert int(ds.labels[17]) == 17

    def test_normalization_computed_from_train_and_cached(self, tmp_path):
        _write_mini_cifar10(tmp_path)
        spec = DatasetSpec(name="cifar10", root=str(tmp_path), split="train")
        ds = load_dataset(spec)
        arr = ds.images.numpy().astype(np.float64)
        assert np.all(np.abs(arr.mean(axis=(0, 2, 3))) < 0.05)
        assert np.all(np.abs(arr.std(axis=(0, 2, 3)) - 1.0) < 0.1)
        cache = tmp_path / "cifar-10-batches-bin" / "gkd-normalization-cifar10.json"
        assert cache.exists()
        # the test split standardizes with the cached *train* statistics
        test_ds = load_dataset(
            DatasetSpec(name="cifar10", root=str(tmp_path), split="test")
        )
        assert test_ds.normalization == ds.normalization

    def test_round_trip_through_writer(self, tmp_path):
        rng = np.random.default_rng(9)
        images = rng.integers(0, 256, size=(60000, 3, 32, 32), dtype=np.uint8)
        labels = np.tile(np.arange(10), 6000).astype(np.int64)
        write_cifar_binary(images, labels, tmp_path, "cifar10")
        train = load_dataset(
            DatasetSpec(name="cifar10", root=str(tmp_path), split="train")
        )
        test = load_dataset(DatasetSpec(name="cifar10", root=str(tmp_path), split="test"))
        assert len(train) == 50000 and len(test) == 10000
        np.testing.assert_array_equal(
            train.labels.numpy(), labels[:50000]
        )


class TestStratifiedSubsetting:
    def test_exact_size_and_balance(self, tmp_path):
        _write_mini_cifar10(tmp_path)
        spec = DatasetSpec(
            name="cifar10", root=str(tmp_path), split="train", subset_size=1000
        )
        ds = load_dataset(spec)
        assert len(ds) == 1000
        counts = ds.class_counts()
        assert counts.min() >= 99 and counts.max() <= 101
        assert counts.sum() == 1000

    def test_deterministic_in_spec(self, tmp_path):
        _write_mini_cifar10(tmp_path)
        spec = DatasetSpec(
            name="cifar10", root=str(tmp_path), split="train", subset_size=500,
            subset_seed=3,
        )
        a, b = load_dataset(spec), load_dataset(spec)
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.labels, b.labels)

    def test_different_seed_changes_draw(self, tmp_path):
        _write_mini_cifar10(tmp_path)
        base = dict(name="cifar10", root=str(tmp_path), split="train", subset_size=500)
        a = load_dataset(DatasetSpec(subset_seed=0, **base))
        b = load_dataset(DatasetSpec(subset_seed=1, **base))
        assert not torch.equal(a.images, b.images)

    def test_indices_function_directly(self):
        labels = np.repeat(np.arange(5), 40)
        idx = stratified_subset_indices(labels, 23, 5, "synthetic", "train", 7)
        assert idx.size == 23
        counts = np.bincount(labels[idx], minlength=5)
        assert counts.min() >= 23 // 5 and counts.max() <= 23 // 5 + 1
        assert np.all(np.diff(idx) > 0)

    def test_oversized_subset_rejected(self):
        labels = np.repeat(np.arange(2), 5)
        with pytest.raises(ConfigurationError):
            stratified_subset_indices(labels, 11, 2, "synthetic", "train", 0)


class TestSynthetic:
    def test_balanced_and_sized(self):
        ds = make_synthetic(2, 64, seed=0)
        assert len(ds) == 128
        np.testing.assert_array_equal(ds.class_counts(), [64, 64])

    def test_deterministic(self):
        a = make_synthetic(4, 32, seed=5)
        b = make_synthetic(4, 32, seed=5)
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.labels, b.labels)

    def test_seed_changes_data(self):
        a = make_synthetic(4, 32, seed=5)
        b = make_synthetic(4, 32, seed=6)
        assert not torch.equal(a.images, b.images)

    def test_loaded_synthetic_is_standardized_and_deterministic(self):
        syn = SyntheticSpec(num_classes=4, samples_per_class=128)
        spec = DatasetSpec(name="synthetic", split="train", synthetic=syn, subset_seed=7)
        a, b = load_dataset(spec), load_dataset(spec)
        assert torch.equal(a.images, b.images)
        arr = a.images.numpy().astype(np.float64)
        assert np.all(np.abs(arr.mean(axis=(0, 2, 3))) < 1e-6)
        assert np.all(np.abs(arr.std(axis=(0, 2, 3)) - 1.0) < 1e-5)
        test = load_dataset(
            DatasetSpec(name="synthetic", split="test", synthetic=syn, subset_seed=7)
        )
        assert len(test) == 4 * 64
        assert test.normalization == a.normalization

    @pytest.mark.slow
    def test_tiny_student_learns_it_fast(self):
        # easy-mode fixture contract: >90% test accuracy within 5 epochs
        from gompertz_kd.config import ExperimentConfig
        from gompertz_kd.schedule import ConstantSchedule
        from gompertz_kd.trainer import train

        syn = SyntheticSpec(num_classes=4, samples_per_class=64, test_samples_per_class=64)
        cfg = ExperimentConfig(
            train_data=DatasetSpec(name="synthetic", split="train", synthetic=syn),
            eval_data=DatasetSpec(name="synthetic", split="test", synthetic=syn),
            student_id="tiny_student",
            mode="student_only",
            epochs=5,
            schedule=ConstantSchedule(0.0),
            seed=0,
        )
        record = train(cfg)
        assert record.final_test_acc > 0.9


class TestDatasetSpecValidation:
    def test_requires_root_for_cifar(self, monkeypatch):
        monkeypatch.delenv("GKD_DATA_ROOT", raising=False)
        spec = DatasetSpec(name="cifar10")
        assert any("root" in v for v in spec.validate())

    def test_env_fallback_for_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GKD_DATA_ROOT", str(tmp_path))
        spec = DatasetSpec(name="cifar10")
        assert spec.validate() == []
        assert spec.resolve_root() == tmp_path

    def test_rejects_unknown_name(self):
        assert any("name" in v for v in DatasetSpec(name="mnist").validate())

    def test_rejects_bad_split(self):
        spec = DatasetSpec(name="synthetic", split="validation")
        assert any("split" in v for v in spec.validate())
