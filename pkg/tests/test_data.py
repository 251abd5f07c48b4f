"""Synthetic dataset generation, rate coding, and serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smoothsnn.data import (
    SpikeDataset,
    dataset_from_csv,
    gen_temporal_patterns,
    load_dataset,
    poisson_encode,
    save_dataset,
)
from smoothsnn.errors import DataError, FormatError, ParameterError


class TestGenerator:
    def test_noiseless_samples_equal_template(self):
        ds = gen_temporal_patterns(3, 8, 5, samples_per_class=4, jitter_prob=0.0, seed=7)
        for cls in range(3):
            rows = ds.inputs[ds.labels == cls]
            for i in range(1, rows.shape[0]):
                np.testing.assert_array_equal(rows[0], rows[i])

    def test_class_balance(self):
        ds = gen_temporal_patterns(4, 10, 5, samples_per_class=6, jitter_prob=0.2, seed=1)
        counts = np.bincount(ds.labels, minlength=4)
        np.testing.assert_array_equal(counts, 6)

    def test_seed_changes_templates(self):
        a = gen_temporal_patterns(2, 10, 5, 1, jitter_prob=0.0, seed=1)
        b = gen_temporal_patterns(2, 10, 5, 1, jitter_prob=0.0, seed=2)
        assert a.inputs.tobytes() != b.inputs.tobytes()

    def test_regeneration_bit_identical(self):
        a = gen_temporal_patterns(3, 12, 4, 5, jitter_prob=0.15, seed=33)
        b = gen_temporal_patterns(3, 12, 4, 5, jitter_prob=0.15, seed=33)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_templates_shared_across_sample_counts(self):
        small = gen_temporal_patterns(2, 9, 4, samples_per_class=1, jitter_prob=0.0, seed=5)
        large = gen_temporal_patterns(2, 9, 4, samples_per_class=3, jitter_prob=0.0, seed=5)
        np.testing.assert_array_equal(small.inputs[0], large.inputs[0])

    def test_parameter_validation(self):
        with pytest.raises(ParameterError):
            gen_temporal_patterns(0, 5, 5, 1, 0.1, 0)
        with pytest.raises(ParameterError):
            gen_temporal_patterns(2, 5, 5, 1, 1.5, 0)


class TestPoissonEncode:
    def test_zero_never_spikes(self):
        out = poisson_encode(np.zeros((3, 4)), T=50, seed=0)
        np.testing.assert_array_equal(out, 0)

    def test_one_always_spikes(self):
        out = poisson_encode(np.ones((3, 4)), T=50, seed=0)
        np.testing.assert_array_equal(out, 1)

    def test_half_rate_concentrates(self):
        out = poisson_encode(np.full((1, 2), 0.5), T=10_000, seed=2)
        rate = out.mean(axis=1)
        assert np.all((0.49 <= rate) & (rate <= 0.51))

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            poisson_encode(np.array([[1.2]]), T=3, seed=0)

    def test_deterministic(self):
        vals = np.random.default_rng(1).random((4, 6))
        a = poisson_encode(vals, 20, seed=9)
        b = poisson_encode(vals, 20, seed=9)
        assert a.tobytes() == b.tobytes()


class TestSpk1Format:
    def test_round_trip(self, tmp_path):
        ds = gen_temporal_patterns(3, 11, 6, 4, jitter_prob=0.3, seed=8)
        path = tmp_path / "data.spk"
        save_dataset(path, ds)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.inputs, ds.inputs)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.n_classes == ds.n_classes

    def test_empty_dataset_round_trip(self, tmp_path):
        ds = SpikeDataset(inputs=np.zeros((0, 4, 3), dtype=np.uint8),
                          labels=np.zeros(0, dtype=np.int64), n_classes=2)
        path = tmp_path / "empty.spk"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert back.n_samples == 0
        assert back.inputs.shape == (0, 4, 3)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.spk"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_dataset(p)

    def test_truncated_reports_offset(self, tmp_path):
        ds = gen_temporal_patterns(2, 9, 4, 3, jitter_prob=0.1, seed=2)
        p = tmp_path / "data.spk"
        save_dataset(p, ds)
        raw = p.read_bytes()
        cut = tmp_path / "cut.spk"
        cut.write_bytes(raw[: len(raw) - 3])
        with pytest.raises(FormatError, match="at byte"):
            load_dataset(cut)

    @given(arrays(np.uint8, st.tuples(st.integers(0, 6), st.integers(1, 5), st.integers(1, 9)),
                  elements=st.integers(0, 1)),
           st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_bit_packing_preserves_every_spike(self, tmp_path_factory, spikes, seed):
        tmp = tmp_path_factory.mktemp("spk")
        n = spikes.shape[0]
        labels = np.arange(n, dtype=np.int64) % 3
        ds = SpikeDataset(inputs=spikes, labels=labels, n_classes=3, seed=seed)
        path = tmp / "prop.spk"
        save_dataset(path, ds)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.inputs, ds.inputs)


class TestCsvImport:
    def test_fixture_round_trip(self, tmp_path):
        p = tmp_path / "fixture.csv"
        p.write_text("sample,t,channel\n0,0,1\n0,2,0\n1,1,1\n")
        ds = dataset_from_csv(p, labels=[0, 1], n_classes=2)
        assert ds.inputs.shape == (2, 3, 2)
        assert ds.inputs[0, 0, 1] == 1
        assert ds.inputs[0, 2, 0] == 1
        assert ds.inputs[1, 1, 1] == 1
        assert ds.inputs.sum() == 3

    def test_explicit_dims(self, tmp_path):
        p = tmp_path / "fixture.csv"
        p.write_text("sample,t,channel\n0,0,0\n")
        ds = dataset_from_csv(p, labels=[1], n_classes=2, T=5, channels=4)
        assert ds.inputs.shape == (1, 5, 4)

    def test_missing_columns(self, tmp_path):
        p = tmp_path / "fixture.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(FormatError):
            dataset_from_csv(p, labels=[0], n_classes=1)

    def test_out_of_bounds_coordinate(self, tmp_path):
        p = tmp_path / "fixture.csv"
        p.write_text("sample,t,channel\n0,9,0\n")
        with pytest.raises(DataError):
            dataset_from_csv(p, labels=[0], n_classes=1, T=3, channels=2)


class TestDatasetValidation:
    def test_non_binary_rejected(self):
        with pytest.raises(DataError):
            SpikeDataset(inputs=np.full((1, 2, 2), 3, dtype=np.uint8),
                         labels=np.zeros(1, dtype=np.int64), n_classes=1)

    def test_label_range(self):
        with pytest.raises(DataError):
            SpikeDataset(inputs=np.zeros((1, 2, 2), dtype=np.uint8),
                         labels=np.array([5]), n_classes=2)
