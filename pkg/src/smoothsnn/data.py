"""Synthetic temporal spike datasets, rate encoding, and on-disk formats.

Datasets are binary spike tensors of shape (samples, T, channels) with one
integer class label per sample.  The native file format is bit-packed
("SPK1"); a CSV import exists for hand-built fixtures.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .fileio import atomic_write_bytes
from .numeric import RngState

_MAGIC = b"SPK1"
TEMPLATE_DENSITY = 0.3


@dataclass
class SpikeDataset:
    inputs: np.ndarray            # (samples, T, channels) of {0, 1}, uint8
    labels: np.ndarray            # (samples,) int64 in [0, n_classes)
    n_classes: int
    task: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 3:
            raise DataError(f"inputs must be (samples, T, channels), got shape {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError("one label per sample required")
        if self.inputs.size and not np.isin(self.inputs, (0, 1)).all():
            raise DataError("spike inputs must be binary")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_channels(self) -> int:
        return self.inputs.shape[2]

    def subset(self, indices) -> "SpikeDataset":
        idx = np.asarray(indices)
        return SpikeDataset(inputs=self.inputs[idx], labels=self.labels[idx],
                            n_classes=self.n_classes, task=self.task, seed=self.seed)


def gen_temporal_patterns(n_classes: int, channels: int, T: int, samples_per_class: int,
                          jitter_prob: float, seed: int) -> SpikeDataset:
    """Class-balanced spike patterns: one frozen random binary template per
    class, each sample a copy with independent bit flips.

    Templates and sample noise come from separate child streams of the seed,
    so datasets generated with different sample counts share templates.
    """
    if min(n_classes, channels, T, samples_per_class) < 1:
        raise ParameterError("all counts must be >= 1")
    if not 0.0 <= jitter_prob <= 1.0:
        raise ParameterError(f"jitter_prob out of [0,1]: {jitter_prob}")
    root = RngState(seed)
    template_rng = root.child("templates")
    sample_rng = root.child("samples")
    templates = (template_rng.uniform64((n_classes, T, channels)) < TEMPLATE_DENSITY)
    inputs = np.empty((n_classes * samples_per_class, T, channels), dtype=np.uint8)
    labels = np.empty(n_classes * samples_per_class, dtype=np.int64)
    row = 0
    for cls in range(n_classes):
        for _ in range(samples_per_class):
            flips = sample_rng.uniform64((T, channels)) < jitter_prob
            inputs[row] = np.logical_xor(templates[cls], flips)
            labels[row] = cls
            row += 1
    return SpikeDataset(inputs=inputs, labels=labels, n_classes=n_classes,
                        task="temporal-patterns", seed=seed)


def poisson_encode(values: np.ndarray, T: int, seed: int) -> np.ndarray:
    """Rate-code real values in [0, 1] into (samples, T, channels) spikes:
    each timestep spikes independently with probability equal to the value."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DataError(f"expected (samples, channels) values, got shape {values.shape}")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise DataError("rate-coded values must lie in [0, 1]")
    rng = RngState(seed).child("poisson")
    draws = rng.uniform64((values.shape[0], T, values.shape[1]))
    return (draws < values[:, None, :]).astype(np.uint8)


def save_dataset(path, ds: SpikeDataset) -> None:
    """Write the SPK1 container: magic, u32 dims, u32 labels, bit-packed spikes."""
    header = _MAGIC + struct.pack("<4I", ds.n_samples, ds.n_timesteps, ds.n_channels,
                                  ds.n_classes)
    labels = ds.labels.astype("<u4").tobytes()
    bits = np.packbits(ds.inputs.reshape(-1)).tobytes()
    atomic_write_bytes(path, header + labels + bits)


def load_dataset(path) -> SpikeDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} (at byte 0)")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header (at byte {len(raw)})")
    samples, T, channels, n_classes = struct.unpack("<4I", raw[4:20])
    offset = 20
    label_bytes = 4 * samples
    if len(raw) < offset + label_bytes:
        raise FormatError(f"{path}: truncated label table (at byte {len(raw)})")
    labels = np.frombuffer(raw[offset:offset + label_bytes], dtype="<u4").astype(np.int64)
    offset += label_bytes
    n_bits = samples * T * channels
    n_bytes = (n_bits + 7) // 8
    if len(raw) < offset + n_bytes:
        raise FormatError(f"{path}: truncated spike data (at byte {len(raw)})")
    packed = np.frombuffer(raw[offset:offset + n_bytes], dtype=np.uint8)
    flat = np.unpackbits(packed, count=n_bits)
    inputs = flat.reshape(samples, T, channels)
    return SpikeDataset(inputs=inputs, labels=labels, n_classes=n_classes)


def dataset_from_csv(path, labels, n_classes: int, T: int | None = None,
                     channels: int | None = None) -> SpikeDataset:
    """Build a dataset from spike coordinates (columns: sample, t, channel).

    Dimensions default to one past the largest index seen.
    """
    coords = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"sample", "t", "channel"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise FormatError(f"{path}: expected columns sample,t,channel")
        for line in reader:
            coords.append((int(line["sample"]), int(line["t"]), int(line["channel"])))
    labels = np.asarray(labels, dtype=np.int64)
    n_samples = labels.shape[0]
    if T is None:
        T = max((t for _, t, _ in coords), default=-1) + 1
    if channels is None:
        channels = max((c for _, _, c in coords), default=-1) + 1
    inputs = np.zeros((n_samples, max(T, 1), max(channels, 1)), dtype=np.uint8)
    for s, t, c in coords:
        if s >= n_samples or t >= T or c >= channels:
            raise DataError(f"spike coordinate ({s},{t},{c}) outside dataset dims")
        inputs[s, t, c] = 1
    return SpikeDataset(inputs=inputs, labels=labels, n_classes=n_classes)
