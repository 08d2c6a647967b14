"""Bag datasets: in-memory types, the binary container format, an import path
for externally extracted features, and the planted-witness synthetic benchmark.

Container layout (little-endian), version 1:

    magic   4 bytes  b"MILB"
    version u32      1 (float32 payload; version 2 is the float64 variant
                        used for parameter checkpoints)
    dim     u32      feature dimension
    count   u32      number of bags
    per bag:
        id-len  u16, then UTF-8 id bytes
        label   u8   (0 or 1)
        n       u32  instance count
        n * dim IEEE-754 reals
    crc32   u32      checksum of every preceding byte

An optional JSON sidecar (same stem, ".json") carries provenance; it is never
required to read the file back.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FeatureBag",
    "BagDataset",
    "SynthConfig",
    "DataFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedFileError",
    "ChecksumMismatchError",
    "save_dataset",
    "load_dataset",
    "write_container",
    "read_container",
    "import_feature_dir",
    "synth_generate",
    "synth_generate_with_witnesses",
]

MAGIC = b"MILB"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 2
_DTYPE_BY_VERSION = {1: "<f4", 2: "<f8"}


class DataFormatError(Exception):
    """Base class for container-format failures."""


class BadMagicError(DataFormatError):
    pass


class UnsupportedVersionError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class ChecksumMismatchError(DataFormatError):
    pass


@dataclass
class FeatureBag:
    """One labeled bag: an (n, l) instance-feature matrix with a binary label."""

    bag_id: str
    features: np.ndarray
    label: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError(f"bag '{self.bag_id}': features must be a non-empty 2-D matrix")
        if self.label not in (0, 1):
            raise ValueError(f"bag '{self.bag_id}': label must be 0 or 1, got {self.label}")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]


@dataclass
class BagDataset:
    bags: list[FeatureBag]
    feature_dim: int
    provenance: str = "external"

    def __post_init__(self):
        ids = set()
        for bag in self.bags:
            if bag.features.shape[1] != self.feature_dim:
                raise ValueError(
                    f"bag '{bag.bag_id}' has feature dim {bag.features.shape[1]}, "
                    f"dataset expects {self.feature_dim}"
                )
            if bag.bag_id in ids:
                raise ValueError(f"duplicate bag id '{bag.bag_id}'")
            ids.add(bag.bag_id)

    def __len__(self) -> int:
        return len(self.bags)

    def labels(self) -> np.ndarray:
        return np.array([bag.label for bag in self.bags], dtype=np.int64)

    def class_counts(self) -> tuple[int, int]:
        labels = self.labels()
        return int((labels == 1).sum()), int((labels == 0).sum())


def write_container(path, feature_dim: int, records, version: int = DATASET_VERSION) -> None:
    """Write (id, label, matrix) records in the container framing. ``version``
    selects the payload dtype: 1 -> float32, 2 -> float64."""
    dtype = _DTYPE_BY_VERSION[version]
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<III", version, feature_dim, len(records))
    for rid, label, matrix in records:
        id_bytes = rid.encode("utf-8")
        buf += struct.pack("<H", len(id_bytes))
        buf += id_bytes
        buf += struct.pack("<BI", label, matrix.shape[0])
        buf += np.ascontiguousarray(matrix, dtype=dtype).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def read_container(path):
    """Read back (version, feature_dim, records); inverse of write_container."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFileError(f"{path}: expected {n} more bytes at offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a MILB container")
    version, feature_dim, count = struct.unpack("<III", take(12))
    if version not in _DTYPE_BY_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported container version {version}")
    dtype = np.dtype(_DTYPE_BY_VERSION[version])
    records = []
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        rid = take(id_len).decode("utf-8")
        label, n = struct.unpack("<BI", take(5))
        payload = take(n * feature_dim * dtype.itemsize)
        matrix = np.frombuffer(payload, dtype=dtype).reshape(n, feature_dim)
        records.append((rid, label, matrix))
    (stored_crc,) = struct.unpack("<I", take(4))
    if pos != len(raw):
        raise TruncatedFileError(f"{path}: {len(raw) - pos} trailing bytes after checksum")
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumMismatchError(
            f"{path}: crc32 mismatch (stored {stored_crc:#010x}, actual {actual_crc:#010x})"
        )
    return version, feature_dim, records


def _sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_dataset(dataset: BagDataset, path) -> None:
    """Persist a dataset (float32 payload) plus a small provenance sidecar."""
    records = [(bag.bag_id, bag.label, bag.features) for bag in dataset.bags]
    write_container(path, dataset.feature_dim, records, version=DATASET_VERSION)
    positive, negative = dataset.class_counts()
    sidecar = {
        "provenance": dataset.provenance,
        "feature_dim": dataset.feature_dim,
        "bag_count": len(dataset),
        "positive": positive,
        "negative": negative,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def load_dataset(path) -> BagDataset:
    version, feature_dim, records = read_container(path)
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(
            f"{path}: version {version} is not a dataset container"
        )
    bags = [FeatureBag(rid, matrix.astype(np.float64), label) for rid, label, matrix in records]
    provenance = "external"
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        try:
            provenance = json.loads(sidecar.read_text()).get("provenance", provenance)
        except (json.JSONDecodeError, OSError):
            pass  # sidecar is advisory only
    return BagDataset(bags, feature_dim, provenance)


def import_feature_dir(manifest_path) -> BagDataset:
    """Build a dataset from a directory of per-bag raw float32 matrices.

    The manifest is JSON: {"feature_dim": l, "bags": [{"id", "file", "label"}]}.
    Each file holds row-major little-endian float32 values; the instance count
    is inferred from the file size.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    feature_dim = int(manifest["feature_dim"])
    if feature_dim < 1:
        raise DataFormatError(f"{manifest_path}: feature_dim must be positive")
    root = manifest_path.parent
    bags = []
    for entry in manifest["bags"]:
        raw = (root / entry["file"]).read_bytes()
        if len(raw) % (4 * feature_dim) != 0:
            raise DataFormatError(
                f"{entry['file']}: size {len(raw)} is not a multiple of {4 * feature_dim}"
            )
        matrix = np.frombuffer(raw, dtype="<f4").reshape(-1, feature_dim)
        bags.append(FeatureBag(str(entry["id"]), matrix.astype(np.float64), int(entry["label"])))
    return BagDataset(bags, feature_dim, provenance="external")


@dataclass
class SynthConfig:
    """Planted-witness benchmark: negative bags are pure baseline noise,
    positive bags have a floor-of-at-least-one subset of instances replaced by
    baseline draws shifted along one fixed random direction. ``separation`` is
    the shift magnitude in units of the per-dimension noise scale."""

    n_bags: int = 500
    pos_fraction: float = 0.5
    bag_size_range: tuple[int, int] = (20, 60)
    feature_dim: int = 64
    witness_rate: float = 0.05
    separation: float = 2.0
    seed: int = 7

    def __post_init__(self):
        lo, hi = self.bag_size_range
        if self.n_bags < 2:
            raise ValueError("n_bags must be at least 2")
        if not 0.0 < self.pos_fraction < 1.0:
            raise ValueError("pos_fraction must lie in (0, 1)")
        if lo < 1 or hi < lo:
            raise ValueError("bag_size_range must satisfy 1 <= min <= max")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not 0.0 < self.witness_rate <= 1.0:
            raise ValueError("witness_rate must lie in (0, 1]")
        if self.separation < 0.0:
            raise ValueError("separation must be non-negative")
        n_pos = int(round(self.n_bags * self.pos_fraction))
        if n_pos < 1 or n_pos >= self.n_bags:
            raise ValueError("pos_fraction leaves a class empty")


def synth_generate_with_witnesses(cfg: SynthConfig):
    """Generate the benchmark and also return {bag_id: witness row indices}.

    A bag is positive exactly when it received at least one witness instance;
    the witness count is ceil(witness_rate * n), floored at one.
    """
    rng = np.random.default_rng(cfg.seed)
    direction = rng.standard_normal(cfg.feature_dim)
    direction /= np.sqrt(np.mean(direction ** 2))  # per-dimension RMS of one
    shift = cfg.separation * direction

    n_pos = int(round(cfg.n_bags * cfg.pos_fraction))
    labels = np.array([1] * n_pos + [0] * (cfg.n_bags - n_pos), dtype=np.int64)
    rng.shuffle(labels)

    lo, hi = cfg.bag_size_range
    bags = []
    witnesses: dict[str, np.ndarray] = {}
    for i, label in enumerate(labels):
        bag_id = f"bag{i:05d}"
        n = int(rng.integers(lo, hi + 1))
        features = rng.standard_normal((n, cfg.feature_dim))
        if label == 1:
            k = max(1, math.ceil(cfg.witness_rate * n))
            idx = np.sort(rng.choice(n, size=k, replace=False))
            features[idx] = rng.standard_normal((k, cfg.feature_dim)) + shift
            witnesses[bag_id] = idx
        else:
            witnesses[bag_id] = np.empty(0, dtype=np.int64)
        # float32 round-trip here so that saved files reload bit-identically
        bags.append(FeatureBag(bag_id, features.astype(np.float32).astype(np.float64), int(label)))
    return BagDataset(bags, cfg.feature_dim, provenance="synthetic"), witnesses


def synth_generate(cfg: SynthConfig) -> BagDataset:
    dataset, _ = synth_generate_with_witnesses(cfg)
    return dataset
