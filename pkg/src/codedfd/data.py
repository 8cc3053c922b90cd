"""Dataset loading (IDX files, synthetic clusters) and per-client partitioning."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, CountMismatch, TooFewSamples, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray  # float inputs in [0, 1]
    y: np.ndarray  # int64 labels

    def __len__(self):
        return len(self.y)

    @property
    def classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


@dataclass
class ClientDataset(Dataset):
    client_id: int = 0


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFile(f"{path}: {len(raw) - header} payload bytes, expected {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Images scaled to [0, 1] with shape (N, 1, H, W), labels as int64."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned byte IDX payloads are supported")
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def export_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset of (N, 1, H, W) images in [0, 1] as an IDX image/label pair."""
    x = dataset.x
    if x.ndim == 4:
        x = x[:, 0]
    write_idx(images_path, np.rint(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8))
    write_idx(labels_path, dataset.y.astype(np.uint8))


def synthesize(classes: int = 10, samples_per_class: int = 100, input_shape=(1, 8, 8), separation: float = 1.0,
               noise: float = 0.25, seed: int = 0) -> Dataset:
    """Gaussian class clusters clipped to [0, 1].

    Each class gets a uniform random prototype; a sample is
    ``0.5 + separation * (prototype - 0.5) + noise * N(0, 1)``. With
    ``separation=0`` every class has the same distribution.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape) if np.ndim(input_shape) else (int(input_shape),)
    protos = rng.uniform(0.0, 1.0, size=(classes,) + shape)
    y = np.repeat(np.arange(classes), samples_per_class)
    centers = 0.5 + separation * (protos[y] - 0.5)
    x = np.clip(centers + noise * rng.standard_normal(centers.shape), 0.0, 1.0)
    order = rng.permutation(len(y))
    return Dataset(x[order].astype(np.float32), y[order].astype(np.int64))


def train_test_split(dataset: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng([seed, 7]).permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(order[n_test:]), dataset.subset(order[:n_test])


class Scheme(str, enum.Enum):
    IID = "iid"
    LABEL_SKEW = "label_skew"


@dataclass
class PartitionSpec:
    scheme: Scheme = Scheme.IID
    total_clients: int = 1
    shards_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        self.scheme = Scheme(str(self.scheme).lower().replace("-", "_")) if not isinstance(self.scheme, Scheme) else self.scheme


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Exhaustive, disjoint split into ``total_clients`` nonempty client datasets.

    ``label_skew`` sorts samples by label, cuts the order into
    ``total_clients * shards_per_client`` equal shards and deals each client
    ``shards_per_client`` of them at random.
    """
    t = spec.total_clients
    n = len(dataset)
    rng = np.random.default_rng([spec.seed, 11])
    if spec.scheme is Scheme.IID:
        if n < t:
            raise TooFewSamples(f"{n} samples cannot cover {t} clients")
        parts = np.array_split(rng.permutation(n), t)
    else:
        shards = t * spec.shards_per_client
        if n < shards:
            raise TooFewSamples(f"{n} samples cannot fill {shards} shards")
        perm = rng.permutation(n)
        order = perm[np.argsort(dataset.y[perm], kind="stable")]
        pieces = np.array_split(order, shards)
        deal = rng.permutation(shards).reshape(t, spec.shards_per_client)
        parts = [np.concatenate([pieces[s] for s in row]) for row in deal]
    return [ClientDataset(dataset.x[idx], dataset.y[idx], client_id=k) for k, idx in enumerate(parts)]
