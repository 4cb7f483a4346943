"""Datasets and client partitioning.

Loaders return :class:`LabeledDataset` objects with features scaled into
[0, 1]. :func:`partition` splits a dataset across ``N`` clients under one of
three heterogeneity regimes (IID, class-wise Dirichlet, label skew).
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from firma.errors import ConsistencyError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073

DATA_DIR_ENV = "FIRMA_DATA_DIR"


@dataclass
class LabeledDataset:
    features: np.ndarray  # [n, d] float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConsistencyError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConsistencyError(f"labels outside 0..{self.n_classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[indices], self.labels[indices], self.n_classes, name or self.name
        )


# ----------------------------------------------------------------- loaders


def _open_maybe_gz(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if payload.size != int(np.prod(dims)):
        raise ConsistencyError(
            f"{path}: header declares {int(np.prod(dims))} bytes, payload has {payload.size}"
        )
    return payload.reshape(dims)


def load_idx(path_images, path_labels, name: str = "mnist") -> LabeledDataset:
    """Read an IDX image/label file pair (optionally gzipped).

    Pixels are scaled by 1/255 and flattened row-major; the class count is
    inferred as ``max(label) + 1``.
    """
    images = _read_idx(path_images, IDX_IMAGES_MAGIC)
    labels = _read_idx(path_labels, IDX_LABELS_MAGIC)
    if len(labels) == 0:
        raise ConsistencyError(f"{path_labels}: label file is empty")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), int(labels.max()) + 1, name)


def load_digits_csv(path, name: str = "digits") -> LabeledDataset:
    """Read the 8x8 digits CSV: 64 pixel values in 0..16 then a label per row."""
    with _open_maybe_gz(path) as fh:
        text = fh.read().decode("ascii")
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != 65:
            raise FormatError(f"{path}:{lineno}: expected 65 values, got {len(cells)}")
        rows.append([float(c) for c in cells])
    if not rows:
        raise ConsistencyError(f"{path}: no rows")
    arr = np.asarray(rows)
    return LabeledDataset(arr[:, :64] / 16.0, arr[:, 64].astype(np.int64), 10, name)


def load_cifar10_batches(paths: Sequence, name: str = "cifar10") -> LabeledDataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    feats, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD_BYTES:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(recs[:, 0].astype(np.int64))
        feats.append(recs[:, 1:].astype(np.float64) / 255.0)
    if not labels:
        raise ConsistencyError("no CIFAR-10 batches given")
    return LabeledDataset(np.concatenate(feats), np.concatenate(labels), 10, name)


def digits_csv_path() -> Path:
    """Locate the 1,797-sample digits CSV.

    ``$FIRMA_DATA_DIR/digits.csv[.gz]`` wins; otherwise the copy bundled
    with scikit-learn is used.
    """
    data_dir = os.environ.get(DATA_DIR_ENV)
    if data_dir:
        for fname in ("digits.csv", "digits.csv.gz"):
            p = Path(data_dir) / fname
            if p.exists():
                return p
    return Path(str(resources.files("sklearn.datasets.data").joinpath("digits.csv.gz")))


def synth_blobs(n_samples: int, d: int, n_classes: int, spread: float, seed: int) -> LabeledDataset:
    """Gaussian clusters, one per class, clamped to [0, 1]."""
    if n_samples < n_classes or d < 1 or spread <= 0:
        raise ValueError("need n_samples >= n_classes, d >= 1, spread > 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(n_classes, d))
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    x = centers[labels] + spread * rng.standard_normal((n_samples, d))
    return LabeledDataset(np.clip(x, 0.0, 1.0), labels, n_classes, f"blobs{d}x{n_classes}")


def train_test_split(dataset: LabeledDataset, test_frac: float, seed: int):
    """Seeded global holdout; the train part keeps ``floor((1-test_frac)*n)`` samples."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(np.floor((1.0 - test_frac) * len(dataset)))
    return (
        dataset.subset(np.sort(perm[:n_train]), dataset.name + "-train"),
        dataset.subset(np.sort(perm[n_train:]), dataset.name + "-test"),
    )


# ------------------------------------------------------------ partitioning

SCHEMES = ("iid", "dirichlet", "label_skew")


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across ``n_clients``.

    ``scheme`` is one of ``"iid"``, ``"dirichlet"`` (uses ``alpha``) or
    ``"label_skew"`` (uses ``k_primary`` and the primary/secondary mass
    fractions; the remainder goes to minority classes).
    """

    scheme: str
    n_clients: int
    seed: int = 0
    alpha: float = 0.5
    k_primary: int = 1
    primary_frac: float = 0.70
    secondary_frac: float = 0.27

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.n_clients < 2:
            raise ValueError("n_clients must be >= 2")
        if self.scheme == "dirichlet" and not self.alpha > 0:
            raise ValueError("Dirichlet alpha must be positive")
        if self.scheme == "label_skew":
            if self.k_primary < 1:
                raise ValueError("k_primary must be >= 1")
            if not (0 <= self.primary_frac and 0 <= self.secondary_frac
                    and self.primary_frac + self.secondary_frac <= 1):
                raise ValueError("primary/secondary fractions must be a sub-probability pair")

    @classmethod
    def iid(cls, n_clients: int, seed: int = 0) -> "PartitionSpec":
        return cls("iid", n_clients, seed)

    @classmethod
    def dirichlet(cls, alpha: float, n_clients: int, seed: int = 0) -> "PartitionSpec":
        return cls("dirichlet", n_clients, seed, alpha=alpha)

    @classmethod
    def label_skew(cls, k_primary: int, n_clients: int, seed: int = 0, **fracs) -> "PartitionSpec":
        return cls("label_skew", n_clients, seed, k_primary=k_primary, **fracs)


@dataclass
class Shard:
    client_id: int
    indices: np.ndarray
    class_histogram: np.ndarray = field(repr=False)

    @property
    def is_empty(self) -> bool:
        return len(self.indices) == 0

    def __len__(self) -> int:
        return len(self.indices)


def class_histogram(indices, dataset: LabeledDataset) -> np.ndarray:
    """Class-proportion vector of the samples at ``indices``.

    An empty index set gives the all-zero vector; callers detect it with
    ``hist.sum() == 0`` or :attr:`Shard.is_empty`.
    """
    if isinstance(indices, Shard):
        indices = indices.indices
    labels = dataset.labels[np.asarray(indices, dtype=np.int64)]
    counts = np.bincount(labels, minlength=dataset.n_classes).astype(np.float64)
    if counts.sum() == 0:
        return counts
    return counts / counts.sum()


def _iid(dataset, spec, rng):
    perm = rng.permutation(len(dataset))
    return np.array_split(perm, spec.n_clients)


def _dirichlet(dataset, spec, rng):
    parts = [[] for _ in range(spec.n_clients)]
    for c in range(dataset.n_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        p = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
        cuts = (np.cumsum(p)[:-1] * len(idx)).astype(np.int64)
        for i, chunk in enumerate(np.split(idx, cuts)):
            parts[i].append(chunk)
    return [np.concatenate(p) for p in parts]


def label_skew_classes(client: int, k: int, n_clients: int, n_classes: int):
    """Primary, secondary and minority class lists for one client.

    Primaries rotate round-robin in blocks of ``k``. Secondaries are drawn
    in rotation from the classes nobody holds as primary when there are
    enough of them, otherwise from everything except the client's own
    primaries.
    """
    primaries = [(client * k + j) % n_classes for j in range(k)]
    all_primary = {(i * k + j) % n_classes for i in range(n_clients) for j in range(k)}
    pool = [c for c in range(n_classes) if c not in all_primary]
    if len(pool) < k + 1:
        pool = [c for c in range(n_classes) if c not in primaries]
    n_sec = min(k + 1, len(pool))
    start = (client * (k + 1)) % len(pool) if pool else 0
    secondaries = [pool[(start + j) % len(pool)] for j in range(n_sec)]
    minority = [c for c in range(n_classes) if c not in primaries and c not in secondaries]
    return primaries, secondaries, minority


def _label_skew(dataset, spec, rng):
    n, C, N, k = len(dataset), dataset.n_classes, spec.n_clients, spec.k_primary
    if not 1 <= k <= C - 1:
        raise ValueError(f"k_primary must lie in 1..{C - 1}")
    quota = n // N
    minority_frac = 1.0 - spec.primary_frac - spec.secondary_frac
    demand = np.zeros((N, C))
    for i in range(N):
        prim, sec, mino = label_skew_classes(i, k, N, C)
        # empty tiers hand their mass to the tier above
        tiers = [[prim, spec.primary_frac], [sec, spec.secondary_frac], [mino, minority_frac]]
        for t in (2, 1):
            if not tiers[t][0]:
                tiers[t - 1][1] += tiers[t][1]
                tiers[t][1] = 0.0
        for classes, frac in tiers:
            for c in classes:
                demand[i, c] += frac * quota / len(classes)

    pools = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(C)]
    supply = np.array([len(p) for p in pools], dtype=np.float64)
    col = demand.sum(axis=0)
    # an oversubscribed class is shared out pro rata; an empty one contributes nothing
    shrink = np.minimum(1.0, supply / np.where(col > 0, col, 1.0))
    counts = np.vstack([_largest_remainder(row * shrink) for row in demand])

    parts = [[] for _ in range(N)]
    for c in range(C):
        offset = 0
        for i in range(N):
            take = pools[c][offset: offset + counts[i, c]]  # rounding may overdraw by one
            parts[i].append(take)
            offset += len(take)
    return [np.concatenate(p) for p in parts]


def _largest_remainder(target: np.ndarray) -> np.ndarray:
    """Integer vector with sum ``floor(sum(target))`` closest to ``target``."""
    base = np.floor(target + 1e-9).astype(np.int64)
    short = int(np.floor(target.sum() + 1e-9)) - int(base.sum())
    if short > 0:
        frac = target - base
        # stable sort: ties go to the lowest class index
        base[np.argsort(-frac, kind="stable")[:short]] += 1
    return base


def partition(dataset: LabeledDataset, spec: PartitionSpec) -> list[Shard]:
    """Split ``dataset`` into ``spec.n_clients`` disjoint shards."""
    if len(dataset) == 0:
        raise ValueError("cannot partition an empty dataset")
    rng = np.random.default_rng(spec.seed)
    splitter = {"iid": _iid, "dirichlet": _dirichlet, "label_skew": _label_skew}[spec.scheme]
    shards = []
    for i, idx in enumerate(splitter(dataset, spec, rng)):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        shards.append(Shard(i, idx, class_histogram(idx, dataset)))
    return shards


def split_local(shard: Shard, test_frac: float, seed: int):
    """Seeded per-shard holdout: the last ``test_frac`` of a shuffled shard."""
    perm = np.random.default_rng([seed, shard.client_id]).permutation(shard.indices)
    n_test = int(round(test_frac * len(perm)))
    cut = len(perm) - n_test
    return np.sort(perm[:cut]), np.sort(perm[cut:])
