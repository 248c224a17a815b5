"""Synthetic data, non-IID client partitioning, file formats and relevance score."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CapacityError(ValueError):
    pass


class IDXFormatError(ValueError):
    pass


class IDXTruncatedError(IDXFormatError):
    pass


class IDXCountMismatchError(IDXFormatError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be 2-D with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class UnlabeledDataset:
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or len(self.samples) == 0:
            raise ValueError("unlabeled dataset must be a nonempty 2-D array")

    def __len__(self):
        return len(self.samples)

    @property
    def feature_dim(self):
        return self.samples.shape[1]


@dataclass
class ClientDataset:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    # ground-truth group; evaluation only, never read by the federation loop
    true_cluster: int
    train_index: np.ndarray | None = None
    test_index: np.ndarray | None = None

    def __post_init__(self):
        if len(self.train) == 0:
            raise ValueError(f"client {self.client_id} has an empty train set")
        if not set(self.test.labels.tolist()) <= set(self.train.labels.tolist()):
            raise ValueError(f"client {self.client_id}: test labels outside train label support")

    def class_counts(self, split="train"):
        ds = self.train if split == "train" else self.test
        return np.bincount(ds.labels, minlength=ds.num_classes)


@dataclass
class PartitionSpec:
    num_clients: int = 60
    num_groups: int = 3
    classes_per_client: int = 4
    major_count: int = 20
    minor_count: int = 5
    majors_per_client: int = 2
    test_per_class: int = 20
    seed: int = 0

    @property
    def client_size(self):
        minors = self.classes_per_client - self.majors_per_client
        return self.majors_per_client * self.major_count + minors * self.minor_count


# ---------------------------------------------------------------- synthesis


def class_means(num_classes: int, dim: int, separation: float, rng) -> np.ndarray:
    """Class centres with pairwise distance exactly ``separation`` when dim >= K."""
    if dim >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return q[:, :num_classes].T * (separation / np.sqrt(2.0))
    dirs = rng.standard_normal((num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * (separation / np.sqrt(2.0))


def generate_synthetic(
    num_classes: int,
    dim: int,
    per_class: int,
    class_separation: float,
    seed: int = 0,
    *,
    unlabeled_count: int | None = None,
    noise: float = 1.0,
    shift: float = 0.0,
    geometry_seed: int | None = None,
    modes_per_class: int = 1,
    latent_dim: int | None = None,
) -> tuple[LabeledDataset, UnlabeledDataset]:
    """Gaussian class-conditional data plus an unlabeled pool from the same mixture.

    By default each class is one blob and the centres are equidistant at
    ``class_separation``.  With ``modes_per_class > 1`` or ``latent_dim`` set,
    every class is instead a union of blobs whose centres are drawn with
    per-axis spread ``class_separation`` inside a random ``latent_dim``
    subspace, so labels are a nonlinear function of position and most input
    directions carry only noise.

    ``geometry_seed`` fixes the centres independently of the sampling seed,
    so two calls sharing it describe the same distribution.  ``shift``
    translates the unlabeled pool along a random unit direction.
    """
    if num_classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    if per_class <= 0 or (unlabeled_count is not None and unlabeled_count <= 0):
        raise ValueError("sample counts must be positive")
    if modes_per_class < 1 or (latent_dim is not None and not 1 <= latent_dim <= dim):
        raise ValueError("modes_per_class must be >= 1 and latent_dim within [1, dim]")
    geo_rng = np.random.default_rng(seed if geometry_seed is None else geometry_seed)
    simple = modes_per_class == 1 and latent_dim is None
    if simple:
        centres = class_means(num_classes, dim, class_separation, geo_rng)
    else:
        latent = dim if latent_dim is None else latent_dim
        q, _ = np.linalg.qr(geo_rng.standard_normal((dim, dim)))
        centres = geo_rng.standard_normal((num_classes * modes_per_class, latent)) * class_separation @ q[:, :latent].T
    direction = geo_rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)

    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(num_classes), per_class)
    which = labels if simple else labels * modes_per_class + rng.integers(0, modes_per_class, size=labels.size)
    features = centres[which] + noise * rng.standard_normal((labels.size, dim))

    n_unlab = unlabeled_count if unlabeled_count is not None else num_classes * per_class
    u_which = rng.integers(0, len(centres), size=n_unlab)
    samples = centres[u_which] + noise * rng.standard_normal((n_unlab, dim)) + shift * direction
    return LabeledDataset(features, labels, num_classes), UnlabeledDataset(samples)


def nearest_centroid_accuracy(train: LabeledDataset, test: LabeledDataset) -> float:
    cents = np.stack([train.features[train.labels == k].mean(axis=0) for k in range(train.num_classes)])
    d = ((test.features[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == test.labels).mean())


# ---------------------------------------------------------------- partition


def class_windows(num_classes: int, num_groups: int, width: int) -> list[list[int]]:
    """Contiguous class windows per group.

    Adjacent windows overlap by one class (0-3, 3-6, 6-9 for ten classes and
    three groups).  That is the tightest layout that still keeps windows
    distinct, so anything that does not fit it is an error.
    """
    if width > num_classes:
        raise ValueError(f"classes_per_client={width} exceeds class count {num_classes}")
    if width < 2 and num_groups > 1:
        raise ValueError("windows of one class cannot overlap")
    if (num_groups - 1) * (width - 1) + width > num_classes:
        raise ValueError(f"cannot fit {num_groups} windows of {width} classes into {num_classes}")
    step = width - 1 if num_groups > 1 else 0
    return [list(range(g * step, g * step + width)) for g in range(num_groups)]


def partition_clients(data: LabeledDataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Split ``data`` into cluster-structured non-IID clients.

    Clients are laid out in contiguous equal groups.  Each draws
    ``majors_per_client`` randomly chosen window classes at ``major_count``
    samples and the rest at ``minor_count``, then ``test_per_class`` local test
    samples per window class.  Every draw is without replacement across the
    whole population.
    """
    if spec.num_groups <= 0 or spec.num_clients % spec.num_groups:
        raise ValueError("num_clients must be a positive multiple of num_groups")
    if not 0 <= spec.majors_per_client <= spec.classes_per_client:
        raise ValueError("majors_per_client must lie in [0, classes_per_client]")
    windows = class_windows(data.num_classes, spec.num_groups, spec.classes_per_client)
    rng = np.random.default_rng(spec.seed)
    pools = {k: list(rng.permutation(np.flatnonzero(data.labels == k))) for k in range(data.num_classes)}
    cursor = {k: 0 for k in pools}

    def take(k, n):
        start = cursor[k]
        if start + n > len(pools[k]):
            raise CapacityError(
                f"class {k} exhausted: need {start + n} samples, dataset has {len(pools[k])}"
            )
        cursor[k] = start + n
        return pools[k][start : start + n]

    per_group = spec.num_clients // spec.num_groups
    clients = []
    for cid in range(spec.num_clients):
        group = cid // per_group
        window = windows[group]
        majors = set(rng.choice(window, size=spec.majors_per_client, replace=False).tolist())
        train_idx, test_idx = [], []
        for k in window:
            train_idx += take(k, spec.major_count if k in majors else spec.minor_count)
        for k in window:
            test_idx += take(k, spec.test_per_class)
        train_idx, test_idx = np.array(train_idx, dtype=np.int64), np.array(test_idx, dtype=np.int64)
        clients.append(
            ClientDataset(cid, data.subset(train_idx), data.subset(test_idx), group, train_idx, test_idx)
        )
    return clients


def partition_manifest(clients: list[ClientDataset]) -> str:
    """CSV audit table: client_id, true_cluster, then per-class train counts."""
    k = clients[0].train.num_classes
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["client_id", "true_cluster", *[f"class_{i}" for i in range(k)], "train_size", "test_size"])
    for c in clients:
        writer.writerow([c.client_id, c.true_cluster, *c.class_counts().tolist(), len(c.train), len(c.test)])
    return buf.getvalue()


def format_class_table(clients: list[ClientDataset]) -> str:
    """Per-client class-count grid: '#' = major allocation, '.' = minor, ' ' = none."""
    k = clients[0].train.num_classes
    lines = ["client cluster | " + " ".join(f"{i % 10}" for i in range(k)) + " | n"]
    for c in clients:
        counts = c.class_counts()
        top = counts.max()
        cells = ["#" if n == top and n > 0 else ("." if n else " ") for n in counts]
        lines.append(f"{c.client_id:6d} {c.true_cluster:7d} | " + " ".join(cells) + f" | {counts.sum()}")
    return "\n".join(lines)


# ---------------------------------------------------------------- file formats

DS_MAGIC = b"CPCFLDS\x00"
DS_VERSION = 1


def save_dataset(dataset: LabeledDataset | UnlabeledDataset, path) -> None:
    """Binary container: magic, then uint32 version/count/dim/classes (0 when
    unlabeled), then little-endian float64 features, then int32 labels."""
    if isinstance(dataset, LabeledDataset):
        feats, labels, k = dataset.features, dataset.labels, dataset.num_classes
    else:
        feats, labels, k = dataset.samples, None, 0
    with open(path, "wb") as fh:
        fh.write(DS_MAGIC)
        fh.write(struct.pack("<IIII", DS_VERSION, feats.shape[0], feats.shape[1], k))
        fh.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def load_dataset(path) -> LabeledDataset | UnlabeledDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DS_MAGIC:
        raise ValueError(f"{path}: not a dataset container")
    version, n, dim, k = struct.unpack_from("<IIII", raw, 8)
    if version != DS_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 24
    expected = off + 8 * n * dim + (4 * n if k else 0)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off).reshape(n, dim).astype(np.float64)
    if not k:
        return UnlabeledDataset(feats)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 8 * n * dim).astype(np.int64)
    return LabeledDataset(feats, labels, k)


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, magic, header_dims):
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * header_dims:
        raise IDXTruncatedError(f"{path}: header truncated")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{header_dims}I", raw, 4)
    payload = raw[4 + 4 * header_dims :]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise IDXTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    return dims, np.frombuffer(payload, dtype=np.uint8, count=need)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an MNIST-style IDX image/label pair into flattened [0, 1] features."""
    (n_img, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise IDXCountMismatchError(f"{n_img} images but {n_lab} labels")
    feats = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if n_lab else 1
    return LabeledDataset(feats, labels, k)


# ---------------------------------------------------------------- relevance


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, LabeledDataset):
        return data.features
    if isinstance(data, UnlabeledDataset):
        return data.samples
    return np.asarray(data, dtype=np.float64)


def relevance_score(encoder, data_a, data_b, sample_n: int = 300, seed: int = 0) -> float:
    """Mean cross cosine similarity between encoder representations of two datasets.

    ``sample_n`` items are drawn without replacement from each side and all
    ``sample_n**2`` cross pairs are averaged.  Zero-norm representations
    contribute similarity 0.
    """
    a, b = _as_matrix(data_a), _as_matrix(data_b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("relevance_score needs nonempty datasets")
    if sample_n > min(len(a), len(b)):
        raise ValueError(f"sample_n={sample_n} exceeds dataset size {min(len(a), len(b))}")
    rng = np.random.default_rng(seed)
    ia = rng.choice(len(a), size=sample_n, replace=False)
    ib = rng.choice(len(b), size=sample_n, replace=False)
    ha = encoder.forward("encoder", a[ia], "eval")
    hb = encoder.forward("encoder", b[ib], "eval")

    def unit(h):
        n = np.linalg.norm(h, axis=1, keepdims=True)
        return np.where(n > 0, h / np.where(n > 0, n, 1.0), 0.0)

    return float((unit(ha) @ unit(hb).T).mean())
