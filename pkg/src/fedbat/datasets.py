"""Data ingestion and client partitioning.

Sources are IDX files (the MNIST/Fashion-MNIST distribution format) and a
seeded Gaussian-blob generator. Partitioners split sample indices across
clients: IID, Dirichlet label skew, and fixed-size label subsets per client.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import SeededRng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class IdxFormatError(DatasetError):
    pass


class IdxTruncatedError(DatasetError):
    pass


class IdxCountMismatchError(DatasetError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise DatasetError("features must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


# -- IDX ---------------------------------------------------------------------

def _read_idx(path, expected_magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic {magic:#010x}, expected {expected_magic:#010x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise IdxTruncatedError(f"{path}: expected {need} data bytes, found {len(body)}")
    return dims, body[:need]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    (n_img, rows, cols), pix = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), lab = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise IdxCountMismatchError(f"{n_img} images but {n_lab} labels")
    features = np.frombuffer(pix, dtype=np.uint8).reshape(n_img, rows * cols) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(features, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# -- synthetic ---------------------------------------------------------------

def synth_blobs(n: int, d: int, c: int, spread: float, seed: int, *, center_seed: int | None = None) -> LabeledDataset:
    """Balanced Gaussian clusters around seeded centers, rescaled to [0, 1].

    Centers are drawn from ``center_seed`` (defaults to ``seed``), so a train
    and a test split can share centers while drawing different samples.
    """
    if c < 2:
        raise ValueError("need at least two classes")
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    root = SeededRng(seed)
    centers = SeededRng(seed if center_seed is None else center_seed).split("centers").normal_array((c, d))
    labels = np.arange(n) % c
    labels = labels[root.split("order").permutation(n)]
    noise = root.split("noise").normal_array((n, d))
    x = centers[labels] + spread * noise
    # fixed affine map of the center box so the scaling does not depend on the sample
    lo, hi = -4.0 - 4.0 * spread, 4.0 + 4.0 * spread
    features = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return LabeledDataset(features, labels, c)


# -- partitioning ------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    scheme: str  # "iid", "dirichlet" or "label-shard"
    n_clients: int
    seed: int = 0
    beta: float = 0.3
    labels_per_client: int = 3

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet", "label-shard"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        if self.scheme == "dirichlet" and not self.beta > 0:
            raise ValueError("dirichlet beta must be positive")
        if self.scheme == "label-shard" and self.labels_per_client < 1:
            raise ValueError("labels_per_client must be positive")


def partition(data: LabeledDataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Split ``range(len(data))`` into ``spec.n_clients`` disjoint nonempty shards."""
    n, N = len(data), spec.n_clients
    if N > n:
        raise DatasetError(f"{N} clients but only {n} samples")
    rng = SeededRng(spec.seed).split(("partition", spec.scheme))
    if spec.scheme == "iid":
        shards = [np.sort(s) for s in np.array_split(rng.permutation(n), N)]
    elif spec.scheme == "dirichlet":
        shards = _dirichlet(data.labels, data.num_classes, N, spec.beta, rng)
    else:
        if spec.labels_per_client > data.num_classes:
            raise DatasetError(
                f"labels_per_client={spec.labels_per_client} exceeds {data.num_classes} classes"
            )
        if N * spec.labels_per_client < data.num_classes:
            # some label would have no owner and its samples would be dropped
            raise DatasetError(
                f"{N} clients x {spec.labels_per_client} labels cannot cover {data.num_classes} classes"
            )
        shards = _label_shard(data.labels, data.num_classes, N, spec.labels_per_client, rng)
    return _repair_empty(shards)


def _dirichlet(labels, C, N, beta, rng) -> list[np.ndarray]:
    buckets: list[list[np.ndarray]] = [[] for _ in range(N)]
    for c in range(C):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(N, beta))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].append(part)
    return [np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64) for b in buckets]


def _label_shard(labels, C, N, s, rng) -> list[np.ndarray]:
    perm = rng.permutation(C)
    # round-robin over the permuted labels, so every label has an owner once N*s >= C
    owners: list[list[int]] = [[] for _ in range(C)]
    pos = 0
    for k in range(N):
        chosen: list[int] = []
        while len(chosen) < s:
            lab = int(perm[pos % C])
            pos += 1
            if lab not in chosen:
                chosen.append(lab)
        for lab in chosen:
            owners[lab].append(k)
    buckets: list[list[np.ndarray]] = [[] for _ in range(N)]
    for c in range(C):
        if not owners[c]:
            continue
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        for k, part in zip(owners[c], np.array_split(idx, len(owners[c]))):
            buckets[k].append(part)
    return [np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64) for b in buckets]


def _repair_empty(shards: list[np.ndarray]) -> list[np.ndarray]:
    shards = [np.asarray(s, dtype=np.int64) for s in shards]
    for k in range(len(shards)):
        if shards[k].size == 0:
            big = max(range(len(shards)), key=lambda j: (shards[j].size, -j))
            shards[k] = shards[big][-1:]
            shards[big] = shards[big][:-1]
    return shards


@dataclass
class PartitionStats:
    sizes: np.ndarray  # (N,)
    label_counts: np.ndarray  # (N, C)
    mean_tv: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        C = self.label_counts.shape[1]
        w.writerow(["client", "size", "n_labels"] + [f"label_{c}" for c in range(C)])
        for k, (size, row) in enumerate(zip(self.sizes, self.label_counts)):
            w.writerow([k, int(size), int(np.count_nonzero(row))] + [int(v) for v in row])
        w.writerow(["mean_tv", f"{self.mean_tv:.6f}", ""] + [""] * C)
        return buf.getvalue()


def partition_stats(shards, data: LabeledDataset) -> PartitionStats:
    """Shard sizes, per-label histograms and mean pairwise total-variation distance."""
    C = data.num_classes
    counts = np.stack([np.bincount(data.labels[s], minlength=C) for s in shards])
    sizes = counts.sum(axis=1)
    dist = counts / np.maximum(sizes, 1)[:, None]
    N = len(shards)
    if N < 2:
        mean_tv = 0.0
    else:
        tv = 0.5 * np.abs(dist[:, None, :] - dist[None, :, :]).sum(axis=2)
        mean_tv = float(tv[np.triu_indices(N, k=1)].mean())
    return PartitionStats(sizes=sizes, label_counts=counts, mean_tv=mean_tv)
