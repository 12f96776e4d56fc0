"""Toy dataset generation, binary ingestion, Dirichlet partitioning, batching.

The toy generator draws each class as a fixed patch-aligned template
(half-planes, stripes, checkerboards, blobs) plus Gaussian pixel noise, so
the task is linearly separable at low noise and the class identity needs
several patches to pin down — single patches are ambiguous between
template pairs, which is what makes extreme masking ratios visibly hurt.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass
class Dataset:
    x: np.ndarray  # [N, channels, h, w] float32
    y: np.ndarray  # [N] int64

    def __len__(self):
        return len(self.y)


@dataclass
class ClientDataset:
    client_id: int
    x: np.ndarray
    y: np.ndarray

    @property
    def n_k(self) -> int:
        return len(self.y)

    @property
    def classes_present(self) -> np.ndarray:
        return np.unique(self.y)

    @property
    def c_k(self) -> int:
        return len(self.classes_present)


@dataclass
class PartitionSpec:
    """Sample index -> client id map drawn per class from Dir(beta)."""

    beta: float
    k: int
    seed: int
    assignment: np.ndarray  # [N] int client ids


_DARK, _BRIGHT = 0.2, 0.8


def _class_template(cls: int, h: int, w: int, p: int, channels: int) -> np.ndarray:
    """Deterministic patch-aligned pattern for one class."""
    gy = (np.arange(h) // p)[:, None]   # patch-row index per pixel
    gx = (np.arange(w) // p)[None, :]
    gh, gw = h // p, w // p
    masks = [
        gy < (gh + 1) // 2,             # top half bright
        gy >= (gh + 1) // 2,            # bottom half bright
        gx < (gw + 1) // 2,             # left half bright
        gx >= (gw + 1) // 2,            # right half bright
        (gy % 2) == 0,                  # horizontal patch stripes
        (gx % 2) == 0,                  # vertical patch stripes
        ((gy + gx) % 2) == 0,           # patch checkerboard
        (np.abs(gy - (gh - 1) / 2) <= gh / 4) & (np.abs(gx - (gw - 1) / 2) <= gw / 4),
        (gy == gx),                     # diagonal
        (gy + gx) >= (gh + gw) // 2,    # lower-right triangle
    ]
    if cls >= len(masks):
        raise ConfigError(f"toy dataset supports at most {len(masks)} classes")
    img = np.where(np.broadcast_to(masks[cls], (h, w)), _BRIGHT, _DARK)
    return np.broadcast_to(img, (channels, h, w)).astype(np.float32)


def make_toy_dataset(classes: int, per_class: int, h: int, w_img: int,
                     noise: float, rng, channels: int = 1,
                     p: int | None = None) -> Dataset:
    """Balanced synthetic set: class template + N(0, noise) pixels.

    p sets the template granularity; pass the model patch size so the
    patterns are patch-aligned (defaults to a quarter of the short side).
    """
    if classes < 1 or per_class < 1:
        raise ConfigError("classes and per_class must be >= 1")
    if p is None:
        p = max(1, min(h, w_img) // 4)
    xs, ys = [], []
    for cls in range(classes):
        tpl = _class_template(cls, h, w_img, p, channels)
        samples = tpl[None] + rng.normal(0.0, noise, size=(per_class, channels, h, w_img))
        xs.append(samples.astype(np.float32))
        ys.append(np.full(per_class, cls, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys))


def dirichlet_partition(labels: np.ndarray, k: int, beta: float, rng,
                        seed: int = 0) -> PartitionSpec:
    """Per class, split that class's samples across k clients by
    Dir(beta) proportions with largest-remainder rounding."""
    if k < 1:
        raise ConfigError(f"client count must be >= 1, got {k}")
    if beta <= 0:
        raise ConfigError(f"dirichlet beta must be > 0, got {beta}")
    labels = np.asarray(labels)
    assignment = np.full(len(labels), -1, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(k, beta))
        counts = _largest_remainder(props, len(idx))
        start = 0
        for client, cnt in enumerate(counts):
            assignment[idx[start:start + cnt]] = client
            start += cnt
    assert (assignment >= 0).all()
    return PartitionSpec(beta=beta, k=k, seed=seed, assignment=assignment)


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    scaled = props * total
    counts = np.floor(scaled).astype(np.int64)
    short = total - counts.sum()
    frac = scaled - counts
    # deterministic tie-break: larger fraction first, then lower index
    order = np.lexsort((np.arange(len(props)), -frac))
    counts[order[:short]] += 1
    return counts


def split_clients(ds: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    out = []
    for client in range(spec.k):
        idx = np.flatnonzero(spec.assignment == client)
        out.append(ClientDataset(client, ds.x[idx], ds.y[idx]))
    return out


def partition_histogram(spec: PartitionSpec, labels: np.ndarray, classes: int) -> np.ndarray:
    """[k, classes] per-client class counts."""
    hist = np.zeros((spec.k, classes), dtype=np.int64)
    for client, cls in zip(spec.assignment, labels):
        hist[client, cls] += 1
    return hist


def histogram_csv(hist: np.ndarray) -> str:
    classes = hist.shape[1]
    lines = ["client," + ",".join(f"class_{c}" for c in range(classes))]
    for client, row in enumerate(hist):
        lines.append(f"{client}," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# augmentation and batching


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def augment(image: np.ndarray, rng, pad: int = 2) -> np.ndarray:
    """Pad-reflect then random-crop back, flip with p=0.5, brightness x[0.8, 1.2]."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    oy = int(rng.integers(0, 2 * pad + 1))
    ox = int(rng.integers(0, 2 * pad + 1))
    out = padded[:, oy:oy + h, ox:ox + w]
    if rng.random() < 0.5:
        out = hflip(out)
    factor = rng.uniform(0.8, 1.2)
    return np.ascontiguousarray(out * np.float32(factor), dtype=np.float32)


def augment_batch(images: np.ndarray, rng, pad: int = 2) -> np.ndarray:
    return np.stack([augment(img, rng, pad) for img in images])


def batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng):
    """One full shuffled pass; the final short batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(y)
    if n == 0:
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield x[sel], y[sel]


# ---------------------------------------------------------------------------
# flat binary dataset format (external ingestion)

_HEADER = struct.Struct("<IIII")  # sample count, channels, h, w_img


def save_dataset_bin(path, ds: Dataset):
    n, c, h, w = ds.x.shape
    chunks = [_HEADER.pack(n, c, h, w)]
    for i in range(n):
        label = int(ds.y[i])
        if not 0 <= label < 256:
            raise DimensionError("binary format stores labels as one byte")
        chunks.append(struct.pack("<B", label))
        chunks.append(ds.x[i].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset_bin(path) -> Dataset:
    blob = Path(path).read_bytes()
    n, c, h, w = _HEADER.unpack_from(blob, 0)
    off = _HEADER.size
    sample_bytes = 1 + 4 * c * h * w
    if len(blob) != off + n * sample_bytes:
        raise DimensionError("binary dataset length does not match its header")
    xs = np.empty((n, c, h, w), dtype=np.float32)
    ys = np.empty(n, dtype=np.int64)
    for i in range(n):
        ys[i] = blob[off]
        off += 1
        xs[i] = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
        off += 4 * c * h * w
    return Dataset(xs, ys)
