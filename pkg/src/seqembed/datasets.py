"""Identity/sequence training data: IDX ingestion, synthetic clusters,
the identity-vs-sequence split, container serialization, and batch plans.

Two kinds of samples share one label space of N classes: labels 0..C-1
are identity classes (source flag Z=0) and labels C..N-1 are sequence
classes (Z=1). Split outputs additionally remember each sample's
underlying ground-truth class so downstream evaluation can score
verification pairs against the truth rather than the sequence label.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import (
    ConfigurationError,
    ConsistencyError,
    FormatError,
    LabelError,
    ParameterError,
)
from .numerics import Rng, as_tensor

IDENTITY = 0
SEQUENCE = 1

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801
_SQFD_MAGIC = b"SQFD"


@dataclass(frozen=True)
class LabelSpace:
    """C identity classes followed by N-C sequence classes."""

    num_identities: int
    num_sequences: int = 0

    def __post_init__(self):
        if self.num_identities < 1:
            raise ParameterError("need at least one identity class")
        if self.num_sequences < 0:
            raise ParameterError("num_sequences must be >= 0")

    @property
    def total(self) -> int:
        return self.num_identities + self.num_sequences

    def is_identity_label(self, label: int) -> bool:
        return 0 <= label < self.num_identities


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    label: int
    source: int  # IDENTITY or SEQUENCE
    true_label: int


class Dataset:
    """Immutable sample collection with a label space.

    Stored struct-of-arrays: `images[i]` is the i-th sample's tensor,
    `labels[i]` its class in the unified space, `sources[i]` its Z flag
    and `true_labels[i]` the underlying ground-truth class (equal to
    `labels[i]` unless the dataset came out of a split).
    """

    def __init__(self, images, labels, sources, label_space: LabelSpace,
                 true_labels=None):
        self.images = as_tensor(images)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.sources = np.asarray(sources, dtype=np.uint8)
        self.true_labels = (
            self.labels.copy()
            if true_labels is None
            else np.asarray(true_labels, dtype=np.int64)
        )
        self.label_space = label_space
        self._validate()

    def _validate(self):
        n = len(self.labels)
        if not (len(self.images) == len(self.sources) == len(self.true_labels) == n):
            raise ConsistencyError("images/labels/sources lengths differ")
        ls = self.label_space
        if n and (self.labels.min() < 0 or self.labels.max() >= ls.total):
            raise LabelError("label outside label space")
        ident = self.sources == IDENTITY
        if np.any(self.labels[ident] >= ls.num_identities):
            raise LabelError("identity sample with sequence label")
        if np.any(self.labels[~ident] < ls.num_identities):
            raise LabelError("sequence sample with identity label")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]),
                      int(self.sources[i]), int(self.true_labels[i]))

    @property
    def has_sequences(self) -> bool:
        return bool(np.any(self.sources == SEQUENCE))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.sources[idx],
                       self.label_space, self.true_labels[idx])


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    sequence_fraction: Optional[float] = None
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.sequence_fraction is not None and not 0.0 <= self.sequence_fraction <= 1.0:
            raise ParameterError("sequence_fraction must be in [0, 1]")


@dataclass
class SampleBatch:
    images: np.ndarray
    labels: np.ndarray
    sources: np.ndarray
    indices: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_idx(path, magic, ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 * (1 + ndim):
        raise FormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    payload = raw[4 + 4 * ndim:]
    if len(payload) != count:
        raise FormatError(f"{path}: payload of {len(payload)} bytes, expected {count}")
    return dims, np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an images/labels IDX pair as an identity dataset.

    Pixels are mapped from [0, 255] to [-1, 1] by (v - 127.5) / 128.
    """
    idims, ibytes = _read_idx(images_path, _IDX_IMAGES_MAGIC, 3)
    ldims, lbytes = _read_idx(labels_path, _IDX_LABELS_MAGIC, 1)
    n, h, w = idims
    if ldims[0] != n:
        raise ConsistencyError(
            f"{images_path} has {n} images but {labels_path} has {ldims[0]} labels")
    images = (ibytes.astype(np.float64).reshape(n, h, w, 1) - 127.5) / 128.0
    labels = lbytes.astype(np.int64)
    if n == 0:
        raise FormatError(f"{images_path}: empty IDX file")
    space = LabelSpace(num_identities=int(labels.max()) + 1)
    return Dataset(images, labels, np.zeros(n, dtype=np.uint8), space)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx`; pixel bytes recovered by v*128 + 127.5,
    which is exact for values produced by the loader."""
    imgs = dataset.images
    if imgs.ndim != 4 or imgs.shape[3] != 1:
        raise FormatError("IDX export needs (n, h, w, 1) images")
    n, h, w, _ = imgs.shape
    px = np.rint(imgs[..., 0] * 128.0 + 127.5)
    px = np.clip(px, 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, h, w))
        fh.write(px.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Synthetic clusters
# ---------------------------------------------------------------------------

def make_synthetic_clusters(rng: Rng, num_classes: int, per_class: int,
                            dim: int, spread: float, separation: float) -> Dataset:
    """Gaussian blobs around class means drawn uniformly on a sphere of
    radius `separation`; noise std `spread` (0 allowed: degenerate blobs)."""
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ParameterError("counts must be >= 1")
    if spread < 0:
        raise ParameterError("spread must be >= 0")
    means = np.empty((num_classes, dim))
    for c in range(num_classes):
        v = rng.normal_array(dim)
        means[c] = separation * v / np.linalg.norm(v)
    n = num_classes * per_class
    noise = rng.normal_array((n, dim)) * spread
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    images = means[labels] + noise
    return Dataset(images, labels, np.zeros(n, dtype=np.uint8),
                   LabelSpace(num_identities=num_classes))


# ---------------------------------------------------------------------------
# Identity / sequence split
# ---------------------------------------------------------------------------

def split_identity_sequence(data: Dataset, rng: Rng, identity_class_count: int,
                            min_seq_len: int, max_seq_len: int) -> Dataset:
    """Keep a random subset of ground-truth classes as identity classes
    0..C-1 and carve every remaining class into sequences of random length
    in [min_seq_len, max_seq_len] (a shorter tail run is kept as its own
    sequence). No ground-truth class ends up on both sides; several
    sequences may share one underlying class.
    """
    classes = np.unique(data.true_labels)
    if identity_class_count >= len(classes):
        raise ParameterError(
            f"identity_class_count={identity_class_count} must be below the "
            f"{len(classes)} ground-truth classes")
    if identity_class_count < 1:
        raise ParameterError("identity_class_count must be >= 1")
    if not 1 <= min_seq_len <= max_seq_len:
        raise ParameterError("need 1 <= min_seq_len <= max_seq_len")

    order = rng.permutation(len(classes))
    identity_classes = np.sort(classes[order[:identity_class_count]])
    ident_new = {int(c): i for i, c in enumerate(identity_classes)}
    seq_classes = np.sort(classes[order[identity_class_count:]])

    new_labels = np.empty(len(data), dtype=np.int64)
    new_sources = np.empty(len(data), dtype=np.uint8)
    for c, new in ident_new.items():
        mask = data.true_labels == c
        new_labels[mask] = new
        new_sources[mask] = IDENTITY

    span = max_seq_len - min_seq_len + 1
    next_seq = identity_class_count
    for c in seq_classes:
        members = np.flatnonzero(data.true_labels == c)
        members = members[rng.permutation(len(members))]
        pos = 0
        while pos < len(members):
            length = min_seq_len + rng.randint(span) if span > 1 else min_seq_len
            run = members[pos:pos + length]
            new_labels[run] = next_seq
            new_sources[run] = SEQUENCE
            next_seq += 1
            pos += len(run)

    space = LabelSpace(identity_class_count, next_seq - identity_class_count)
    return Dataset(data.images, new_labels, new_sources, space,
                   true_labels=data.true_labels)


def sequence_length_histogram(data: Dataset) -> dict[int, int]:
    """length -> number of sequences of that length."""
    seq = data.labels[data.sources == SEQUENCE]
    if seq.size == 0:
        return {}
    counts = np.bincount(seq - data.label_space.num_identities)
    hist: dict[int, int] = {}
    for length in counts[counts > 0]:
        hist[int(length)] = hist.get(int(length), 0) + 1
    return dict(sorted(hist.items()))


# ---------------------------------------------------------------------------
# Batch iteration
# ---------------------------------------------------------------------------

def epoch_batches(data: Dataset, plan: BatchPlan, epoch: int,
                  rng: Optional[Rng] = None) -> list[np.ndarray]:
    """Deterministic batch index lists for one epoch.

    Without a sequence fraction the epoch is one global shuffle cut into
    batches (last one may be short), so each sample appears exactly once.
    With a fraction, every batch takes round(batch_size * fraction)
    sequence samples and the rest identity samples; the shorter side is
    resampled with replacement and the epoch ends when the longer side is
    exhausted.
    """
    if len(data) == 0:
        raise ParameterError("dataset is empty")
    base = rng if rng is not None else Rng(plan.shuffle_seed)
    erng = base.spawn(epoch)

    if plan.sequence_fraction is None:
        order = erng.permutation(len(data))
        return [order[i:i + plan.batch_size]
                for i in range(0, len(order), plan.batch_size)]

    n_seq = int(round(plan.batch_size * plan.sequence_fraction))
    n_id = plan.batch_size - n_seq
    id_pool = np.flatnonzero(data.sources == IDENTITY)
    seq_pool = np.flatnonzero(data.sources == SEQUENCE)
    if n_id > 0 and id_pool.size == 0:
        raise ConfigurationError("sequence_fraction requires identity samples")
    if n_seq > 0 and seq_pool.size == 0:
        raise ConfigurationError("sequence_fraction requires sequence samples")

    id_order = id_pool[erng.permutation(id_pool.size)] if id_pool.size else id_pool
    seq_order = seq_pool[erng.permutation(seq_pool.size)] if seq_pool.size else seq_pool
    per_side = []
    if n_id > 0:
        per_side.append(-(-id_order.size // n_id))
    if n_seq > 0:
        per_side.append(-(-seq_order.size // n_seq))
    num_batches = max(per_side)

    def take(order, start, count):
        if count == 0:
            return np.empty(0, dtype=np.int64)
        chunk = order[start:start + count]
        short = count - chunk.size
        if short > 0:  # exhausted: resample with replacement
            extra = order[[erng.randint(order.size) for _ in range(short)]]
            chunk = np.concatenate([chunk, extra])
        return chunk

    batches = []
    for b in range(num_batches):
        ids = take(id_order, b * n_id, n_id)
        seqs = take(seq_order, b * n_seq, n_seq)
        batches.append(np.concatenate([ids, seqs]))
    return batches


def iterate_batches(data: Dataset, plan: BatchPlan,
                    rng: Optional[Rng] = None,
                    start_iteration: int = 0) -> Iterator[SampleBatch]:
    """Endless deterministic batch stream; epochs reshuffle from
    shuffle_seed + epoch index. `start_iteration` fast-forwards (used when
    resuming from a checkpoint)."""
    per_epoch = len(epoch_batches(data, plan, 0, rng))
    it = start_iteration
    while True:
        epoch, offset = divmod(it, per_epoch)
        batches = epoch_batches(data, plan, epoch, rng)
        for idx in batches[offset:]:
            yield SampleBatch(data.images[idx], data.labels[idx],
                              data.sources[idx], idx)
            it += 1


# ---------------------------------------------------------------------------
# SQFD container
# ---------------------------------------------------------------------------

def write_sqfd(dataset: Dataset, path) -> None:
    """Flat binary container. Version 1 holds (label, source, dims, data)
    per sample; version 2 appends the ground-truth class after the source
    byte and is emitted only when true labels differ from labels."""
    version = 2 if not np.array_equal(dataset.true_labels, dataset.labels) else 1
    ls = dataset.label_space
    with open(path, "wb") as fh:
        fh.write(_SQFD_MAGIC)
        fh.write(struct.pack("<IIIQ", version, ls.num_identities, ls.total,
                             len(dataset)))
        dims = dataset.images.shape[1:]
        for i in range(len(dataset)):
            fh.write(struct.pack("<IB", int(dataset.labels[i]),
                                 int(dataset.sources[i])))
            if version == 2:
                fh.write(struct.pack("<I", int(dataset.true_labels[i])))
            fh.write(struct.pack("<B", len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(dataset.images[i].astype("<f8").tobytes())


def read_sqfd(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _SQFD_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, c, n_total, count = struct.unpack_from("<IIIQ", raw, 4)
    if version not in (1, 2):
        raise FormatError(f"{path}: unsupported version {version}")
    off = 24
    labels = np.empty(count, dtype=np.int64)
    sources = np.empty(count, dtype=np.uint8)
    true_labels = np.empty(count, dtype=np.int64)
    images = None
    for i in range(count):
        labels[i], sources[i] = struct.unpack_from("<IB", raw, off)
        off += 5
        if version == 2:
            (true_labels[i],) = struct.unpack_from("<I", raw, off)
            off += 4
        else:
            true_labels[i] = labels[i]
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(dims))
        if images is None:
            images = np.empty((count, *dims))
        vals = np.frombuffer(raw, dtype="<f8", count=size, offset=off)
        images[i] = vals.reshape(dims)
        off += 8 * size
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return Dataset(images, labels, sources,
                   LabelSpace(c, n_total - c), true_labels)
