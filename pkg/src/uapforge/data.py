"""Dataset ingestion, synthetic data, seeded mini-batches, pseudo-label cache.

Images are float arrays in [0, 1] with shape [n, C, H, W] (or [n, d] for flat
synthetic data). Every dataset carries an FNV-1a fingerprint of its image
bytes so runs and reports can name their inputs exactly.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import fnv1a_64

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    fingerprint: str = field(default="", compare=False)

    def __post_init__(self):
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image values outside [0, 1]: min {lo}, max {hi}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("label count does not match image count")
        if not self.fingerprint:
            self.fingerprint = f"{fnv1a_64(np.ascontiguousarray(self.images).tobytes()):016x}"

    def __len__(self):
        return self.images.shape[0]

    @property
    def sample_shape(self):
        return self.images.shape[1:]


@dataclass
class Batch:
    X: np.ndarray
    Y: np.ndarray
    indices: np.ndarray


def _read_u32be(f, what):
    data = f.read(4)
    if len(data) != 4:
        raise ValueError(f"truncated IDX file while reading {what}")
    return struct.unpack(">I", data)[0]


def load_idx(images_path, labels_path, name="", dtype=np.float32):
    """Load an IDX image/label file pair, scaling pixel bytes to [0, 1]."""
    with open(images_path, "rb") as f:
        magic = _read_u32be(f, "image magic")
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad magic {magic:#010x} in {images_path}, expected {IDX_IMAGE_MAGIC:#010x}")
        n = _read_u32be(f, "image count")
        rows = _read_u32be(f, "rows")
        cols = _read_u32be(f, "cols")
        raw = f.read()
    if len(raw) != n * rows * cols:
        raise ValueError(f"truncated image data in {images_path}: {len(raw)} bytes, expected {n * rows * cols}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols).astype(dtype) / 255.0
    fingerprint = f"{fnv1a_64(raw):016x}"  # over the raw pixel bytes, not the float view

    with open(labels_path, "rb") as f:
        magic = _read_u32be(f, "label magic")
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad magic {magic:#010x} in {labels_path}, expected {IDX_LABEL_MAGIC:#010x}")
        n_labels = _read_u32be(f, "label count")
        raw = f.read()
    if n_labels != n:
        raise ValueError(f"count mismatch: {n} images vs {n_labels} labels")
    if len(raw) != n_labels:
        raise ValueError(f"truncated label data in {labels_path}")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return Dataset(images=images, labels=labels, name=name or "idx", fingerprint=fingerprint)


def save_idx(dataset, images_path, labels_path):
    """Write a dataset as an IDX pair (pixels quantized back to bytes)."""
    images = dataset.images
    if images.ndim != 4 or images.shape[1] != 1:
        raise ValueError("IDX export expects [n, 1, H, W] images")
    if dataset.labels is None:
        raise ValueError("IDX export needs labels")
    n, _, rows, cols = images.shape
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def synth_blobs(num_classes, n, shape, spread, seed=0, modes=1, dtype=np.float32):
    """Gaussian clusters around seeded per-class centers, clipped to [0, 1].

    `shape` is either an int (flat feature vectors) or a (C, H, W) tuple.
    With `modes` > 1 each class mixes that many templates, so a small sample
    subset under-covers the class distribution. Class sizes are as equal as n
    allows; samples are laid out class-major.
    """
    if num_classes < 1 or n < num_classes:
        raise ValueError("need n >= num_classes >= 1")
    if spread <= 0:
        raise ValueError("spread must be positive")
    if modes < 1:
        raise ValueError("modes must be >= 1")
    sample_shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, modes, *sample_shape))
    counts = [n // num_classes + (1 if i < n % num_classes else 0) for i in range(num_classes)]
    images, labels = [], []
    for cls, count in enumerate(counts):
        # modes == 1 draws nothing here, keeping older seeded datasets identical
        which = rng.integers(0, modes, size=count) if modes > 1 else np.zeros(count, dtype=int)
        pts = centers[cls, which] + rng.normal(0.0, spread, size=(count, *sample_shape))
        images.append(np.clip(pts, 0.0, 1.0))
        labels.append(np.full(count, cls, dtype=np.int64))
    return Dataset(
        images=np.concatenate(images).astype(dtype),
        labels=np.concatenate(labels),
        name=f"blobs-k{num_classes}-n{n}-m{modes}-s{seed}",
    )


def subset(dataset, size, seed=0):
    """Seeded random subset without replacement (the limited-data setting)."""
    if size > len(dataset):
        raise ValueError(f"subset size {size} exceeds dataset size {len(dataset)}")
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=size, replace=False))
    return Dataset(
        images=dataset.images[idx],
        labels=None if dataset.labels is None else dataset.labels[idx],
        name=f"{dataset.name}-sub{size}",
    )


def minibatches(dataset, B, epoch_seed=0, labels=None):
    """Split a seeded permutation of the dataset into ceil(n/B) batches.

    The final batch may be partial and is kept. `labels` overrides the
    dataset's own labels (used for pseudo-labels during crafting).
    """
    if B < 1:
        raise ValueError("batch size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    Y = dataset.labels if labels is None else labels
    order = np.random.default_rng(epoch_seed).permutation(n)
    out = []
    for start in range(0, n, B):
        idx = order[start : start + B]
        out.append(Batch(X=dataset.images[idx], Y=None if Y is None else Y[idx], indices=idx))
    return out


_pseudo_label_cache: dict = {}


def pseudo_labels(model, dataset):
    """Labels assigned by the clean model's argmax, computed once and cached."""
    key = (model.fingerprint(), dataset.fingerprint)
    if key not in _pseudo_label_cache:
        _pseudo_label_cache[key] = model.predict(dataset.images)
    return _pseudo_label_cache[key]


def clear_pseudo_label_cache():
    _pseudo_label_cache.clear()
