"""Dataset ingestion and deterministic synthetic data.

Parses IDX-format image/label files (the MNIST family, optionally gzipped)
and generates seeded synthetic classification sets so every test and pipeline
run works offline.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


@dataclass
class ProbeSet:
    inputs: np.ndarray
    labels: Optional[np.ndarray] = None
    provenance: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.shape[0] < 1:
            raise ValueError("probe set must contain at least one sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape[0] != self.inputs.shape[0]:
                raise ValueError("label count does not match input count")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def __len__(self) -> int:
        return self.size


def parse_idx(data: bytes) -> np.ndarray:
    """Parse IDX bytes: images -> [n, rows, cols] floats in [0,1], labels -> [n]."""
    if len(data) < 4:
        raise ValueError("truncated IDX header at offset 0")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == IDX_LABEL_MAGIC:
        ndim = 1
    elif magic == IDX_IMAGE_MAGIC:
        ndim = 3
    else:
        raise ValueError(f"bad IDX magic 0x{magic:08x} at offset 0")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise ValueError(f"truncated IDX dimensions at offset {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims))
    if len(data) != header_len + count:
        raise ValueError(
            f"IDX payload length {len(data) - header_len} does not match "
            f"dims {dims} (expected {count} bytes from offset {header_len})"
        )
    payload = np.frombuffer(data, dtype=np.uint8, offset=header_len)
    if magic == IDX_LABEL_MAGIC:
        return payload.astype(np.int64)
    return payload.reshape(dims).astype(np.float64) / 255.0


def serialize_idx(array: np.ndarray) -> bytes:
    """Inverse of parse_idx: labels from int arrays, images from [0,1] floats."""
    array = np.asarray(array)
    if array.ndim == 1:
        payload = array.astype(np.uint8)
        head = struct.pack(">II", IDX_LABEL_MAGIC, array.shape[0])
    elif array.ndim == 3:
        payload = np.round(array * 255.0).astype(np.uint8)
        head = struct.pack(">IIII", IDX_IMAGE_MAGIC, *array.shape)
    else:
        raise ValueError(f"cannot serialize rank-{array.ndim} array as IDX")
    return head + payload.tobytes()


def load_idx(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return parse_idx(data)


def load_idx_dataset(images_path: str, labels_path: str) -> ProbeSet:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    return ProbeSet(images, labels, provenance=f"idx:{images_path}")


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    counts = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    return np.repeat(np.arange(classes), counts)


def synthetic_dataset(kind: str, n: int, classes: int, seed: int,
                      feature_dim: int = 2, separation: float = 5.0) -> ProbeSet:
    """Deterministic synthetic classification data.

    blobs: one Gaussian cluster per class; expected pairwise center distance is
    `separation` noise units, so a small MLP separates them without being
    trivially perfect. rings: concentric rings in the first two features,
    requiring a nonlinear boundary.
    """
    if n < classes:
        raise ValueError(f"need at least one sample per class ({n} < {classes})")
    kind_tag = int.from_bytes(kind.encode()[:4].ljust(4, b"\0"), "big")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), kind_tag]))
    labels = _balanced_labels(n, classes)
    if kind == "blobs":
        scale = separation / np.sqrt(2.0 * feature_dim)
        centers = rng.normal(size=(classes, feature_dim)) * scale
        inputs = centers[labels] + rng.normal(size=(n, feature_dim))
    elif kind == "rings":
        radii = 1.0 + 2.0 * np.arange(classes)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        r = radii[labels] + rng.normal(scale=0.25, size=n)
        inputs = np.zeros((n, feature_dim))
        inputs[:, 0] = r * np.cos(theta)
        inputs[:, 1] = r * np.sin(theta)
        if feature_dim > 2:
            inputs[:, 2:] = rng.normal(scale=0.1, size=(n, feature_dim - 2))
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    perm = rng.permutation(n)
    return ProbeSet(inputs[perm], labels[perm],
                    provenance=f"synthetic:{kind}:seed={seed}")


def subset(dataset: ProbeSet, k: int, seed: int) -> ProbeSet:
    """Uniform sample of k items without replacement, deterministic per seed."""
    if k < 1:
        raise ValueError(f"subset size must be >= 1, got {k}")
    if k > dataset.size:
        raise ValueError(f"subset size {k} exceeds dataset size {dataset.size}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B5E7]))
    idx = rng.choice(dataset.size, size=k, replace=False)
    labels = dataset.labels[idx] if dataset.labels is not None else None
    return ProbeSet(dataset.inputs[idx], labels,
                    provenance=f"{dataset.provenance}|subset:{k}:seed={seed}")
