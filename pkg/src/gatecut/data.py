"""Desk-scale datasets: synthetic generators with known structure, an IDX
(MNIST-format) loader, and the with-replacement mini-batch sampler.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .model import GateSample, NetworkSpec, WeightSet, forward
from .numerics import Rng

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, m), float64
    targets: np.ndarray  # (N, n) floats or (N,) class indices
    task: str
    train_idx: np.ndarray
    test_idx: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite inputs")
        n = self.inputs.shape[0]
        joined = np.sort(np.concatenate([self.train_idx, self.test_idx]))
        if not np.array_equal(joined, np.arange(n)):
            raise ValueError("train/test split must be disjoint and covering")
        if self.task == "classification":
            t = np.asarray(self.targets)
            if t.min() < 0:
                raise ValueError("negative class index")

    @property
    def n_train(self) -> int:
        return self.train_idx.size

    def train_inputs(self) -> np.ndarray:
        return self.inputs[self.train_idx]

    def train_targets(self) -> np.ndarray:
        return self.targets[self.train_idx]

    def test_inputs(self) -> np.ndarray:
        return self.inputs[self.test_idx]

    def test_targets(self) -> np.ndarray:
        return self.targets[self.test_idx]


def standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0.0] = 1.0
    return (x - mu) / sd


def _split(n: int, test_fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(rng.uniform(n), kind="stable")
    n_test = int(round(n * test_fraction))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def gen_teacher_student(
    teacher_spec: NetworkSpec,
    teacher_weights: WeightSet,
    n: int,
    noise: float,
    rng: Rng,
    test_fraction: float = 0.2,
) -> Dataset:
    """Regression data y = teacher(x) + noise with unit-Gaussian inputs."""
    m = teacher_spec.in_width
    x = rng.standard_normal(n * m).reshape(n, m)
    y, _ = forward(teacher_spec, teacher_weights, GateSample.all_ones(teacher_spec), x)
    if noise > 0:
        y = y + noise * rng.standard_normal(y.size).reshape(y.shape)
    train_idx, test_idx = _split(n, test_fraction, rng)
    return Dataset(x, y, "regression", train_idx, test_idx, provenance="teacher_student")


def gen_blobs(
    classes: int,
    n: int,
    separation: float,
    rng: Rng,
    dim: int = 2,
    test_fraction: float = 0.2,
) -> Dataset:
    """Isotropic Gaussian blobs on a ring, balanced within one sample."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    centers = np.stack(
        [
            separation
            * np.array(
                [np.cos(2 * np.pi * k / classes), np.sin(2 * np.pi * k / classes)]
                + [0.0] * (dim - 2)
            )
            for k in range(classes)
        ]
    )
    labels = np.arange(n) % classes
    x = centers[labels] + rng.standard_normal(n * dim).reshape(n, dim)
    perm = np.argsort(rng.uniform(n), kind="stable")
    x, labels = x[perm], labels[perm]
    train_idx, test_idx = _split(n, test_fraction, rng)
    return Dataset(
        standardize(x), labels.astype(np.int64), "classification", train_idx, test_idx, "blobs"
    )


def gen_spirals(
    n: int, turns: float, rng: Rng, noise: float = 0.05, test_fraction: float = 0.2
) -> Dataset:
    """Two interleaved spirals; `turns` controls how far they wind."""
    half = n // 2
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(n - half, dtype=np.int64)])
    t = rng.uniform(n)
    angle = turns * 2 * np.pi * t + np.pi * labels
    radius = 0.2 + 0.8 * t
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    x = x + noise * rng.standard_normal(2 * n).reshape(n, 2)
    perm = np.argsort(rng.uniform(n), kind="stable")
    x, labels = x[perm], labels[perm]
    train_idx, test_idx = _split(n, test_fraction, rng)
    return Dataset(
        standardize(x), labels, "classification", train_idx, test_idx, "spirals"
    )


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated at byte 0 (no magic)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ValueError(
            f"{path}: wrong magic 0x{magic:08X} at byte 0, expected 0x{expected_magic:08X}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated at byte {len(raw)} (incomplete dimensions)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise ValueError(f"{path}: truncated at byte {len(raw)}, need {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header, count=count).reshape(dims)


def load_idx(
    images_path: str,
    labels_path: str,
    test_images_path: str | None = None,
    test_labels_path: str | None = None,
) -> Dataset:
    """Load IDX image/label files; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_MAGIC_IMAGES)
    labels = _read_idx(labels_path, IDX_MAGIC_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if test_images_path is not None:
        ti = _read_idx(test_images_path, IDX_MAGIC_IMAGES)
        tl = _read_idx(test_labels_path, IDX_MAGIC_LABELS)
        if ti.shape[0] != tl.shape[0]:
            raise ValueError(f"image/label count mismatch: {ti.shape[0]} vs {tl.shape[0]}")
        xt = ti.reshape(ti.shape[0], -1).astype(np.float64) / 255.0
        train_idx = np.arange(x.shape[0])
        test_idx = np.arange(x.shape[0], x.shape[0] + xt.shape[0])
        x = np.concatenate([x, xt])
        y = np.concatenate([y, tl.astype(np.int64)])
    else:
        train_idx = np.arange(x.shape[0])
        test_idx = np.arange(0)
    return Dataset(x, y, "classification", train_idx, test_idx, provenance="idx")


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write images (N, H, W) uint8 and labels (N,) uint8 in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_MAGIC_LABELS, labels.shape[0]))
        fh.write(labels.tobytes())


def sample_batch(dataset: Dataset, batch_size: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Uniform with-replacement draw from the training split."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    idx = dataset.train_idx[rng.integers(batch_size, dataset.n_train)]
    return dataset.inputs[idx], dataset.targets[idx]


def export_csv(dataset: Dataset, path: str, header: str = "") -> None:
    n, m = dataset.inputs.shape
    with open(path, "w") as fh:
        if header:
            fh.write(header)
        cols = [f"x{i}" for i in range(m)]
        if dataset.task == "classification":
            cols.append("label")
        else:
            cols.extend(f"y{i}" for i in range(np.atleast_2d(dataset.targets).shape[1]))
        cols.append("split")
        fh.write(",".join(cols) + "\n")
        test_set = set(dataset.test_idx.tolist())
        for i in range(n):
            row = [repr(float(v)) for v in dataset.inputs[i]]
            if dataset.task == "classification":
                row.append(str(int(dataset.targets[i])))
            else:
                row.extend(repr(float(v)) for v in np.atleast_1d(dataset.targets[i]))
            row.append("test" if i in test_set else "train")
            fh.write(",".join(row) + "\n")
