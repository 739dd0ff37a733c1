"""Dataset readers, balanced subsetting and mean-image preprocessing."""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
ANIMALS = (2, 3, 4, 5, 6, 7)
VEHICLES = (0, 1, 8, 9)
# group 0 -> +1, group 1 -> -1
ANIMALS_VS_VEHICLES = (ANIMALS, VEHICLES)

CIFAR_RECORD = 3072
MNIST_IMAGES_MAGIC = 0x00000803
MNIST_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Mean-subtracted samples.

    ``X + mean_image`` gives the raw pixels in [0, 1], so every entry of ``X``
    lies in [-1, 1]. ``label_kind`` is ``"binary"`` (labels +-1), ``"class"``
    (integer class index) or ``"real"`` (regression target).
    """

    X: np.ndarray
    labels: np.ndarray
    mean_image: np.ndarray
    image_shape: tuple[int, ...]
    label_kind: str = "binary"
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def num_classes(self) -> int:
        if self.label_kind == "class":
            return int(self.labels.max()) + 1
        return 1

    def images(self) -> np.ndarray:
        """Raw [0, 1] pixels, shaped (n, *image_shape)."""
        return (self.X + self.mean_image).reshape((self.n,) + tuple(self.image_shape))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.X, self.labels.astype(np.float64), self.mean_image):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def _read_cifar_records(data: bytes, label_bytes: int, name: str):
    record = label_bytes + CIFAR_RECORD
    if len(data) == 0 or len(data) % record:
        raise FormatError(f"{name}: length {len(data)} is not a multiple of {record}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    pixels = arr[:, label_bytes:].astype(np.float64) / 255.0
    return pixels, labels


def load_cifar10(path, files=None, label_bytes: int = 1, num_classes: int = 10):
    """Read CIFAR binary batches from a file or a directory.

    Each record is ``label_bytes`` label bytes followed by 3072 pixel bytes
    (red, green and blue planes of a row-major 32x32 image). Returns
    ``(pixels, labels)`` with pixels of shape (n, 3072) scaled to [0, 1].
    The last label byte is used, which is the fine label for CIFAR-100.
    """
    path = Path(path)
    if path.is_dir():
        names = files or [f"data_batch_{i}.bin" for i in range(1, 6)]
        paths = [path / f for f in names]
    else:
        paths = [path]
    chunks = []
    for p in paths:
        pixels, labels = _read_cifar_records(p.read_bytes(), label_bytes, p.name)
        if labels.max() >= num_classes:
            raise FormatError(f"{p.name}: label {labels.max()} out of range")
        chunks.append((pixels, labels))
    return np.concatenate([c[0] for c in chunks]), np.concatenate([c[1] for c in chunks])


def load_cifar100(path, files=("train.bin",)):
    return load_cifar10(path, files=list(files), label_bytes=2, num_classes=100)


def _open_maybe_gz(path: Path) -> bytes:
    data = path.read_bytes()
    return gzip.decompress(data) if data[:2] == b"\x1f\x8b" else data


def load_mnist(images_path, labels_path):
    """Read an idx image/label pair; pixels scaled to [0, 1], shape (n, 784)."""
    img = _open_maybe_gz(Path(images_path))
    lab = _open_maybe_gz(Path(labels_path))
    if len(img) < 16 or len(lab) < 8:
        raise FormatError("idx file too short")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != MNIST_IMAGES_MAGIC:
        raise FormatError(f"bad image magic {magic:#010x}")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != MNIST_LABELS_MAGIC:
        raise FormatError(f"bad label magic {lmagic:#010x}")
    if n != ln:
        raise FormatError(f"{n} images but {ln} labels")
    if len(img) != 16 + n * rows * cols or len(lab) != 8 + n:
        raise FormatError("idx payload length does not match header")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return pixels.astype(np.float64) / 255.0, labels


def binarize(labels, scheme=ANIMALS_VS_VEHICLES) -> np.ndarray:
    """CIFAR-10 class index -> +1 (first group) / -1 (second group)."""
    labels = np.asarray(labels)
    if np.any((labels < 0) | (labels > 9)):
        raise ValueError("CIFAR-10 labels must lie in 0..9")
    plus, minus = scheme
    out = np.where(np.isin(labels, plus), 1, 0) - np.where(np.isin(labels, minus), 1, 0)
    if np.any(out == 0):
        raise ValueError("scheme does not cover every label")
    return out.astype(np.int64)


def _mean_subtract(pixels):
    mean = pixels.mean(axis=0)
    return pixels - mean, mean


def preprocess(pixels, labels, per_class: int, classes, seed: int,
               image_shape=(3, 32, 32), label_kind: str = "class",
               source: str = "") -> Dataset:
    """Balanced subset, then subtraction of the subset's mean image.

    ``classes`` lists the output classes; each entry is a raw class index or a
    tuple of raw indices pooled into one class. ``label_kind="binary"``
    requires two entries and maps them to +1 and -1.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    labels = np.asarray(labels)
    groups = [tuple(np.atleast_1d(c).tolist()) for c in classes]
    if label_kind == "binary" and len(groups) != 2:
        raise ValueError("binary labels need exactly two class groups")
    rng = np.random.default_rng(seed)
    chosen, new_labels = [], []
    for g, members in enumerate(groups):
        pool = np.flatnonzero(np.isin(labels, members))
        if pool.size < per_class:
            raise ValueError(f"class group {members} has {pool.size} samples, need {per_class}")
        chosen.append(np.sort(rng.choice(pool, size=per_class, replace=False)))
        new_labels.append(np.full(per_class, g))
    idx = np.concatenate(chosen)
    y = np.concatenate(new_labels)
    if label_kind == "binary":
        y = np.where(y == 0, 1, -1)
    X, mean = _mean_subtract(pixels[idx])
    prov = {"source": source, "seed": seed, "per_class": per_class,
            "classes": [list(g) for g in groups], "indices": idx.tolist(),
            "counts": [per_class] * len(groups)}
    return Dataset(X, y.astype(np.int64), mean, tuple(image_shape), label_kind, prov)


def _square_shape(d):
    s = int(round(np.sqrt(d)))
    return (1, s, s) if s * s == d else (d,)


def synthetic(kind: str, n: int, d: int, seed: int = 0, image_shape=None) -> Dataset:
    """Linearly separable +-1 data.

    ``gaussian_blobs``: two clusters around ``0.5 +- 0.3 u`` for a random sign
    pattern ``u``, with small Gaussian noise. ``binary_patterns``: random 0/1
    patterns labelled by the sign of a random linear probe.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    rng = np.random.default_rng(seed)
    if kind == "gaussian_blobs":
        u = rng.choice([-1.0, 1.0], size=d)
        y = np.where(np.arange(n) < (n + 1) // 2, 1, -1)
        raw = 0.5 + 0.3 * y[:, None] * u + 0.05 * rng.standard_normal((n, d))
    elif kind == "binary_patterns":
        w = rng.standard_normal(d)
        raw = np.empty((n, d))
        y = np.empty(n, dtype=np.int64)
        for i in range(n):
            while True:
                b = rng.integers(0, 2, size=d).astype(np.float64)
                s = float(w @ (b - 0.5))
                if abs(s) > 1e-9:
                    break
            raw[i], y[i] = b, 1 if s > 0 else -1
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    raw = np.clip(raw, 0.0, 1.0)
    X, mean = _mean_subtract(raw)
    shape = tuple(image_shape) if image_shape else _square_shape(d)
    prov = {"source": f"synthetic:{kind}", "seed": seed,
            "counts": [int(np.sum(y == 1)), int(np.sum(y == -1))]}
    return Dataset(X, y.astype(np.int64), mean, shape, "binary", prov)


# -- dataset dumps ---------------------------------------------------------

def save_dataset(ds: Dataset, directory) -> None:
    """Manifest JSON plus little-endian float64 arrays."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "netrecon-dataset/1", "n": ds.n, "d": ds.d,
                "image_shape": list(ds.image_shape), "label_kind": ds.label_kind,
                "provenance": ds.provenance, "fingerprint": ds.fingerprint()}
    (directory / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (directory / "X.f64").write_bytes(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
    (directory / "labels.f64").write_bytes(
        np.ascontiguousarray(ds.labels, dtype="<f8").tobytes())
    (directory / "mean.f64").write_bytes(np.ascontiguousarray(ds.mean_image, dtype="<f8").tobytes())


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    m = json.loads((directory / "dataset.json").read_text())
    n, d = m["n"], m["d"]

    def read(name, count):
        data = (directory / name).read_bytes()
        if len(data) != 8 * count:
            raise FormatError(f"{name}: expected {8 * count} bytes, found {len(data)}")
        return np.frombuffer(data, dtype="<f8").astype(np.float64)

    X = read("X.f64", n * d).reshape(n, d)
    labels = read("labels.f64", n)
    if m["label_kind"] != "real":
        labels = labels.astype(np.int64)
    return Dataset(X, labels, read("mean.f64", d), tuple(m["image_shape"]),
                   m["label_kind"], m["provenance"])
