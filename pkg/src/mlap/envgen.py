"""Task environments: base datasets and the two permutation task families."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .stochnet import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class BaseDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str = "synthetic_blobs"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")
        if self.inputs.shape[0] < self.class_count:
            raise ValueError("fewer samples than classes")

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class TaskDataset:
    train: Batch
    test: Batch
    transform: str
    params: np.ndarray
    seed: int
    train_idx: np.ndarray = field(repr=False, default=None)
    test_idx: np.ndarray = field(repr=False, default=None)
    class_count: int = 0

    @property
    def m(self) -> int:
        return len(self.train)


def gen_blobs(class_count: int, dim: int, per_class: int, spread: float, seed) -> BaseDataset:
    """Gaussian clusters around seeded centers in ``[0, 1]^dim``, clipped to the cube."""
    if min(class_count, dim, per_class) < 1 or spread <= 0:
        raise ValueError("counts must be >= 1 and spread > 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(class_count, dim))
    labels = np.repeat(np.arange(class_count), per_class)
    x = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return BaseDataset(np.clip(x[order], 0.0, 1.0), labels[order], class_count, "synthetic_blobs")


def _split(base: BaseDataset, rng: np.random.Generator, m_train: int, m_test: int):
    if m_train < 2:
        raise ValueError("m_train must be >= 2")
    if m_train + m_test > len(base):
        raise InsufficientSamplesError(
            f"need {m_train + m_test} samples, base dataset has {len(base)}")
    idx = rng.permutation(len(base))[: m_train + m_test]
    return idx[:m_train], idx[m_train:]


def make_permuted_labels_task(base: BaseDataset, seed, m_train: int, m_test: int,
                              permutation=None) -> TaskDataset:
    """Task whose labels are relabeled by a seeded permutation of the classes."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(base.class_count)
    if permutation is not None:
        perm = np.asarray(permutation, dtype=int)
        if sorted(perm.tolist()) != list(range(base.class_count)):
            raise ValueError("permutation is not a bijection on the classes")
    tr, te = _split(base, rng, m_train, m_test)
    y = perm[base.labels]
    return TaskDataset(Batch(base.inputs[tr], y[tr]), Batch(base.inputs[te], y[te]),
                       "label_perm", perm, _seed_int(seed), tr, te, base.class_count)


def sample_swaps(dim: int, n_swaps: int, rng: np.random.Generator) -> np.ndarray:
    if n_swaps < 0:
        raise ValueError("n_swaps must be >= 0")
    return rng.integers(0, dim, size=(n_swaps, 2))


def apply_swaps(x: np.ndarray, swaps, reverse: bool = False) -> np.ndarray:
    """Apply index transpositions to every row of ``x`` (in order, or reversed)."""
    x = np.array(x, dtype=float, copy=True)
    pairs = np.asarray(swaps, dtype=int).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= x.shape[-1]):
        raise ValueError("swap index out of range")
    if reverse:
        pairs = pairs[::-1]
    for i, j in pairs:
        x[..., [i, j]] = x[..., [j, i]]
    return x


def swaps_to_permutation(dim: int, swaps) -> np.ndarray:
    """Column permutation equivalent to :func:`apply_swaps`: ``apply_swaps(x) == x[:, perm]``."""
    return apply_swaps(np.arange(dim, dtype=float)[None, :], swaps)[0].astype(int)


def make_permuted_pixels_task(base: BaseDataset, seed, n_swaps: int, m_train: int,
                              m_test: int) -> TaskDataset:
    """Task whose inputs are scrambled by ``n_swaps`` seeded location swaps."""
    rng = np.random.default_rng(seed)
    swaps = sample_swaps(base.dim, n_swaps, rng)
    tr, te = _split(base, rng, m_train, m_test)
    perm = swaps_to_permutation(base.dim, swaps)
    x = base.inputs[:, perm]
    return TaskDataset(Batch(x[tr], base.labels[tr]), Batch(x[te], base.labels[te]),
                       "pixel_swaps", swaps, _seed_int(seed), tr, te, base.class_count)


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return -1


def make_tasks(base: BaseDataset, family: str, seeds, m_train: int, m_test: int,
               n_swaps: int = 0) -> list:
    if family == "permuted_labels":
        return [make_permuted_labels_task(base, s, m_train, m_test) for s in seeds]
    if family == "permuted_pixels":
        return [make_permuted_pixels_task(base, s, n_swaps, m_train, m_test) for s in seeds]
    raise ValueError(f"unknown environment family {family!r}")


def _read_header(buf: bytes, n_dims: int, path):
    need = 4 + 4 * n_dims
    if len(buf) < need:
        raise IdxTruncatedError(f"{path}: header truncated")
    return struct.unpack(">" + "I" * (1 + n_dims), buf[:need])


def load_idx(images_path, labels_path) -> BaseDataset:
    """Read an IDX image/label file pair (the MNIST distribution format).

    Pixels are unsigned bytes rescaled to ``[0, 1]``; images are flattened
    row-major.
    """
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    if len(img) < 4 or struct.unpack(">I", img[:4])[0] != IDX_IMAGES_MAGIC:
        raise IdxMagicError(f"{images_path}: bad magic, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(lab) < 4 or struct.unpack(">I", lab[:4])[0] != IDX_LABELS_MAGIC:
        raise IdxMagicError(f"{labels_path}: bad magic, expected 0x{IDX_LABELS_MAGIC:08x}")
    _, n, rows, cols = _read_header(img, 3, images_path)
    _, n_lab = _read_header(lab, 1, labels_path)
    body = img[16:]
    if len(body) < n * rows * cols:
        raise IdxTruncatedError(f"{images_path}: expected {n * rows * cols} pixel bytes, got {len(body)}")
    if len(lab) - 8 < n_lab:
        raise IdxTruncatedError(f"{labels_path}: expected {n_lab} label bytes, got {len(lab) - 8}")
    if n != n_lab:
        raise IdxCountMismatchError(f"{n} images but {n_lab} labels")
    pixels = np.frombuffer(body, dtype=np.uint8, count=n * rows * cols).reshape(n, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_lab, offset=8).astype(int)
    class_count = int(labels.max()) + 1 if n else 1
    return BaseDataset(pixels / 255.0, labels, class_count, f"idx:{images_path}")


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 ``images`` (``n x rows x cols``) and ``labels`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())
