"""Datasets: CIFAR-10 binary batches, mini-CIFAR-10, PPM image folders, batching."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError
from .permute import MODES, NUM_PERMUTATIONS, expand_offline, permute_batch
from .tensor import DTYPE, Tensor

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
CIFAR_SIDE = 32
CIFAR_RECORD_BYTES = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE  # 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
STD_FLOOR = 1e-6


@dataclass
class Dataset:
    images: np.ndarray          # uint8 [N, 3, H, W]
    class_labels: np.ndarray    # int64 [N]
    class_names: tuple[str, ...]
    split: str = "train"
    perm_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64).reshape(-1)
        self.class_names = tuple(self.class_names)
        if self.images.dtype != np.uint8:
            raise ContractError(f"images must be uint8, got {self.images.dtype}")
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ContractError(f"images must be [N, 3, H, W], got {self.images.shape}")
        if len(self.images) != len(self.class_labels):
            raise ContractError("images and labels differ in length")
        h, w = self.images.shape[2:]
        if h % 2 or w % 2:
            raise ContractError(f"image sides must be even, got {h}x{w}")
        if len(self.class_labels) and (self.class_labels.min() < 0 or self.class_labels.max() >= len(self.class_names)):
            raise ContractError("class label outside the class-name table")
        if self.perm_labels is not None:
            self.perm_labels = np.asarray(self.perm_labels, dtype=np.int64).reshape(-1)
            if len(self.perm_labels) != len(self.images):
                raise ContractError("perm_labels length differs from images")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        perm = None if self.perm_labels is None else self.perm_labels[indices]
        return Dataset(self.images[indices], self.class_labels[indices], self.class_names, self.split, perm)


# --------------------------------------------------------------------- CIFAR-10
def write_cifar10_binary(path, images: np.ndarray, labels) -> None:
    """Write records in the public CIFAR-10 binary layout (label byte + R, G, B planes)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    if images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE) or len(images) != len(labels):
        raise ContractError(f"expected [N, 3, 32, 32] images with N labels, got {images.shape}")
    records = np.empty((len(images), CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(len(images), -1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10_binary(paths: Sequence, split: str = "train") -> Dataset:
    """Parse one or more CIFAR-10 binary batch files into a single Dataset."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        try:
            raw = np.fromfile(path, dtype=np.uint8)
        except OSError as exc:
            raise DataError(f"{path}: cannot read ({exc})") from exc
        if raw.size % CIFAR_RECORD_BYTES:
            raise DataError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES} (corrupt file)")
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        lab = records[:, 0].astype(np.int64)
        if lab.size and lab.max() >= len(CIFAR10_CLASSES):
            bad = int(np.argmax(lab >= len(CIFAR10_CLASSES)))
            raise DataError(f"{path}: record {bad} has label {lab[bad]} (corrupt record)")
        images.append(records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE))
        labels.append(lab)
    if not images:
        return Dataset(np.zeros((0, 3, CIFAR_SIDE, CIFAR_SIDE), np.uint8), np.zeros(0, np.int64), CIFAR10_CLASSES, split)
    return Dataset(np.concatenate(images), np.concatenate(labels), CIFAR10_CLASSES, split)


def find_cifar10_files(root) -> tuple[list[Path], Path]:
    """Locate the five training batches and the test batch under ``root``."""
    root = Path(root)
    for base in (root, root / "cifar-10-batches-bin"):
        train = [base / name for name in CIFAR_TRAIN_FILES]
        test = base / CIFAR_TEST_FILE
        if all(p.is_file() for p in train) and test.is_file():
            return train, test
    raise DataError(f"{root}: CIFAR-10 binary batches not found")


def mini_cifar10_indices(labels: np.ndarray, per_class: int = 100, seed: int = 0,
                         num_classes: int = len(CIFAR10_CLASSES)) -> np.ndarray:
    """Seeded per-class draw without replacement; returns sorted source indices."""
    if per_class < 1:
        raise ContractError("per_class must be positive")
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) < per_class:
            raise ContractError(f"class {c} has {len(members)} images, fewer than per_class={per_class}")
        picked.append(rng.choice(members, size=per_class, replace=False))
    return np.sort(np.concatenate(picked))


def make_mini_cifar10(train: Dataset, per_class: int = 100, seed: int = 0) -> Dataset:
    return train.subset(mini_cifar10_indices(train.class_labels, per_class, seed, len(train.class_names)))


def synthetic_cifar10(per_class: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Class-structured 32x32 images for runs where CIFAR-10 is unavailable.

    Each class owns a colour, an oriented grating and an off-centre blob
    position; samples jitter phase, amplitude and position and add noise.
    """
    rng = np.random.default_rng([seed, 10])
    n_cls = len(CIFAR10_CLASSES)
    colours = rng.uniform(40, 215, size=(n_cls, 3))
    angles = rng.uniform(0, np.pi, size=n_cls)
    freqs = rng.uniform(0.15, 0.6, size=n_cls)
    centres = rng.uniform(6, 26, size=(n_cls, 2))
    yy, xx = np.mgrid[0:CIFAR_SIDE, 0:CIFAR_SIDE].astype(DTYPE)
    images = np.empty((n_cls * per_class, 3, CIFAR_SIDE, CIFAR_SIDE), dtype=np.uint8)
    labels = np.repeat(np.arange(n_cls), per_class)
    for k, c in enumerate(labels):
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(25, 55)
        proj = xx * np.cos(angles[c]) + yy * np.sin(angles[c])
        grating = amp * np.sin(freqs[c] * proj + phase)
        cy, cx = centres[c] + rng.normal(0, 2.0, size=2)
        blob = 70 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 18.0)
        img = colours[c][:, None, None] + grating[None] + blob[None] * np.array([1, -1, 0.5])[:, None, None]
        img += rng.normal(0, 12, size=img.shape)
        images[k] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    order = rng.permutation(len(labels))
    return images[order], labels[order]


# --------------------------------------------------------------------- PPM/PGM
def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def read_ppm(path) -> np.ndarray:
    """Binary P6, maxval 255 -> uint8 [3, H, W]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if buf[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {buf[:2]!r}, expected b'P6')")
    try:
        tokens, offset = _ppm_tokens(buf, 4)
        width, height, maxval = (int(t) for t in tokens[1:])
    except (DataError, ValueError) as exc:
        raise DataError(f"{path}: bad PPM header ({exc})") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    need = width * height * 3
    pixels = np.frombuffer(buf, dtype=np.uint8, count=len(buf) - offset, offset=offset)
    if pixels.size < need:
        raise DataError(f"{path}: pixel data truncated ({pixels.size} of {need} bytes)")
    return pixels[:need].reshape(height, width, 3).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    _, h, w = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + image.transpose(1, 2, 0).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    _, h, w = image.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return image[:, rows][:, :, cols]


def load_image_folder(root, manifest, image_size: int = 64, class_names: Optional[Sequence[str]] = None,
                      split: str = "train") -> Dataset:
    """Load ``relative/path.ppm,classname`` lines from ``manifest`` (paths relative to ``root``).

    Class names map to labels in first-appearance order unless ``class_names``
    is given (pass the training split's names when loading its test split).
    """
    if image_size < 2 or image_size % 2:
        raise ContractError(f"image_size must be even, got {image_size}")
    root = Path(root)
    manifest = Path(manifest)
    if not manifest.is_absolute() and not manifest.exists():
        manifest = root / manifest
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"{manifest}: cannot read manifest ({exc})") from exc
    fixed = class_names is not None
    names: list[str] = list(class_names or [])
    lookup = {n: i for i, n in enumerate(names)}
    images, labels = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        rel, sep, cls = line.rpartition(",")
        if not sep or not rel or not cls:
            raise DataError(f"{manifest}:{lineno}: expected 'path,classname'")
        if cls not in lookup:
            if fixed:
                raise DataError(f"{manifest}:{lineno}: unknown class {cls!r}")
            lookup[cls] = len(names)
            names.append(cls)
        images.append(resize_nearest(read_ppm(root / rel), image_size))
        labels.append(lookup[cls])
    if not images:
        return Dataset(np.zeros((0, 3, image_size, image_size), np.uint8), np.zeros(0, np.int64),
                       tuple(names) or ("unlabelled",), split)
    return Dataset(np.stack(images), np.array(labels), tuple(names), split)


# ---------------------------------------------------------------- normalisation
@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ContractError("normalisation std must be positive")

    def normalize(self, images: np.ndarray) -> np.ndarray:
        """uint8 [B, 3, H, W] -> float64, scaled to [0, 1] then standardised."""
        x = images.astype(DTYPE) / 255.0
        return (x - np.array(self.mean)[:, None, None]) / np.array(self.std)[:, None, None]

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`normalize`, back on the [0, 1] pixel scale."""
        return x * np.array(self.std)[:, None, None] + np.array(self.mean)[:, None, None]

    @classmethod
    def identity(cls) -> "NormalizationStats":
        return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def compute_normalization(train: Dataset) -> NormalizationStats:
    if len(train) == 0:
        raise ContractError("cannot compute normalisation statistics of an empty dataset")
    x = train.images.astype(DTYPE) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), STD_FLOOR)
    return NormalizationStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


# --------------------------------------------------------------------- batching
class Batch(NamedTuple):
    images: Tensor
    class_labels: np.ndarray
    perm_labels: np.ndarray
    unpermuted: np.ndarray  # uint8 pixels after flip/crop, before patch permutation


def expand_dataset_offline(dataset: Dataset) -> Dataset:
    """24x dataset: each source image under every patch permutation."""
    images, labels, perms = expand_offline(dataset.images, dataset.class_labels)
    return Dataset(images, labels, dataset.class_names, dataset.split, perms)


def _flip_crop(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    out = np.empty_like(images)
    _, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for i in range(len(images)):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        img = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = img[:, :, ::-1] if rng.random() < 0.5 else img
    return out


def batches(dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None,
            augmentation: str = "identity_only", epoch: int = 0,
            stats: Optional[NormalizationStats] = None, flip_crop: bool = False) -> Iterator[Batch]:
    """Yield normalised batches; the final short batch is kept.

    ``shuffle_seed=None`` keeps dataset order. Shuffling, permutation draws and
    flip/crop each use their own generator stream derived from
    ``(shuffle_seed, epoch)``. Datasets expanded offline carry their own
    permutation labels and must be batched with ``identity_only``.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    if augmentation not in MODES:
        raise ContractError(f"augmentation must be one of {MODES}, got {augmentation!r}")
    if dataset.perm_labels is not None and augmentation != "identity_only":
        raise ContractError("dataset is already permuted; use identity_only")
    stats = stats or NormalizationStats.identity()
    seed = 0 if shuffle_seed is None else shuffle_seed
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng([seed, epoch, 0]).permutation(n)
    perm_rng = np.random.default_rng([seed, epoch, 1])
    aug_rng = np.random.default_rng([seed, epoch, 2])
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        raw = dataset.images[idx]
        if flip_crop:
            raw = _flip_crop(raw, aug_rng)
        unpermuted = raw
        if dataset.perm_labels is not None:
            perms = dataset.perm_labels[idx]
        elif augmentation == "online_uniform":
            perms = perm_rng.integers(NUM_PERMUTATIONS, size=len(idx))
            raw = permute_batch(raw, perms)
        else:
            perms = np.zeros(len(idx), dtype=np.int64)
        yield Batch(Tensor(stats.normalize(raw)), dataset.class_labels[idx], perms.astype(np.int64), unpermuted)
