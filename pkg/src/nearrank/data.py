"""Datasets: IDX (MNIST family) reading/writing and synthetic class blobs.

IDX layout (big-endian)::

    offset  type     value
    0       uint32   magic (0x00000803 images, 0x00000801 labels)
    4       uint32   item count
    8       uint32   rows          (images only)
    12      uint32   columns       (images only)
    ...     uint8    payload, row-major

Files may be gzip-compressed; compression is detected from the first two
bytes, not the file name.  Pixels are scaled to ``[0, 1]`` by dividing by
255 and no other preprocessing is applied.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "IdxFormatError",
    "IMAGES_MAGIC",
    "LABELS_MAGIC",
    "load_idx",
    "write_idx",
    "load_mnist_dir",
    "synthetic_dataset",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncated payload or count mismatch."""


@dataclass
class Dataset:
    """Images ``(count, height, width, channels)`` in ``[0, 1]`` plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    classes: int = 10
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (count, h, w, c), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, count, offset=0):
        """First ``count`` samples (after ``offset``) as a new dataset."""
        sl = slice(offset, offset + count)
        note = f"{self.provenance} [{offset}:{offset + count}]"
        return Dataset(self.images[sl], self.labels[sl], self.split, self.classes, note, dict(self.meta))


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw, path, expected_magic, ndims):
    need = 4 + 4 * ndims
    if len(raw) < need:
        raise IdxFormatError(f"{path}: header truncated at byte {len(raw)}, need {need} bytes")
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic at byte 0: expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndims}I", raw, 4)
    return dims, need


def _read_images(path):
    raw = _read_bytes(path)
    (count, rows, cols), off = _parse_header(raw, path, IMAGES_MAGIC, 3)
    size = count * rows * cols
    if len(raw) - off < size:
        raise IdxFormatError(
            f"{path}: payload truncated: expected {size} bytes from offset {off}, "
            f"file ends at byte {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=off).reshape(count, rows, cols)


def _read_labels(path):
    raw = _read_bytes(path)
    (count,), off = _parse_header(raw, path, LABELS_MAGIC, 1)
    if len(raw) - off < count:
        raise IdxFormatError(
            f"{path}: payload truncated: expected {count} bytes from offset {off}, "
            f"file ends at byte {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=off)


def load_idx(images_path, labels_path, split="train", classes=10):
    """Read an IDX image/label pair into a :class:`Dataset`."""
    pixels = _read_images(images_path)
    labels = _read_labels(labels_path)
    if len(pixels) != len(labels):
        raise IdxFormatError(
            f"count mismatch: {images_path} declares {len(pixels)} images (bytes 4-7), "
            f"{labels_path} declares {len(labels)} labels (bytes 4-7)")
    images = (pixels.astype(np.float64) / 255.0)[..., None]
    return Dataset(images, labels.astype(np.int64), split, classes,
                   provenance=f"idx:{os.path.basename(str(images_path))}")


def write_idx(dataset, images_path, labels_path, compress=False):
    """Write a single-channel dataset as IDX; pixels are stored as ``round(255 * x)``."""
    images = dataset.images
    if images.shape[-1] != 1:
        raise ValueError("IDX images must have one channel")
    count, rows, cols = images.shape[:3]
    pixels = np.rint(images[..., 0] * 255.0).astype(np.uint8)
    img_bytes = struct.pack(">IIII", IMAGES_MAGIC, count, rows, cols) + pixels.tobytes()
    lab_bytes = struct.pack(">II", LABELS_MAGIC, count) + dataset.labels.astype(np.uint8).tobytes()
    for path, payload in ((images_path, img_bytes), (labels_path, lab_bytes)):
        if compress:
            # fixed mtime keeps the gzip bytes reproducible
            payload = gzip.compress(payload, mtime=0)
        with open(path, "wb") as fh:
            fh.write(payload)


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist_dir(directory, split="train"):
    """Load ``split`` from a directory holding the standard MNIST file names."""
    img, lab = MNIST_FILES[split]
    ds = load_idx(_find(directory, img), _find(directory, lab), split=split)
    ds.provenance = f"{directory}:{split}"
    return ds


def synthetic_dataset(classes=2, per_class=50, image_shape=(8, 8, 1), separation=10.0,
                      noise=0.05, seed=0, split="train"):
    """Gaussian class blobs rendered as images.

    Each class ``c`` has centre ``0.5 + (separation * noise / sqrt(2)) * e_c``
    where the ``e_c`` are random orthonormal pixel-space directions, so any
    two centres are ``separation`` noise standard deviations apart.  Samples
    add isotropic ``N(0, noise^2)`` pixel noise and are clipped to ``[0, 1]``.
    Samples are interleaved by class: index ``i`` has label ``i % classes``.
    """
    if classes < 1 or per_class < 1:
        raise ValueError("classes and per_class must be >= 1")
    dim = int(np.prod(image_shape))
    if classes > dim:
        raise ValueError("need at least as many pixels as classes")
    root = np.random.SeedSequence(seed)
    dir_rng, sample_rng = (np.random.default_rng(s) for s in root.spawn(2))
    basis, _ = np.linalg.qr(dir_rng.standard_normal((dim, classes)))
    centres = 0.5 + (separation * noise / np.sqrt(2.0)) * basis.T
    labels = np.tile(np.arange(classes), per_class)
    x = centres[labels] + noise * sample_rng.standard_normal((len(labels), dim))
    images = np.clip(x, 0.0, 1.0).reshape((len(labels),) + tuple(image_shape))
    return Dataset(images, labels, split, classes,
                   provenance=f"synthetic(classes={classes}, separation={separation}, seed={seed})",
                   meta={"centres": centres})
