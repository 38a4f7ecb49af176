"""Desk-scale datasets and the IDX (MNIST) reader.

All images are NCHW float64 in [-1, 1].  ``shapes16`` draws four classes
of procedural shapes (disk, cross, horizontal bar, vertical bar) with
random position, size, intensity and pixel noise; ``blobs2d`` draws a
single Gaussian bump labelled by the quadrant of its centre.
"""

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

SHAPE_CLASSES = ("disk", "cross", "bar_horizontal", "bar_vertical")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def bytes_to_unit(b):
    """Map uint8 pixel values onto [-1, 1]."""
    return np.asarray(b, dtype=np.float64) / 127.5 - 1.0


def unit_to_bytes(x):
    """Inverse of :func:`bytes_to_unit`, with rounding and clipping."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class DatasetHandle:
    name: str
    kind: str
    n_train: int
    n_test: int
    seed: int
    image_size: int
    train_x: np.ndarray = field(repr=False)
    train_y: np.ndarray = field(repr=False)
    test_x: np.ndarray = field(repr=False)
    test_y: np.ndarray = field(repr=False)

    @property
    def num_classes(self):
        return int(max(self.train_y.max(), self.test_y.max())) + 1

    @property
    def channels(self):
        return self.train_x.shape[1]

    @property
    def pixel_variance(self):
        """Mean per-pixel variance of the training images.

        This is the MSE of always predicting the per-pixel mean image.
        """
        return float(self.train_x.var(axis=0).mean())

    def fingerprint(self):
        h = hashlib.sha256()
        for a in (self.train_x, self.train_y, self.test_x, self.test_y):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def _grid(size):
    c = (np.arange(size) + 0.5) * (16.0 / size)
    return np.meshgrid(c, c, indexing="ij")  # (y, x) in 16-pixel units


def _draw_shape(kind, yy, xx, rng):
    cy, cx = rng.uniform(5.0, 11.0, size=2)
    r = rng.uniform(2.5, 4.5)
    t = max(0.8, r / 3.0)
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "cross":
        return ((dy <= t) & (dx <= r)) | ((dx <= t) & (dy <= r))
    if kind == "bar_horizontal":
        return (dy <= t) & (dx <= 1.6 * r)
    return (dx <= t) & (dy <= 1.6 * r)


def _shapes16(n, size, rng, noise=0.05):
    yy, xx = _grid(size)
    labels = rng.permutation(np.arange(n) % len(SHAPE_CLASSES))
    out = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        on = _draw_shape(SHAPE_CLASSES[lab], yy, xx, rng)
        level = rng.uniform(0.6, 1.0)
        img = np.where(on, level, -1.0) + rng.normal(0.0, noise, (size, size))
        out[i, 0] = np.clip(img, -1.0, 1.0)
    return out, labels.astype(np.int64)


def _blobs2d(n, size, rng):
    yy, xx = _grid(size)
    out = np.empty((n, 1, size, size))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cy, cx = rng.uniform(3.0, 13.0, size=2)
        s = rng.uniform(1.5, 3.0)
        out[i, 0] = 2.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s)) - 1.0
        labels[i] = int(cy >= 8.0) * 2 + int(cx >= 8.0)
    return out, labels


def make_dataset(kind="shapes16", n_train=1024, n_test=512, seed=0, image_size=16,
                 images_path=None, labels_path=None, test_images_path=None, test_labels_path=None):
    """Build a :class:`DatasetHandle`; contents depend only on the arguments."""
    if kind in ("shapes16", "blobs2d"):
        if image_size < 8 or image_size & (image_size - 1):
            raise ConfigError(f"image_size must be a power of two >= 8, got {image_size}")
        rng = np.random.default_rng([seed, 0x5EED])
        draw = _shapes16 if kind == "shapes16" else _blobs2d
        train_x, train_y = draw(n_train, image_size, rng)
        test_x, test_y = draw(n_test, image_size, rng)
    elif kind == "idx_images":
        if images_path is None or labels_path is None:
            raise ConfigError("idx_images needs images_path and labels_path")
        x, y = load_idx(images_path), load_idx(labels_path)
        if test_images_path is not None:
            tx, ty = load_idx(test_images_path), load_idx(test_labels_path)
        else:
            tx, ty = x[n_train:], y[n_train:]
        x, y = x[:n_train], y[:n_train]
        tx, ty = tx[:n_test], ty[:n_test]
        image_size = 1 << int(np.ceil(np.log2(max(x.shape[-2:]))))
        train_x, test_x = _pad_to(x, image_size), _pad_to(tx, image_size)
        train_y, test_y = y, ty
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return DatasetHandle(name=f"{kind}-{seed}", kind=kind, n_train=len(train_x), n_test=len(test_x),
                         seed=seed, image_size=image_size, train_x=train_x, train_y=train_y,
                         test_x=test_x, test_y=test_y)


def _pad_to(x, size):
    h, w = x.shape[-2:]
    top, left = (size - h) // 2, (size - w) // 2
    return np.pad(x, ((0, 0), (0, 0), (top, size - h - top), (left, size - w - left)), constant_values=-1.0)


def load_idx(path):
    """Read an IDX file of unsigned bytes.

    Image files (magic 0x00000803) come back as ``[n, 1, rows, cols]`` in
    [-1, 1]; label files (0x00000801) as an int64 vector.
    """
    path = Path(path)
    raw = gzip.open(path).read() if path.suffix == ".gz" else path.read_bytes()
    if len(raw) < 4:
        raise FormatError("IDX header truncated", offset=len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("IDX dimension header truncated", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(f"IDX payload truncated: need {count} bytes", offset=len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == IDX_LABELS_MAGIC:
        return data.astype(np.int64)
    return bytes_to_unit(data).reshape(dims[0], 1, dims[1], dims[2])


def batches(n, batch_size, rng):
    """Shuffled index batches; the last partial batch is dropped unless it is
    the only one."""
    perm = rng.permutation(n)
    stop = n - n % batch_size if n >= batch_size else n
    return [perm[i:i + batch_size] for i in range(0, stop, batch_size)]
