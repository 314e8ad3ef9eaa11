"""Image, dataset and posterior-vector primitives.

Pixel arrays are stored as ``uint8`` in ``(C, H, W)`` layout (channel, row,
column) so that a C-order flatten is channel-major then row-major.  The
dimension triple exposed as ``shape`` follows the ``(C, W, H)`` convention
used in key files and the wire protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


Shape = tuple[int, int, int]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def dims_to_array_shape(shape: Sequence[int]) -> tuple[int, int, int]:
    """(C, W, H) -> (C, H, W)."""
    c, w, h = (int(v) for v in shape)
    if c < 1 or w < 1 or h < 1:
        raise ValueError(f"image dimensions must be positive, got {tuple(shape)}")
    return c, h, w


def array_shape_to_dims(shape: Sequence[int]) -> Shape:
    """(C, H, W) -> (C, W, H)."""
    c, h, w = (int(v) for v in shape)
    return c, w, h


def _as_pixels(pixels) -> np.ndarray:
    a = np.asarray(pixels)
    if a.dtype != np.uint8:
        if not np.issubdtype(a.dtype, np.integer):
            raise TypeError(f"pixels must be integers, got dtype {a.dtype}")
        if a.size and (a.min() < 0 or a.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        a = a.astype(np.uint8)
    return a


@dataclass(frozen=True, eq=False)
class Image:
    """A single C x W x H image with 8-bit pixels, stored as a (C, H, W) array."""

    pixels: np.ndarray

    def __post_init__(self):
        a = _as_pixels(self.pixels)
        if a.ndim != 3 or 0 in a.shape:
            raise ValueError(f"image must be a non-empty (C, H, W) array, got shape {a.shape}")
        object.__setattr__(self, "pixels", _frozen(np.array(a, copy=True)))

    @property
    def shape(self) -> Shape:
        return array_shape_to_dims(self.pixels.shape)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    def flat(self) -> list[int]:
        """Channel-major, then row-major pixel list."""
        return self.pixels.ravel().tolist()

    @classmethod
    def from_flat(cls, shape: Sequence[int], values: Sequence[int]) -> "Image":
        arr_shape = dims_to_array_shape(shape)
        a = np.asarray(values)
        if a.size != int(np.prod(arr_shape)):
            raise ValueError(f"expected {int(np.prod(arr_shape))} pixels for shape {tuple(shape)}, got {a.size}")
        return cls(_as_pixels(a).reshape(arr_shape))


@dataclass(frozen=True)
class LabeledImage:
    image: Image
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered labeled images sharing one shape, with an explicit class count.

    ``images`` has layout (N, C, H, W).  The class count is never inferred
    from the labels because a poisoned or filtered split may omit classes.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        imgs = _as_pixels(self.images)
        labels = np.asarray(self.labels)
        if imgs.ndim != 4 or 0 in imgs.shape[1:]:
            raise ValueError(f"images must be a (N, C, H, W) array, got shape {imgs.shape}")
        if len(imgs) < 1:
            raise ValueError("dataset must contain at least one sample")
        if labels.shape != (len(imgs),):
            raise ValueError(f"expected {len(imgs)} labels, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise TypeError("labels must be integers")
        k = int(self.num_classes)
        if k < 1:
            raise ValueError("num_classes must be positive")
        if labels.min() < 0 or labels.max() >= k:
            bad = int(np.flatnonzero((labels < 0) | (labels >= k))[0])
            raise ValueError(f"label {int(labels[bad])} at index {bad} outside [0, {k - 1}]")
        object.__setattr__(self, "images", _frozen(np.array(imgs, copy=True)))
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))
        object.__setattr__(self, "num_classes", k)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(Image(self.images[i]), int(self.labels[i]))

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    @property
    def shape(self) -> Shape:
        return array_shape_to_dims(self.images.shape[1:])

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledImage], num_classes: int) -> "Dataset":
        if not samples:
            raise ValueError("dataset must contain at least one sample")
        shapes = {s.image.pixels.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError(f"all images must share one shape, got {sorted(shapes)}")
        return cls(
            np.stack([s.image.pixels for s in samples]),
            np.array([s.label for s in samples], dtype=np.int64),
            num_classes,
        )

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def with_replaced(self, indices, images: np.ndarray, labels) -> "Dataset":
        """Copy with the given positions overwritten; ordering is preserved."""
        idx = np.asarray(indices, dtype=np.int64)
        new_images = np.array(self.images, copy=True)
        new_labels = np.array(self.labels, copy=True)
        new_images[idx] = images
        new_labels[idx] = labels
        return Dataset(new_images, new_labels, self.num_classes)

    def save_npz(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, images=self.images, labels=self.labels, num_classes=np.int64(self.num_classes))

    @classmethod
    def load_npz(cls, path: str | Path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            try:
                return cls(z["images"], z["labels"], int(z["num_classes"]))
            except KeyError as e:
                raise ValueError(f"{path}: missing array {e}") from None


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("softmax needs at least two classes")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"softmax input contains non-finite values: {z}")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class PosteriorError(ValueError):
    """A vector that is not a valid probability distribution."""


def validate_posterior(v, tolerance: float = 1e-5, num_classes: int | None = None) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise PosteriorError(f"posterior must be a flat vector, got shape {a.shape}")
    if num_classes is not None and len(a) != num_classes:
        raise PosteriorError(f"posterior has length {len(a)}, expected {num_classes}: {a.tolist()}")
    if not np.all(np.isfinite(a)):
        raise PosteriorError(f"posterior contains non-finite entries: {a.tolist()}")
    if np.any(a < 0):
        raise PosteriorError(f"posterior has negative entries: {a.tolist()}")
    total = float(a.sum())
    if abs(total - 1.0) > tolerance:
        raise PosteriorError(f"posterior sums to {total!r}, not 1 within {tolerance}: {a.tolist()}")
    return a


def round_half_away(x):
    """Round to nearest integer, ties away from zero (np.round rounds to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)
