"""Dataset readers and writers, plus a seeded synthetic corpus.

Every reader either returns a fully validated :class:`Dataset` or raises
:class:`FormatError`; malformed bytes never produce a partial dataset.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from datamark.core import Dataset, round_half_away

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """Structurally invalid dataset file."""


# --- CIFAR-10 binary -------------------------------------------------------

def decode_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0:
        raise FormatError(f"{source}: empty file")
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(
            f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record at offset {whole * CIFAR_RECORD}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if len(bad):
        i = int(bad[0])
        raise FormatError(f"{source}: record {i} has label byte {labels[i]} (> 9) at offset {i * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, *CIFAR_SHAPE)
    return images, labels


def _cifar_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    files = sorted(path.glob("data_batch_*.bin"))
    if not files:
        files = sorted(path.glob("*.bin"))
    if not files:
        raise FormatError(f"{path}: no CIFAR-10 batch files found")
    return files


def load_cifar10_binary(path: str | Path) -> Dataset:
    """Read CIFAR-10 binary batches: a single file, or every ``data_batch_*.bin`` in a directory."""
    imgs, labels = [], []
    for f in _cifar_files(Path(path)):
        i, l = decode_cifar10_bytes(f.read_bytes(), str(f))
        imgs.append(i)
        labels.append(l)
    return Dataset(np.concatenate(imgs), np.concatenate(labels), 10)


def encode_cifar10(data: Dataset) -> bytes:
    if data.images.shape[1:] != CIFAR_SHAPE:
        raise ValueError(f"CIFAR-10 records need shape {CIFAR_SHAPE} (C, H, W), got {data.images.shape[1:]}")
    if data.labels.max() > 9:
        raise ValueError("CIFAR-10 labels must be in [0, 9]")
    n = len(data)
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = data.labels
    out[:, 1:] = data.images.reshape(n, -1)
    return out.tobytes()


def write_cifar10_binary(data: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(encode_cifar10(data))


# --- IDX (MNIST-style) -----------------------------------------------------

def _idx_header(raw: bytes, magic: int, ndim: int, source: str) -> tuple[int, ...]:
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError(f"{source}: file too short for an IDX magic number ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{source}: bad magic number, expected 0x{magic:08x}, found 0x{found:08x}")
    if len(raw) < header:
        raise FormatError(f"{source}: header truncated at {len(raw)} bytes (need {header})")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise FormatError(f"{source}: expected {expected} bytes for dimensions {dims}, found {len(raw)}")
    return dims


def decode_idx(images_raw: bytes, labels_raw: bytes, num_classes: int = 10, sources=("images", "labels")):
    dims = _idx_header(images_raw, IDX_IMAGES_MAGIC, 3, sources[0])
    (count,) = _idx_header(labels_raw, IDX_LABELS_MAGIC, 1, sources[1])
    n, rows, cols = dims
    if n != count:
        raise FormatError(f"image count {n} does not match label count {count}")
    if n == 0 or rows == 0 or cols == 0:
        raise FormatError(f"{sources[0]}: empty image set with dimensions {dims}")
    images = np.frombuffer(images_raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(labels_raw, dtype=np.uint8, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if len(bad):
        i = int(bad[0])
        raise FormatError(f"{sources[1]}: label {labels[i]} at index {i} is >= num_classes {num_classes}")
    return images, labels


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int = 10) -> Dataset:
    images, labels = decode_idx(
        Path(images_path).read_bytes(), Path(labels_path).read_bytes(), num_classes, (str(images_path), str(labels_path))
    )
    return Dataset(images, labels, num_classes)


def encode_idx(data: Dataset) -> tuple[bytes, bytes]:
    if data.images.shape[1] != 1:
        raise ValueError("IDX image files hold single-channel images")
    n, _, rows, cols = data.images.shape
    if data.labels.max() > 255:
        raise ValueError("IDX labels are single bytes")
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + data.images.tobytes()
    labels = struct.pack(">II", IDX_LABELS_MAGIC, n) + data.labels.astype(np.uint8).tobytes()
    return images, labels


def write_idx(data: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    images, labels = encode_idx(data)
    Path(images_path).write_bytes(images)
    Path(labels_path).write_bytes(labels)


# --- PNG directory ---------------------------------------------------------

def load_png_dir(root: str | Path, labels_csv: str | Path, num_classes: int) -> Dataset:
    """Images listed as ``relative_path,label`` lines, kept in CSV order."""
    from PIL import Image as PILImage, UnidentifiedImageError

    root = Path(root)
    arrays, labels = [], []
    with open(labels_csv, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not row[0].strip():
                continue
            if len(row) != 2:
                raise FormatError(f"{labels_csv}:{lineno}: expected 'relative_path,label', got {row}")
            rel, label_text = row[0].strip(), row[1].strip()
            try:
                label = int(label_text)
            except ValueError:
                raise FormatError(f"{labels_csv}:{lineno}: label {label_text!r} is not an integer") from None
            if not 0 <= label < num_classes:
                raise FormatError(f"{labels_csv}:{lineno}: label {label} outside [0, {num_classes - 1}]")
            try:
                with PILImage.open(root / rel) as im:
                    im.load()
                    if im.mode not in ("L", "RGB"):
                        im = im.convert("RGBA" if "A" in im.mode else "RGB").convert("RGB")
                    a = np.asarray(im, dtype=np.uint8)
            except (OSError, UnidentifiedImageError) as e:
                raise FormatError(f"{labels_csv}:{lineno}: cannot decode {rel}: {e}") from None
            a = a[None] if a.ndim == 2 else a.transpose(2, 0, 1)
            if arrays and a.shape != arrays[0].shape:
                raise FormatError(f"{labels_csv}:{lineno}: {rel} has shape {a.shape}, expected {arrays[0].shape}")
            arrays.append(a)
            labels.append(label)
    if not arrays:
        raise FormatError(f"{labels_csv}: no images listed")
    return Dataset(np.stack(arrays), np.array(labels), num_classes)


def write_png_dir(data: Dataset, root: str | Path, labels_csv: str | Path | None = None) -> Path:
    from PIL import Image as PILImage

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    labels_csv = Path(labels_csv) if labels_csv else root / "labels.csv"
    c = data.images.shape[1]
    if c not in (1, 3):
        raise ValueError("PNG output supports 1 or 3 channels")
    width = len(str(len(data) - 1))
    with open(labels_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, (img, label) in enumerate(zip(data.images, data.labels)):
            name = f"{i:0{width}d}.png"
            arr = img[0] if c == 1 else img.transpose(1, 2, 0)
            PILImage.fromarray(np.ascontiguousarray(arr)).save(root / name)
            w.writerow([name, int(label)])
    return labels_csv


# --- generic entry points --------------------------------------------------

FORMATS = ("npz", "cifar10", "idx", "png_dir")


def load_dataset(fmt: str, path: str | Path, labels: str | Path | None = None, num_classes: int | None = None) -> Dataset:
    if fmt == "npz":
        return Dataset.load_npz(path)
    if fmt == "cifar10":
        return load_cifar10_binary(path)
    if fmt == "idx":
        if labels is None:
            raise ValueError("idx format needs a labels file")
        return load_idx(path, labels, num_classes or 10)
    if fmt == "png_dir":
        if labels is None or num_classes is None:
            raise ValueError("png_dir format needs a labels CSV and num_classes")
        return load_png_dir(path, labels, num_classes)
    raise ValueError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")


def save_dataset(data: Dataset, fmt: str, path: str | Path, labels: str | Path | None = None) -> None:
    if fmt == "npz":
        data.save_npz(path)
    elif fmt == "cifar10":
        write_cifar10_binary(data, path)
    elif fmt == "idx":
        if labels is None:
            raise ValueError("idx format needs a labels path")
        write_idx(data, path, labels)
    elif fmt == "png_dir":
        write_png_dir(data, path, labels)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")


# --- synthetic corpus ------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Flat-colored classes with Gaussian pixel noise.

    ``base_colors`` gives one value per channel for each class; when omitted,
    distinct colors are drawn from the seed.
    """

    num_classes: int = 4
    per_class: int = 625
    shape: tuple[int, int, int] = (3, 8, 8)  # (C, W, H)
    base_colors: tuple[tuple[int, ...], ...] | None = None
    noise_std: float = 30.0
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.per_class < 2:
            raise ValueError("need at least two samples per class for a train/test split")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.base_colors is not None:
            colors = [tuple(int(v) for v in c) for c in self.base_colors]
            if len(colors) != self.num_classes:
                raise ValueError(f"expected {self.num_classes} base colors, got {len(colors)}")
            if any(len(c) != self.shape[0] for c in colors):
                raise ValueError("each base color needs one value per channel")
            if any(not 0 <= v <= 255 for c in colors for v in c):
                raise ValueError("base colors must lie in [0, 255]")
            if len(set(colors)) != len(colors):
                raise ValueError("base colors must be distinct")


def synthetic_colors(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.base_colors is not None:
        return np.asarray(spec.base_colors, dtype=np.float64)
    c = spec.shape[0]
    # Rejection-sample colors at least 60 apart (Euclidean) so classes are separable.
    colors: list[np.ndarray] = []
    for _ in range(10000):
        cand = rng.integers(30, 226, size=c).astype(np.float64)
        if all(np.linalg.norm(cand - o) >= 60 for o in colors):
            colors.append(cand)
            if len(colors) == spec.num_classes:
                return np.stack(colors)
    raise ValueError("could not draw distinct base colors; pass base_colors explicitly")


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> tuple[Dataset, Dataset]:
    """Stratified train/test split of the synthetic corpus; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    colors = synthetic_colors(spec, rng)
    c, w, h = spec.shape
    n_train = int(round_half_away(spec.per_class * spec.train_fraction))
    n_train = min(max(n_train, 1), spec.per_class - 1)
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for k in range(spec.num_classes):
        base = np.broadcast_to(colors[k][:, None, None], (spec.per_class, c, h, w))
        noisy = base + rng.normal(0.0, spec.noise_std, size=base.shape) if spec.noise_std > 0 else base
        imgs = np.clip(round_half_away(noisy), 0, 255).astype(np.uint8)
        tr_x.append(imgs[:n_train])
        te_x.append(imgs[n_train:])
        tr_y.append(np.full(n_train, k))
        te_y.append(np.full(spec.per_class - n_train, k))
    train_perm = rng.permutation(n_train * spec.num_classes)
    test_perm = rng.permutation((spec.per_class - n_train) * spec.num_classes)
    train = Dataset(np.concatenate(tr_x)[train_perm], np.concatenate(tr_y)[train_perm], spec.num_classes)
    test = Dataset(np.concatenate(te_x)[test_perm], np.concatenate(te_y)[test_perm], spec.num_classes)
    return train, test
