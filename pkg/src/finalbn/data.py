"""Synthetic imbalanced image data, the skew protocol, augmentation and the FND1 text format.

Label 0 is the healthy/majority class, label 1 the unhealthy/minority class.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SIZE = 16
NOISE_STD = 0.05
BACKGROUND_AMPLITUDE = 0.12
LESION_AMPLITUDE = 0.3


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # [1, h, w], values in [0, 1]
    label: int
    sample_id: int = -1


@dataclass
class Dataset:
    """Columnar image collection: ``pixels [n, 1, h, w]``, ``labels [n]``, ``ids [n]``."""

    pixels: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.pixels) == len(self.labels) == len(self.ids)):
            raise ValueError("pixels, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.pixels[i], int(self.labels[i]), int(self.ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.pixels.shape[2:]) if self.pixels.ndim == 4 else (IMAGE_SIZE, IMAGE_SIZE)

    def class_counts(self) -> tuple[int, int]:
        return int(np.sum(self.labels == 0)), int(np.sum(self.labels == 1))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.pixels[index], self.labels[index], self.ids[index])

    @classmethod
    def empty(cls, h: int = IMAGE_SIZE, w: int = IMAGE_SIZE) -> "Dataset":
        return cls(np.zeros((0, 1, h, w)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_images(cls, images, h: int = IMAGE_SIZE, w: int = IMAGE_SIZE) -> "Dataset":
        images = list(images)
        if not images:
            return cls.empty(h, w)
        return cls(
            np.stack([img.pixels for img in images]),
            [img.label for img in images],
            [img.sample_id for img in images],
        )


DatasetSplit = Dataset


@dataclass(frozen=True)
class SkewProtocol:
    """(majority, minority) counts for each split."""

    train_counts: tuple[int, int] = (1000, 10)
    val_counts: tuple[int, int] = (150, 7)
    test_counts: tuple[int, int] = (150, 150)

    def __post_init__(self):
        if min(self.train_counts + self.val_counts + self.test_counts) < 0:
            raise ValueError("split counts must be non-negative")

    def pool_sizes(self) -> tuple[int, int]:
        splits = (self.train_counts, self.val_counts, self.test_counts)
        return sum(s[0] for s in splits), sum(s[1] for s in splits)

    def to_dict(self) -> dict:
        return {"train": list(self.train_counts), "val": list(self.val_counts), "test": list(self.test_counts)}

    @classmethod
    def from_dict(cls, d) -> "SkewProtocol":
        if d in (None, "default"):
            return cls()
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.5)
    for _ in range(2):
        cycles = rng.uniform(0.5, 2.0)
        theta = rng.uniform(0.0, 2 * np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        fx, fy = cycles * np.cos(theta), cycles * np.sin(theta)
        img += BACKGROUND_AMPLITUDE * np.sin(2 * np.pi * (fx * xx + fy * yy) / size + phase)
    return img


def _lesion(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    radius = rng.uniform(2.0, 3.0)
    cy, cx = rng.uniform(radius, size - 1 - radius, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    return amplitude * (((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2)


def _render(rng: np.random.Generator, size: int, lesion_amplitude: float | None) -> np.ndarray:
    img = _background(rng, size)
    if lesion_amplitude is not None:
        img = img + _lesion(rng, size, lesion_amplitude)
    img = img + rng.normal(0.0, NOISE_STD, size=(size, size))
    return np.clip(img, 0.0, 1.0)[None]


def generate_synthetic(
    n_majority: int,
    n_minority: int,
    seed: int,
    size: int = IMAGE_SIZE,
    lesion_amplitude: float = LESION_AMPLITUDE,
) -> Dataset:
    """Healthy images are smooth sinusoidal backgrounds plus noise; unhealthy ones add a faint disk.

    Majority and minority images come from independent streams, so changing
    one count leaves the other class's images unchanged. Majority samples get
    ids ``0..n_majority-1`` and minority samples follow.
    """
    if n_majority < 0 or n_minority < 0:
        raise ValueError("sample counts must be non-negative")
    maj_rng, min_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    imgs = [_render(maj_rng, size, None) for _ in range(n_majority)]
    imgs += [_render(min_rng, size, lesion_amplitude) for _ in range(n_minority)]
    if not imgs:
        return Dataset.empty(size, size)
    labels = np.r_[np.zeros(n_majority), np.ones(n_minority)]
    return Dataset(np.stack(imgs), labels, np.arange(n_majority + n_minority))


def make_splits(pool_majority: Dataset, pool_minority: Dataset, protocol: SkewProtocol, seed: int):
    """Sample train/val/test without replacement per class; splits are disjoint."""
    need_maj, need_min = protocol.pool_sizes()
    if len(pool_majority) < need_maj or len(pool_minority) < need_min:
        raise ValueError(
            f"insufficient pool: need {need_maj} majority / {need_min} minority, "
            f"have {len(pool_majority)} / {len(pool_minority)}"
        )
    rng = np.random.default_rng(seed)
    maj_order = rng.permutation(len(pool_majority))
    min_order = rng.permutation(len(pool_minority))
    splits = []
    i_maj = i_min = 0
    for n_maj, n_min in (protocol.train_counts, protocol.val_counts, protocol.test_counts):
        part_maj = pool_majority.subset(maj_order[i_maj:i_maj + n_maj])
        part_min = pool_minority.subset(min_order[i_min:i_min + n_min])
        i_maj += n_maj
        i_min += n_min
        merged = Dataset(
            np.concatenate([part_maj.pixels, part_min.pixels]),
            np.concatenate([part_maj.labels, part_min.labels]),
            np.concatenate([part_maj.ids, part_min.ids]),
        )
        splits.append(merged.subset(rng.permutation(len(merged))))
    return tuple(splits)


def split_pool(pool: Dataset) -> tuple[Dataset, Dataset]:
    return pool.subset(np.flatnonzero(pool.labels == 0)), pool.subset(np.flatnonzero(pool.labels == 1))


def synthetic_splits(protocol: SkewProtocol, seed: int, lesion_amplitude: float = LESION_AMPLITUDE):
    """Generate exactly the pools the protocol needs and split them."""
    n_maj, n_min = protocol.pool_sizes()
    pool = generate_synthetic(n_maj, n_min, seed, lesion_amplitude=lesion_amplitude)
    maj, mino = split_pool(pool)
    return make_splits(maj, mino, protocol, seed + 1)


def _augment_array(
    pixels: np.ndarray,
    rng: np.random.Generator,
    hflip: bool | None = None,
    vflip: bool | None = None,
    shift: tuple[int, int] | None = None,
    brightness: float | None = None,
) -> np.ndarray:
    # Random draws happen unconditionally so forcing one transform does not
    # shift the stream for the others.
    draws = (rng.random() < 0.5, rng.random() < 0.5, tuple(rng.integers(-2, 3, size=2)), rng.uniform(0.9, 1.1))
    hflip = draws[0] if hflip is None else hflip
    vflip = draws[1] if vflip is None else vflip
    dy, dx = draws[2] if shift is None else shift
    brightness = draws[3] if brightness is None else brightness

    out = pixels
    if hflip:
        out = out[..., :, ::-1]
    if vflip:
        out = out[..., ::-1, :]
    if dy or dx:
        h, w = out.shape[-2:]
        pad = np.pad(out, ((0, 0), (2, 2), (2, 2)), mode="edge")
        out = pad[:, 2 - dy:2 - dy + h, 2 - dx:2 - dx + w]
    return np.clip(out * brightness, 0.0, 1.0)


def augment(
    img: LabeledImage,
    rng: np.random.Generator,
    *,
    hflip: bool | None = None,
    vflip: bool | None = None,
    shift: tuple[int, int] | None = None,
    brightness: float | None = None,
) -> LabeledImage:
    """Random flips, an edge-replicated shift of up to 2 px, and brightness in [0.9, 1.1].

    Any keyword forces that transform instead of drawing it.
    """
    pixels = _augment_array(img.pixels, rng, hflip, vflip, shift, brightness)
    return LabeledImage(np.ascontiguousarray(pixels), img.label, img.sample_id)


def augment_batch(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([_augment_array(p, rng) for p in pixels]) if len(pixels) else pixels


class DatasetFormatError(ValueError):
    pass


def save_dataset(data: Dataset, path) -> None:
    """Write the FND1 text format: a header line then ``label,p0,...`` per image."""
    h, w = data.image_shape
    lines = [f"FND1,{h},{w},{len(data)}"]
    for label, px in zip(data.labels, data.pixels.reshape(len(data), h * w)):
        lines.append(",".join([str(int(label))] + [repr(float(v)) for v in px]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_external(path) -> Dataset:
    """Parse an FND1 file. Sample ids are row positions."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}:1: missing header")
    head = lines[0].split(",")
    if len(head) != 4 or head[0] != "FND1":
        raise DatasetFormatError(f"{path}:1: malformed header {lines[0]!r}")
    try:
        h, w, count = (int(v) for v in head[1:])
    except ValueError:
        raise DatasetFormatError(f"{path}:1: malformed header {lines[0]!r}") from None
    if h <= 0 or w <= 0 or count < 0:
        raise DatasetFormatError(f"{path}:1: invalid dimensions in header")
    rows = [(i, ln) for i, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(rows) != count:
        raise DatasetFormatError(f"{path}: header declares {count} rows, found {len(rows)}")
    pixels = np.zeros((count, 1, h, w))
    labels = np.zeros(count, dtype=np.int64)
    for k, (lineno, ln) in enumerate(rows):
        parts = ln.split(",")
        if len(parts) != h * w + 1:
            raise DatasetFormatError(f"{path}:{lineno}: expected {h * w + 1} fields, got {len(parts)}")
        if parts[0] not in ("0", "1"):
            raise DatasetFormatError(f"{path}:{lineno}: unknown label {parts[0]!r} in row {k + 1}")
        try:
            vals = np.array([float(v) for v in parts[1:]])
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-numeric pixel value") from None
        if not np.all((vals >= 0.0) & (vals <= 1.0)):
            raise DatasetFormatError(f"{path}:{lineno}: pixel value outside [0, 1]")
        labels[k] = int(parts[0])
        pixels[k, 0] = vals.reshape(h, w)
    return Dataset(pixels, labels, np.arange(count))
