"""Domain types and tensor conventions shared across the package.

All public APIs speak in (h, w, c) coordinates. Internally the networks use
torch's (B, C, H, W) layout; the ``*_to_tensor`` / ``tensor_to_*`` helpers are
the only place where the two meet.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image


class ValidationError(ValueError):
    """Raised when a value violates a domain-type invariant."""


class DataError(RuntimeError):
    """Missing or corrupt files, manifests and checkpoints."""


class NumericError(RuntimeError):
    """A loss became non-finite. ``record`` holds the diagnostic loss record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class ConfigError(ValueError):
    """Invalid configuration (unknown keys, bad values, unfrozen extractor)."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabelIndexMap:
    grid: np.ndarray
    num_classes: int

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
            raise ValidationError(f"label grid must be a non-empty H x W array, got shape {grid.shape}")
        if not np.issubdtype(grid.dtype, np.integer):
            raise ValidationError(f"label grid must hold integers, got {grid.dtype}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        bad = np.argwhere((grid < 0) | (grid >= self.num_classes))
        if len(bad):
            h, w = bad[0]
            raise ValidationError(
                f"class index {int(grid[h, w])} at (h={h}, w={w}) outside [0, {self.num_classes})"
            )
        object.__setattr__(self, "grid", _readonly(grid.astype(np.int64)))

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelIndexMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.grid, other.grid)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """One-hot semantic map, H x W x C with exactly one active class per pixel."""

    tensor: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensor)
        if t.ndim != 3 or t.shape[0] < 1 or t.shape[1] < 1 or t.shape[2] < 1:
            raise ValidationError(f"label map must be H x W x C, got shape {t.shape}")
        if not np.all((t == 0) | (t == 1)):
            raise ValidationError("label map values must be 0 or 1")
        sums = t.sum(axis=2)
        if not np.all(sums == 1):
            h, w = np.argwhere(sums != 1)[0]
            raise ValidationError(f"position (h={h}, w={w}) has {int(sums[h, w])} active classes, expected 1")
        object.__setattr__(self, "tensor", _readonly(t.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.tensor.shape[0]

    @property
    def width(self) -> int:
        return self.tensor.shape[1]

    @property
    def num_classes(self) -> int:
        return self.tensor.shape[2]

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return np.array_equal(self.tensor, other.tensor)


@dataclass(frozen=True, eq=False)
class RgbImage:
    """H x W x 3 image with values in [-1, 1]. Out-of-range values are rejected."""

    tensor: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.float32)
        if t.ndim != 3 or t.shape[2] != 3 or t.shape[0] < 1 or t.shape[1] < 1:
            raise ValidationError(f"image must be H x W x 3, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValidationError("image contains non-finite values")
        if t.min() < -1.0 or t.max() > 1.0:
            raise ValidationError(f"image values must lie in [-1, 1], got [{t.min():.4f}, {t.max():.4f}]")
        object.__setattr__(self, "tensor", _readonly(t))

    @property
    def height(self) -> int:
        return self.tensor.shape[0]

    @property
    def width(self) -> int:
        return self.tensor.shape[1]

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return np.array_equal(self.tensor, other.tensor)


@dataclass(frozen=True, eq=False)
class NoiseVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size < 1:
            raise ValidationError(f"noise must be a non-empty vector, got shape {v.shape}")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @classmethod
    def sample(cls, rng: np.random.Generator, dim: int = 64) -> "NoiseVector":
        return cls(rng.standard_normal(dim, dtype=np.float32))


@dataclass(frozen=True)
class PairedSample:
    image: RgbImage
    label: LabelMap
    id: str

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.label.height, self.label.width):
            raise ValidationError(
                f"sample {self.id}: image {self.image.height}x{self.image.width} "
                f"does not match label {self.label.height}x{self.label.width}"
            )


@dataclass(frozen=True)
class SplitDataset:
    """Paired set plus independently ordered unpaired image and label pools.

    The unpaired pools are only ever sampled independently of each other, so
    position ``i`` in ``unpaired_images`` carries no relation to position ``i``
    in ``unpaired_labels``.
    """

    paired: tuple[PairedSample, ...]
    unpaired_images: tuple[RgbImage, ...]
    unpaired_labels: tuple[LabelMap, ...]
    ratio: float
    unpaired_image_ids: tuple[str, ...] = ()
    unpaired_label_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "paired", tuple(self.paired))
        object.__setattr__(self, "unpaired_images", tuple(self.unpaired_images))
        object.__setattr__(self, "unpaired_labels", tuple(self.unpaired_labels))
        object.__setattr__(self, "unpaired_image_ids", tuple(self.unpaired_image_ids))
        object.__setattr__(self, "unpaired_label_ids", tuple(self.unpaired_label_ids))
        n_p, n_up = len(self.paired), len(self.unpaired_images)
        if n_p == 0:
            raise ValidationError("paired set is empty")
        if len(self.unpaired_labels) != n_up:
            raise ValidationError(
                f"unpaired pools differ in size: {n_up} images vs {len(self.unpaired_labels)} labels"
            )
        if not 0.0 < self.ratio <= 1.0:
            raise ValidationError(f"ratio must be in (0, 1], got {self.ratio}")
        n = n_p + n_up
        if abs(n_p / n - self.ratio) > 1.0 / (2 * n) + 1e-12:
            raise ValidationError(f"N^p={n_p} of N={n} is inconsistent with ratio {self.ratio}")
        for ids, name in ((self.unpaired_image_ids, "image"), (self.unpaired_label_ids, "label")):
            if ids and len(ids) != n_up:
                raise ValidationError(f"unpaired {name} ids length {len(ids)} != {n_up}")
        paired_ids = {s.id for s in self.paired}
        if len(paired_ids) != n_p:
            raise ValidationError("duplicate ids in paired set")
        overlap = paired_ids & (set(self.unpaired_image_ids) | set(self.unpaired_label_ids))
        if overlap:
            raise ValidationError(f"ids in both paired and unpaired pools: {sorted(overlap)[:5]}")

    @property
    def num_paired(self) -> int:
        return len(self.paired)

    @property
    def num_unpaired(self) -> int:
        return len(self.unpaired_images)


def encode_one_hot(idx: LabelIndexMap) -> LabelMap:
    eye = np.eye(idx.num_classes, dtype=np.uint8)
    return LabelMap(eye[idx.grid])


def decode_one_hot(m: LabelMap) -> LabelIndexMap:
    if not isinstance(m, LabelMap):
        m = LabelMap(m)  # validates
    return LabelIndexMap(m.tensor.argmax(axis=2), m.num_classes)


# -- tensor conversions ------------------------------------------------------


def labels_to_tensor(labels: Sequence[LabelMap], dtype=torch.float32) -> torch.Tensor:
    """Stack label maps into a (B, C, H, W) one-hot tensor."""
    arr = np.stack([m.tensor for m in labels]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def images_to_tensor(images: Sequence[RgbImage], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([x.tensor for x in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def tensor_to_images(x: torch.Tensor) -> list[RgbImage]:
    arr = x.detach().cpu().to(torch.float32).numpy().transpose(0, 2, 3, 1)
    return [RgbImage(np.clip(a, -1.0, 1.0)) for a in arr]


def noise_to_tensor(noise: Sequence[NoiseVector], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([z.values for z in noise])).to(dtype)


# -- disk formats ------------------------------------------------------------


def image_to_uint8(img: RgbImage) -> np.ndarray:
    return np.round((img.tensor.astype(np.float64) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)


def save_image_png(img: RgbImage, path) -> None:
    Image.fromarray(image_to_uint8(img), mode="RGB").save(path)


def load_image_png(path) -> RgbImage:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return RgbImage(arr / 127.5 - 1.0)


def save_label_png(idx: LabelIndexMap, path) -> None:
    if idx.num_classes > 256:
        raise ValidationError("8-bit label files hold at most 256 classes")
    Image.fromarray(idx.grid.astype(np.uint8), mode="L").save(path)


def load_label_png(path, num_classes: int) -> LabelIndexMap:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DataError(f"label file {path} must be single-channel, got mode {im.mode}")
            arr = np.asarray(im)
    except OSError as e:
        raise DataError(f"cannot read label map {path}: {e}") from e
    try:
        return LabelIndexMap(arr.astype(np.int64), num_classes)
    except ValidationError as e:
        raise DataError(f"{Path(path).name}: {e}") from e
