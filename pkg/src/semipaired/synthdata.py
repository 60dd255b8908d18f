"""Procedural "shapes world" scenes with an exact colour-decoding segmenter,
plus the paired / unpaired split protocol and the on-disk dataset layout.

Every shape class has a fixed base colour (gray for the background, evenly
spaced hues for the rest). Rendering only scales that colour's brightness, so
the nearest base colour recovers the label exactly as long as the jitter stays
below half the smallest inter-colour distance. ``SceneSpec`` enforces that.
"""

from __future__ import annotations

import colorsys
import hashlib
import itertools
import json
import os
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    DataError,
    LabelIndexMap,
    PairedSample,
    RgbImage,
    SplitDataset,
    ValidationError,
    decode_one_hot,
    encode_one_hot,
    load_image_png,
    load_label_png,
    save_image_png,
    save_label_png,
)

DATASET_FORMAT = "semipaired-dataset/1"
SPLIT_FORMAT = "semipaired-split/1"

_SATURATION = 1.0
_VALUE = 0.8
_BACKGROUND = (0.5, 0.5, 0.5)


@lru_cache(maxsize=None)
def _palette01(num_classes: int) -> np.ndarray:
    hues = [colorsys.hsv_to_rgb(k / (num_classes - 1), _SATURATION, _VALUE) for k in range(num_classes - 1)]
    pal = np.array([_BACKGROUND, *hues], dtype=np.float64)
    pal.setflags(write=False)
    return pal


def palette(num_classes: int) -> np.ndarray:
    """Base colours in [-1, 1], one row per class."""
    return 2.0 * _palette01(num_classes) - 1.0


def min_palette_distance(num_classes: int) -> float:
    """Smallest pairwise Euclidean distance between base colours, in [-1, 1] units."""
    pal = palette(num_classes)
    return min(float(np.linalg.norm(a - b)) for a, b in itertools.combinations(pal, 2))


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_classes: int = 8
    shapes_per_scene: tuple[int, int] = (1, 4)
    class_frequency_skew: float = 2.0
    brightness_jitter: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_scene", tuple(int(v) for v in self.shapes_per_scene))
        lo, hi = self.shapes_per_scene
        if not 2 <= self.num_classes <= 256:
            raise ValidationError(f"num_classes must be in [2, 256], got {self.num_classes}")
        if self.image_size < 4:
            raise ValidationError("image_size must be >= 4")
        if lo < 0 or hi < lo:
            raise ValidationError(f"invalid shapes_per_scene range {self.shapes_per_scene}")
        if self.class_frequency_skew < 0:
            raise ValidationError("class_frequency_skew must be >= 0")
        if not 0 <= self.brightness_jitter < 1:
            raise ValidationError("brightness_jitter must be in [0, 1)")
        pal = _palette01(self.num_classes)
        d_min = min(float(np.linalg.norm(a - b)) for a, b in itertools.combinations(pal, 2))
        shift = self.brightness_jitter * float(np.linalg.norm(pal, axis=1).max())
        if shift >= d_min / 2:
            raise ValidationError(
                f"brightness_jitter {self.brightness_jitter} moves colours by up to {shift:.3f}, "
                f"not below half the minimum palette distance {d_min:.3f}; decoding would be ambiguous"
            )

    def class_probabilities(self) -> np.ndarray:
        """Probability that a drawn shape belongs to class k (k = 1..C-1); index 0 is 0."""
        k = np.arange(1, self.num_classes, dtype=np.float64)
        w = k ** (-self.class_frequency_skew)
        return np.concatenate([[0.0], w / w.sum()])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes_per_scene"] = list(self.shapes_per_scene)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {"image_size", "num_classes", "shapes_per_scene", "class_frequency_skew", "brightness_jitter"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0, size, 2)
    ry, rx = rng.uniform(size / 10, size / 4, 2)
    kind = rng.integers(3)
    if kind == 0:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if kind == 1:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # triangle: apex up, base down
    top, bottom = cy - ry, cy + ry
    t = np.clip((yy - top) / (bottom - top), 0, None)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= t * rx)


def _brightness_field(rng: np.random.Generator, size: int, jitter: float) -> np.ndarray:
    # smooth shading in [1 - jitter, 1 + jitter]: a random offset plus a linear ramp
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1) - 0.5
    offset = rng.uniform(-0.5, 0.5)
    gy, gx = rng.uniform(-0.5, 0.5, 2)
    return 1.0 + jitter * np.clip(offset + gy * yy + gx * xx, -1.0, 1.0)


def generate_scene(seed, spec: SceneSpec = SceneSpec(), sample_id: str | None = None) -> PairedSample:
    """Render one scene. ``seed`` is anything ``np.random.default_rng`` accepts."""
    rng = np.random.default_rng(seed)
    size, C = spec.image_size, spec.num_classes
    pal = _palette01(C)
    probs = spec.class_probabilities()

    grid = np.zeros((size, size), dtype=np.int64)
    shade = _brightness_field(rng, size, spec.brightness_jitter)
    lo, hi = spec.shapes_per_scene
    for _ in range(rng.integers(lo, hi + 1)):
        cls = int(rng.choice(C, p=probs))
        mask = _shape_mask(rng, size)
        grid[mask] = cls
        shade = np.where(mask, _brightness_field(rng, size, spec.brightness_jitter), shade)

    rgb01 = pal[grid] * shade[..., None]
    image = RgbImage((2.0 * rgb01 - 1.0).astype(np.float32))
    label = encode_one_hot(LabelIndexMap(grid, C))
    if sample_id is None:
        sample_id = f"{seed:06d}" if isinstance(seed, (int, np.integer)) else "scene"
    return PairedSample(image=image, label=label, id=sample_id)


def generate_corpus(n: int, seed: int, spec: SceneSpec = SceneSpec()) -> list[PairedSample]:
    """``n`` scenes with ids ``000000``, ``000001``...; scene ``i`` is seeded by ``(seed, i)``."""
    return [generate_scene([seed, i], spec, sample_id=f"{i:06d}") for i in range(n)]


def oracle_segment(img: RgbImage, spec: SceneSpec) -> LabelIndexMap:
    """Assign every pixel to the class with the nearest base colour."""
    pal = palette(spec.num_classes).astype(np.float32)
    x = img.tensor if isinstance(img, RgbImage) else np.asarray(img, dtype=np.float32)
    d2 = ((x[:, :, None, :] - pal[None, None]) ** 2).sum(axis=-1)
    return LabelIndexMap(d2.argmin(axis=-1), spec.num_classes)


def oracle_segment_batch(images: np.ndarray, num_classes: int) -> np.ndarray:
    """Vectorized oracle over a (B, H, W, 3) array; returns (B, H, W) class indices."""
    pal = palette(num_classes).astype(np.float32)
    d2 = ((images[..., None, :] - pal) ** 2).sum(axis=-1)
    return d2.argmin(axis=-1)


# -- splitting ---------------------------------------------------------------


def num_paired_for(n: int, r: float) -> int:
    return int(np.floor(r * n + 0.5))


def split_dataset(samples: Sequence[PairedSample], r: float, seed: int) -> SplitDataset:
    if not 0.0 < r <= 1.0:
        raise ValidationError(f"ratio must be in (0, 1], got {r}")
    n = len(samples)
    n_p = num_paired_for(n, r)
    if n_p == 0:
        raise ValidationError(f"ratio {r} on {n} samples gives no paired samples; use a larger dataset")
    perm_rng, img_rng, lbl_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    perm = perm_rng.permutation(n)
    rest = perm[n_p:]
    img_order = img_rng.permutation(rest)
    lbl_order = lbl_rng.permutation(rest)
    return SplitDataset(
        paired=tuple(samples[i] for i in sorted(perm[:n_p])),
        unpaired_images=tuple(samples[i].image for i in img_order),
        unpaired_labels=tuple(samples[i].label for i in lbl_order),
        ratio=r,
        unpaired_image_ids=tuple(samples[i].id for i in img_order),
        unpaired_label_ids=tuple(samples[i].id for i in lbl_order),
    )


# -- on-disk layout ----------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(samples: Sequence[PairedSample], spec: SceneSpec, seed: int, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image_png(s.image, out / "images" / f"{s.id}.png")
        save_label_png(decode_one_hot(s.label), out / "labels" / f"{s.id}.png")
    manifest = {
        "format": DATASET_FORMAT,
        "ids": [s.id for s in samples],
        "num_classes": spec.num_classes,
        "image_size": spec.image_size,
        "palette": palette(spec.num_classes).tolist(),
        "seed": seed,
        "scene_spec": spec.to_dict(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def read_manifest(path, expected_format: str) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DataError(f"manifest not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt manifest {path}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != expected_format:
        raise DataError(f"{path} is not a {expected_format} manifest")
    return manifest


def load_dataset(data_dir) -> tuple[dict[str, PairedSample], SceneSpec, dict]:
    """Returns ``(samples_by_id, spec, manifest)``."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir / "manifest.json", DATASET_FORMAT)
    try:
        spec = SceneSpec.from_dict(manifest["scene_spec"])
        C = int(manifest["num_classes"])
        ids = list(manifest["ids"])
    except (KeyError, TypeError, ValidationError) as e:
        raise DataError(f"corrupt dataset manifest in {data_dir}: {e}") from e
    samples = {}
    for i in ids:
        img = load_image_png(data_dir / "images" / f"{i}.png")
        lbl = encode_one_hot(load_label_png(data_dir / "labels" / f"{i}.png", C))
        try:
            samples[i] = PairedSample(img, lbl, i)
        except ValidationError as e:
            raise DataError(str(e)) from e
    return samples, spec, manifest


def write_split(split: SplitDataset, data_dir, seed: int, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(data_dir)
    manifest = {
        "format": SPLIT_FORMAT,
        "dataset_dir": os.path.relpath(data_dir.resolve(), out.resolve()),
        "dataset_manifest_sha256": file_sha256(data_dir / "manifest.json"),
        "ratio": split.ratio,
        "seed": seed,
        "paired_ids": [s.id for s in split.paired],
        "unpaired_image_ids": list(split.unpaired_image_ids),
        "unpaired_label_ids": list(split.unpaired_label_ids),
    }
    path = out / "split.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_split(split_dir) -> tuple[SplitDataset, SceneSpec, dict]:
    split_dir = Path(split_dir)
    manifest = read_manifest(split_dir / "split.json", SPLIT_FORMAT)
    try:
        data_dir = (split_dir / manifest["dataset_dir"]).resolve()
        want_hash = manifest["dataset_manifest_sha256"]
        paired_ids = manifest["paired_ids"]
        img_ids = manifest["unpaired_image_ids"]
        lbl_ids = manifest["unpaired_label_ids"]
        ratio = float(manifest["ratio"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"corrupt split manifest in {split_dir}: {e}") from e
    if not (data_dir / "manifest.json").exists():
        raise DataError(f"dataset referenced by split not found: {data_dir}")
    if file_sha256(data_dir / "manifest.json") != want_hash:
        raise DataError(f"dataset manifest in {data_dir} changed since the split was made")
    samples, spec, _ = load_dataset(data_dir)
    try:
        split = SplitDataset(
            paired=tuple(samples[i] for i in paired_ids),
            unpaired_images=tuple(samples[i].image for i in img_ids),
            unpaired_labels=tuple(samples[i].label for i in lbl_ids),
            ratio=ratio,
            unpaired_image_ids=tuple(img_ids),
            unpaired_label_ids=tuple(lbl_ids),
        )
    except KeyError as e:
        raise DataError(f"split references unknown sample id {e}") from e
    except ValidationError as e:
        raise DataError(f"invalid split in {split_dir}: {e}") from e
    manifest["dataset_dir_resolved"] = str(data_dir)
    return split, spec, manifest
