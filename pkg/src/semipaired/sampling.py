"""Rare-class oversampling of the paired set.

Each paired image gets a score equal to the sum, over classes it contains, of
its share of that class's pixels in the whole paired set. Scores are
normalized to probabilities and used for with-replacement batch draws during
the rare-weighted phase; otherwise batches are drawn uniformly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PairedSample, ValidationError


class Phase(enum.Enum):
    RARE_WEIGHTED = "rare_weighted"
    UNIFORM = "uniform"


@dataclass(frozen=True, eq=False)
class ClassPixelStats:
    per_image: np.ndarray  # (N^p, C) pixel counts
    per_dataset: np.ndarray  # (C,)
    presence: np.ndarray  # (N^p, C) bool
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.per_image.ndim != 2 or self.per_image.shape[0] == 0:
            raise ValidationError("per_image must be a non-empty N x C matrix")
        if not np.array_equal(self.per_image.sum(axis=0), self.per_dataset):
            raise ValidationError("per_dataset totals do not match per_image column sums")
        if not np.array_equal(self.presence, self.per_image > 0):
            raise ValidationError("presence must equal per_image > 0")


@dataclass(frozen=True, eq=False)
class SamplingPlan:
    probabilities: np.ndarray
    phase_boundary: int
    rare_phase_first: bool = True
    rare_sampling: bool = True

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("probabilities must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError(f"probabilities must be non-negative and sum to 1 (sum={p.sum()!r})")
        object.__setattr__(self, "probabilities", p)

    def phase(self, iteration: int) -> Phase:
        if not self.rare_sampling:
            return Phase.UNIFORM
        first_half = iteration < self.phase_boundary
        return Phase.RARE_WEIGHTED if first_half == self.rare_phase_first else Phase.UNIFORM


def class_pixel_stats(paired: Sequence[PairedSample], num_classes: int | None = None) -> ClassPixelStats:
    if not paired:
        raise ValidationError("class statistics need a non-empty paired set")
    C = num_classes or paired[0].label.num_classes
    counts = np.stack([s.label.tensor.reshape(-1, C).sum(axis=0, dtype=np.int64) for s in paired])
    return ClassPixelStats(counts, counts.sum(axis=0), counts > 0, tuple(s.id for s in paired))


def rare_class_probabilities(stats: ClassPixelStats) -> np.ndarray:
    present_anywhere = stats.presence.any(axis=0)
    if np.any(present_anywhere & (stats.per_dataset <= 0)):
        raise ValidationError("a class is present in an image but has a zero dataset total")
    totals = np.where(stats.per_dataset > 0, stats.per_dataset, 1).astype(np.float64)
    share = np.where(stats.presence, stats.per_image / totals, 0.0)
    scores = share.sum(axis=1)
    return scores / scores.sum()


def sampling_phase(iteration: int, total_iterations: int, rare_phase_first: bool = True) -> Phase:
    """Rare-weighted for iterations before floor(total/2), uniform after.

    ``rare_phase_first=False`` gives the inverted schedule (rare weighting in
    the second half).
    """
    if not 0 <= iteration < total_iterations:
        raise ValidationError(f"iteration {iteration} outside [0, {total_iterations})")
    first_half = iteration < total_iterations // 2
    return Phase.RARE_WEIGHTED if first_half == rare_phase_first else Phase.UNIFORM


def make_plan(stats: ClassPixelStats, total_iterations: int, rare_phase_first=True, rare_sampling=True) -> SamplingPlan:
    return SamplingPlan(rare_class_probabilities(stats), total_iterations // 2, rare_phase_first, rare_sampling)


def draw_paired_batch(plan: SamplingPlan, phase: Phase, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    n = plan.probabilities.size
    if phase is Phase.RARE_WEIGHTED:
        return rng.choice(n, size=batch_size, replace=True, p=plan.probabilities)
    return rng.integers(n, size=batch_size)


def draw_uniform_batch(pool_size: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if pool_size < 1:
        raise ValidationError("cannot sample from an empty pool")
    return rng.integers(pool_size, size=batch_size)
