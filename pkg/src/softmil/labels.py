"""Soft malignancy targets from reader agreement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from softmil.errors import ValidationError
from softmil.geometry import GroundTruthMark


@dataclass(frozen=True)
class LabelConfig:
    n_readers_min: int = 4
    n_readers_max: int = 25
    depression: float = 1.0 / 8.0

    def __post_init__(self):
        if not 1 <= self.n_readers_min <= self.n_readers_max:
            raise ValidationError("need 1 <= n_readers_min <= n_readers_max")
        if not 0 < self.depression <= 1:
            raise ValidationError(f"depression must be in (0, 1], got {self.depression}")

    @property
    def smallest_probability(self) -> float:
        """Two readers out of the largest possible panel."""
        return 2.0 / self.n_readers_max


@dataclass(frozen=True)
class SoftTarget:
    gt_id: int
    image_id: int
    p_target: float
    n_annotators: int


def naive_probability(distinct_readers: int, n_annotators: int, gt_id: int | None = None) -> float:
    if not 1 <= distinct_readers <= n_annotators:
        raise ValidationError(
            f"GT {gt_id}: need 1 <= distinct_readers ({distinct_readers})"
            f" <= n_annotators ({n_annotators})"
        )
    return distinct_readers / n_annotators


def single_annotator_probability(n_annotators: int, cfg: LabelConfig = LabelConfig()) -> float:
    """Depressed target for a GT only one reader marked.

    Equals ``depression * 2 / n_readers_max`` on an image read by the
    minimum panel and shrinks in proportion to larger panels.
    """
    if n_annotators < cfg.n_readers_min:
        raise ValidationError(
            f"image read by {n_annotators} readers, fewer than n_readers_min={cfg.n_readers_min}"
        )
    p_star = cfg.depression * cfg.smallest_probability
    if n_annotators == cfg.n_readers_min:
        return p_star
    return p_star * cfg.n_readers_min / n_annotators


def assign_soft_targets(
    gts: Sequence[GroundTruthMark],
    readers_per_image: Mapping[int, int],
    cfg: LabelConfig = LabelConfig(),
) -> list[SoftTarget]:
    out = []
    for gt in gts:
        if gt.image_id not in readers_per_image:
            raise ValidationError(f"no reader count for image {gt.image_id} (GT {gt.gt_id})")
        n = int(readers_per_image[gt.image_id])
        if gt.distinct_readers == 1:
            p = single_annotator_probability(n, cfg)
        else:
            p = naive_probability(gt.distinct_readers, n, gt.gt_id)
        out.append(SoftTarget(gt.gt_id, gt.image_id, min(1.0, max(0.0, p)), n))
    return out
