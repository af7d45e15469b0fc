"""Bag construction and FROC-style detection metrics.

Detection truth is the set of pseudo golden GTs (GTs marked by two or more
readers). A candidate is detected when its score is strictly greater than
the operating threshold; detected candidates outside every pseudo golden
GT count as false positives, averaged over all images including healthy
ones.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from softmil.errors import ValidationError
from softmil.geometry import EllipseMark, GroundTruthMark, HitConfig, marks_hit, points_in_ellipse
from softmil.labels import SoftTarget
from softmil.objective import HARD_NEGATIVE, SOFT, Bag

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Candidate:
    candidate_id: int
    image_id: int
    location: tuple[float, float]
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if not np.all(np.isfinite(self.features)):
            raise ValidationError(f"candidate {self.candidate_id}: non-finite features")
        if not all(math.isfinite(v) for v in self.location):
            raise ValidationError(f"candidate {self.candidate_id}: non-finite location")


@dataclass
class RocTable:
    fp_points: list[float]
    gt_sensitivity: list[float]
    image_sensitivity: list[float]
    thresholds: list[float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fp_point", "threshold", "gt_sensitivity", "image_sensitivity"])
        for row in zip(self.fp_points, self.thresholds, self.gt_sensitivity, self.image_sensitivity):
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> RocTable:
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            [float(r["fp_point"]) for r in rows],
            [float(r["gt_sensitivity"]) for r in rows],
            [float(r["image_sensitivity"]) for r in rows],
            [float(r["threshold"]) for r in rows],
        )


def with_intercept(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _containing_gt(
    candidates: Sequence[Candidate],
    gts: Sequence[GroundTruthMark],
    priority: Mapping[int, float],
    scale: float,
) -> dict[int, int | None]:
    """Map candidate id to the GT whose ellipse holds it (best priority wins)."""
    by_image: dict[int, list[GroundTruthMark]] = {}
    for gt in gts:
        by_image.setdefault(gt.image_id, []).append(gt)
    out: dict[int, int | None] = {}
    for cand in candidates:
        best = None
        for gt in by_image.get(cand.image_id, ()):
            if points_in_ellipse(gt.representative_ellipse, cand.location, scale)[0]:
                key = (-priority[gt.gt_id], gt.gt_id)
                if best is None or key < best[0]:
                    best = (key, gt.gt_id)
        out[cand.candidate_id] = None if best is None else best[1]
    return out


def build_bags(
    candidates: Sequence[Candidate],
    gts: Sequence[GroundTruthMark],
    targets: Sequence[SoftTarget],
    readers_per_image: Mapping[int, int],
    n_readers_max: int = 25,
    scale: float = 1.0,
    intercept: bool = True,
) -> list[Bag]:
    """Group candidates into one soft bag per GT plus hard-negative singletons.

    A candidate joins the GT whose representative ellipse (inflated by
    ``scale``) contains its location; overlaps go to the GT with the highest
    target, then the smallest gt_id. GTs that capture no candidate are left
    out and logged.
    """
    p_by_gt = {t.gt_id: t.p_target for t in targets}
    missing = [gt.gt_id for gt in gts if gt.gt_id not in p_by_gt]
    if missing:
        raise ValidationError(f"GTs without a soft target: {missing[:10]}")
    gt_images = {gt.image_id for gt in gts}
    for image_id in gt_images | {c.image_id for c in candidates}:
        if image_id not in readers_per_image:
            raise ValidationError(f"no reader count for image {image_id}")

    owner = _containing_gt(candidates, gts, p_by_gt, scale)
    members: dict[int, list[Candidate]] = {gt.gt_id: [] for gt in gts}
    negatives = []
    for cand in candidates:
        gt_id = owner[cand.candidate_id]
        if gt_id is None:
            negatives.append(cand)
        else:
            members[gt_id].append(cand)

    def features(cs):
        x = np.vstack([c.features for c in cs])
        return with_intercept(x) if intercept else x

    def weight(image_id):
        return min(1.0, readers_per_image[image_id] / n_readers_max)

    bags = []
    for gt in gts:
        cs = members[gt.gt_id]
        if not cs:
            log.info("GT %d on image %d has no candidates (candidate-generation miss)", gt.gt_id, gt.image_id)
            continue
        bags.append(
            Bag(len(bags), gt.image_id, features(cs), p_by_gt[gt.gt_id], weight(gt.image_id), SOFT,
                tuple(c.candidate_id for c in cs))
        )
    for cand in negatives:
        bags.append(
            Bag(len(bags), cand.image_id, features([cand]), 0.0, weight(cand.image_id), HARD_NEGATIVE,
                (cand.candidate_id,))
        )
    return bags


@dataclass
class DetectionSet:
    """Candidates matched against pseudo golden GTs, ready for scoring.

    ``matches[i]`` lists indices into ``gt_ids`` of the pseudo golden GTs
    whose ellipse contains candidate ``i``.
    """

    image_ids: np.ndarray
    candidate_ids: np.ndarray
    candidate_image: np.ndarray
    features: np.ndarray
    gt_ids: np.ndarray
    gt_image: np.ndarray
    matches: list[tuple[int, ...]] = field(repr=False)

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    def scores(self, w: np.ndarray) -> np.ndarray:
        return expit(self.features @ w)


def detection_set(
    candidates: Sequence[Candidate],
    gts: Sequence[GroundTruthMark],
    image_ids: Sequence[int],
    scale: float = 1.0,
    intercept: bool = True,
) -> DetectionSet:
    pseudo = [gt for gt in gts if gt.is_pseudo_golden]
    images = np.array(sorted(set(image_ids)), dtype=int)
    known = set(images.tolist())
    for c in candidates:
        if c.image_id not in known:
            raise ValidationError(f"candidate {c.candidate_id} on unknown image {c.image_id}")
    by_image: dict[int, list[int]] = {}
    for k, gt in enumerate(pseudo):
        by_image.setdefault(gt.image_id, []).append(k)
    matches = []
    for c in candidates:
        matches.append(tuple(
            k for k in by_image.get(c.image_id, ())
            if points_in_ellipse(pseudo[k].representative_ellipse, c.location, scale)[0]
        ))
    if candidates:
        x = np.vstack([c.features for c in candidates])
        x = with_intercept(x) if intercept else x
    else:
        x = np.zeros((0, 0))
    return DetectionSet(
        image_ids=images,
        candidate_ids=np.array([c.candidate_id for c in candidates], dtype=int),
        candidate_image=np.array([c.image_id for c in candidates], dtype=int),
        features=x,
        gt_ids=np.array([gt.gt_id for gt in pseudo], dtype=int),
        gt_image=np.array([gt.image_id for gt in pseudo], dtype=int),
        matches=matches,
    )


def _best_scores(det: DetectionSet, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Highest candidate score per pseudo GT and per GT-bearing image."""
    gt_best = np.full(len(det.gt_ids), -np.inf)
    for i, ks in enumerate(det.matches):
        for k in ks:
            gt_best[k] = max(gt_best[k], scores[i])
    img_best: dict[int, float] = {}
    for k, image_id in enumerate(det.gt_image.tolist()):
        img_best[image_id] = max(img_best.get(image_id, -np.inf), gt_best[k])
    return gt_best, np.array([img_best[i] for i in sorted(img_best)])


def _percent(hit: np.ndarray) -> float:
    return 100.0 * float(np.count_nonzero(hit)) / len(hit) if len(hit) else 0.0


def sensitivities_at(det: DetectionSet, scores: np.ndarray, threshold: float) -> tuple[float, float, float]:
    """(FP per image, GT sensitivity %, image sensitivity %) at one threshold."""
    scores = np.asarray(scores, dtype=float)
    is_fp = np.array([not m for m in det.matches], dtype=bool)
    fp = np.count_nonzero(scores[is_fp] > threshold) / det.n_images if det.n_images else 0.0
    gt_best, img_best = _best_scores(det, scores)
    return fp, _percent(gt_best > threshold), _percent(img_best > threshold)


def froc_table(det: DetectionSet, scores: np.ndarray, fp_points: Sequence[float]) -> RocTable:
    """Sensitivities at the lowest threshold meeting each FP-per-image budget."""
    fp_points = [float(f) for f in fp_points]
    if any(f <= 0 for f in fp_points) or any(b <= a for a, b in zip(fp_points, fp_points[1:])):
        raise ValidationError("fp_points must be positive and strictly increasing")
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0 or det.n_images == 0:
        zeros = [0.0] * len(fp_points)
        return RocTable(fp_points, zeros, list(zeros), [-math.inf] * len(fp_points))

    is_fp = np.array([not m for m in det.matches], dtype=bool)
    fp_scores = np.sort(scores[is_fp])
    # candidate thresholds in increasing order; detection means score > t
    thresholds = np.concatenate([[-np.inf], np.unique(scores)])
    fp_per_image = (len(fp_scores) - np.searchsorted(fp_scores, thresholds, side="right")) / det.n_images
    gt_best, img_best = _best_scores(det, scores)

    gt_sens, img_sens, chosen = [], [], []
    for budget in fp_points:
        k = int(np.argmax(fp_per_image <= budget))
        t = float(thresholds[k])
        chosen.append(t)
        gt_sens.append(_percent(gt_best > t))
        img_sens.append(_percent(img_best > t))
    return RocTable(fp_points, gt_sens, img_sens, chosen)


def apply_thresholds(det: DetectionSet, scores: np.ndarray, thresholds: Sequence[float]) -> RocTable:
    """Evaluate fixed thresholds; ``fp_points`` holds the induced FP per image."""
    rows = [sensitivities_at(det, scores, t) for t in thresholds]
    return RocTable(
        [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], [float(t) for t in thresholds]
    )


def froc(
    scores: np.ndarray,
    candidates: Sequence[Candidate],
    gts: Sequence[GroundTruthMark],
    image_ids: Sequence[int],
    fp_points: Sequence[float],
    scale: float = 1.0,
) -> RocTable:
    """FROC table for candidate scores (aligned with ``candidates``)."""
    det = detection_set(candidates, gts, image_ids, scale, intercept=False)
    return froc_table(det, scores, fp_points)


@dataclass
class ReaderStats:
    reader_id: int
    n_images: int
    n_marks: int
    sensitivity: float
    fp_rate: float


def reader_stats(
    marks: Sequence[EllipseMark],
    gts: Sequence[GroundTruthMark],
    rosters: Mapping[int, Sequence[int]],
    cfg: HitConfig = HitConfig(),
) -> dict[int, ReaderStats]:
    """Per-reader sensitivity and FP rate against the pseudo golden GTs.

    Sensitivity is NaN for a reader whose images carry no pseudo golden GT.
    Readers who read no image are dropped with a warning.
    """
    pseudo_by_image: dict[int, list[GroundTruthMark]] = {}
    for gt in gts:
        if gt.is_pseudo_golden:
            pseudo_by_image.setdefault(gt.image_id, []).append(gt)
    read: dict[int, list[int]] = {}
    for image_id, readers in rosters.items():
        for r in readers:
            read.setdefault(r, []).append(image_id)
    marks_by_reader: dict[int, list[EllipseMark]] = {}
    for m in marks:
        marks_by_reader.setdefault(m.reader_id, []).append(m)

    out = {}
    for reader in sorted(set(read) | set(marks_by_reader)):
        images = set(read.get(reader, ()))
        if not images:
            log.warning("reader %d read no images; excluded from reader statistics", reader)
            continue
        own = [m for m in marks_by_reader.get(reader, ()) if m.image_id in images]
        targets = [gt for i in sorted(images) for gt in pseudo_by_image.get(i, ())]

        def hits(m, gt):
            return marks_hit(m, gt.representative_ellipse, cfg, require_distinct_readers=False)

        found = sum(any(hits(m, gt) for m in own if m.image_id == gt.image_id) for gt in targets)
        false = sum(
            not any(hits(m, gt) for gt in pseudo_by_image.get(m.image_id, ())) for m in own
        )
        sens = found / len(targets) if targets else math.nan
        out[reader] = ReaderStats(reader, len(images), len(own), sens, false / len(images))
    return out
