"""Synthetic multi-reader detection data with a planted sparse model.

Each image gets a reader roster, zero or more elliptical lesions and a set
of background candidates. Candidate features are Gaussian; lesion
candidates are shifted along the planted weight direction. A candidate is
positive with probability ``sigmoid(w_true @ x + b_true)`` and a lesion's
chance of being marked by a reader follows its bag probability
``1 - prod(1 - sigmoid(...))``, blended with a deterministic majority rule
by the ``noise`` knob (0 = every reader agrees).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from softmil.data import Dataset
from softmil.errors import ValidationError
from softmil.evaluation import Candidate
from softmil.geometry import EllipseMark


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 640
    readers_min: int = 4
    readers_max: int = 6
    reader_pool: int = 8
    n_features: int = 50
    support_size: int = 5
    weight_range: tuple[float, float] = (1.0, 2.0)
    intercept: float = -4.0
    lesion_rate: float = 0.6
    second_lesion_rate: float = 0.2
    lesion_candidates: tuple[int, int] = (1, 3)
    background_candidates: tuple[int, int] = (6, 12)
    lesion_shift: float = 4.5
    feature_scale: float = 0.2
    noise: float = 1.0
    false_mark_rate: float = 0.1
    image_size_mm: float = 300.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.support_size <= self.n_features:
            raise ValidationError("support_size must be in [1, n_features]")
        if not 1 <= self.readers_min <= self.readers_max <= self.reader_pool:
            raise ValidationError("need 1 <= readers_min <= readers_max <= reader_pool")
        if not 0.0 <= self.noise <= 1.0:
            raise ValidationError("noise must be in [0, 1]")
        if not self.feature_scale > 0:
            raise ValidationError("feature_scale must be positive")
        if self.n_images < 1:
            raise ValidationError("n_images must be positive")
        if self.lesion_candidates[0] < 1 or self.lesion_candidates[0] > self.lesion_candidates[1]:
            raise ValidationError("lesion_candidates must be a range starting at >= 1")
        if self.background_candidates[0] < 0 or self.background_candidates[0] > self.background_candidates[1]:
            raise ValidationError("background_candidates must be a nonnegative range")


@dataclass
class SynthResult:
    dataset: Dataset
    w_true: np.ndarray
    b_true: float
    lesions: list[EllipseMark]
    lesion_probability: list[float]


def _mark_probability(p: float, noise: float) -> float:
    return (1.0 - noise) * float(p >= 0.5) + noise * p


def _jitter(rng, lesion: EllipseMark, mark_id: int, reader: int) -> EllipseMark:
    r1, r2 = lesion.semi_axes
    d = 2 * r1
    cx = lesion.center[0] + rng.normal(0, 0.02 * d)
    cy = lesion.center[1] + rng.normal(0, 0.02 * d)
    a, b = sorted((r1 * rng.uniform(0.92, 1.08), r2 * rng.uniform(0.92, 1.08)), reverse=True)
    theta = (lesion.rotation + rng.normal(0, 0.05)) % math.pi
    return EllipseMark(mark_id, lesion.image_id, reader, (cx, cy), (a, b), theta)


def synth(cfg: SynthConfig = SynthConfig()) -> SynthResult:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.n_features
    w_true = np.zeros(d)
    support = np.sort(rng.choice(d, cfg.support_size, replace=False))
    w_true[support] = rng.uniform(*cfg.weight_range, cfg.support_size) * rng.choice([-1, 1], cfg.support_size)
    direction = w_true / np.linalg.norm(w_true)
    size = cfg.image_size_mm
    margin = 0.15 * size

    images, marks, candidates = {}, [], []
    lesions, lesion_p = [], []

    def new_mark(ellipse_fn):
        m = ellipse_fn(len(marks))
        marks.append(m)

    for image_id in range(cfg.n_images):
        n_readers = int(rng.integers(cfg.readers_min, cfg.readers_max + 1))
        roster = tuple(sorted(int(r) for r in rng.choice(cfg.reader_pool, n_readers, replace=False)))
        images[image_id] = roster

        n_lesions = 0
        if rng.random() < cfg.lesion_rate:
            n_lesions = 2 if rng.random() < cfg.second_lesion_rate else 1
        placed: list[EllipseMark] = []
        for _ in range(n_lesions):
            for _attempt in range(50):
                r1 = rng.uniform(8.0, 20.0)
                r2 = r1 * rng.uniform(0.6, 1.0)
                c = tuple(rng.uniform(margin, size - margin, 2))
                if all(math.dist(c, o.center) > r1 + o.semi_axes[0] + 10 for o in placed):
                    placed.append(EllipseMark(-1, image_id, -1, c, (r1, r2), rng.uniform(0, math.pi)))
                    break

        for lesion in placed:
            k = int(rng.integers(cfg.lesion_candidates[0], cfg.lesion_candidates[1] + 1))
            x = rng.normal(size=(k, d)) + cfg.lesion_shift * direction
            p_bag = float(-np.expm1(np.sum(np.log(expit(-(x @ w_true + cfg.intercept))))))
            for row in x:
                rad, ang = 0.6 * math.sqrt(rng.random()), rng.uniform(0, 2 * math.pi)
                u, v = rad * lesion.semi_axes[0] * math.cos(ang), rad * lesion.semi_axes[1] * math.sin(ang)
                cs, sn = math.cos(lesion.rotation), math.sin(lesion.rotation)
                loc = (lesion.center[0] + cs * u - sn * v, lesion.center[1] + sn * u + cs * v)
                candidates.append(Candidate(len(candidates), image_id, loc, cfg.feature_scale * row))
            q = _mark_probability(p_bag, cfg.noise)
            for reader in roster:
                if rng.random() < q:
                    new_mark(lambda mid: _jitter(rng, lesion, mid, reader))
            lesions.append(lesion)
            lesion_p.append(p_bag)

        n_bg = int(rng.integers(cfg.background_candidates[0], cfg.background_candidates[1] + 1))
        for _ in range(n_bg):
            for _attempt in range(50):
                loc = tuple(rng.uniform(margin / 3, size - margin / 3, 2))
                if all(math.dist(loc, o.center) > 1.3 * o.semi_axes[0] + 8 for o in placed):
                    break
            x = rng.normal(size=d)
            candidates.append(Candidate(len(candidates), image_id, loc, cfg.feature_scale * x))
            p_false = cfg.noise * cfg.false_mark_rate * float(expit(x @ w_true + cfg.intercept))
            for reader in roster:
                if rng.random() < p_false:
                    r = rng.uniform(4.0, 8.0)
                    new_mark(lambda mid: EllipseMark(
                        mid, image_id, reader, (loc[0] + rng.normal(0, 1), loc[1] + rng.normal(0, 1)),
                        (r, r * rng.uniform(0.7, 1.0)), rng.uniform(0, math.pi)))

    names = [f"f{i:03d}" for i in range(d)]
    w_scaled = w_true / cfg.feature_scale
    return SynthResult(Dataset(images, marks, candidates, names), w_scaled, cfg.intercept, lesions, lesion_p)
