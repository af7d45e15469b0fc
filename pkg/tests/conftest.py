import math

import numpy as np
import pytest

from softmil.evaluation import Candidate, RocTable
from softmil.geometry import EllipseMark, GroundTruthMark


def circle(mark_id, reader, cx, cy, r, image_id=0):
    return EllipseMark(mark_id, image_id, reader, (cx, cy), (r, r), 0.0)


def lens_area(r1, r2, d):
    """Closed-form overlap area of two circles with center distance d."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    a = r1**2 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    b = r2**2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    c = 0.5 * math.sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    return a + b - c


def make_gt(gt_id, image_id, cx, cy, r, readers=2):
    rep = circle(1000 + gt_id, 0, cx, cy, r, image_id)
    return GroundTruthMark(gt_id, image_id, tuple(range(readers)), rep, readers, readers)


def inside(gt, loc):
    (cx, cy), (r, _) = gt.representative_ellipse.center, gt.representative_ellipse.semi_axes
    return (loc[0] - cx) ** 2 + (loc[1] - cy) ** 2 <= r * r


def brute_force_froc(scores, candidates, gts, image_ids, fp_points):
    """Try every threshold; keep the most sensitive one within each FP budget."""
    truth = [g for g in gts if g.distinct_readers >= 2]
    gt_images = sorted({g.image_id for g in truth})
    options = sorted({-math.inf, *scores})
    rows = []
    for t in options:
        det = [s > t for s in scores]
        fp = sum(d and not any(g.image_id == c.image_id and inside(g, c.location) for g in truth)
                 for d, c in zip(det, candidates))
        found = [any(d and c.image_id == g.image_id and inside(g, c.location) for d, c in zip(det, candidates))
                 for g in truth]
        img = [any(f for f, g in zip(found, truth) if g.image_id == i) for i in gt_images]
        gs = 100.0 * sum(found) / len(truth) if truth else 0.0
        im = 100.0 * sum(img) / len(img) if img else 0.0
        rows.append((t, fp / len(image_ids), gs, im))
    out = []
    for budget in fp_points:
        ok = [r for r in rows if r[1] <= budget]
        best = max(ok, key=lambda r: (r[2], r[3], -r[0]))
        out.append(best)
    return RocTable(list(fp_points), [r[2] for r in out], [r[3] for r in out], [r[0] for r in out])


def random_scored_dataset(rng):
    n_img = int(rng.integers(1, 9))
    gts, cands = [], []
    for i in range(n_img):
        for _ in range(int(rng.integers(0, 3))):
            gts.append(make_gt(len(gts), i, rng.uniform(10, 90), rng.uniform(10, 90), rng.uniform(5, 15),
                               readers=int(rng.integers(1, 4))))
    n_c = int(rng.integers(0, 21))
    for k in range(n_c):
        i = int(rng.integers(n_img))
        own = [g for g in gts if g.image_id == i]
        if own and rng.random() < 0.5:
            g = own[int(rng.integers(len(own)))]
            loc = (g.representative_ellipse.center[0] + rng.uniform(-3, 3),
                   g.representative_ellipse.center[1] + rng.uniform(-3, 3))
        else:
            loc = (rng.uniform(0, 100), rng.uniform(0, 100))
        cands.append(Candidate(k, i, loc, np.zeros(1)))
    # coarse scores so ties happen
    scores = np.round(rng.uniform(0, 1, n_c), 1)
    return scores, cands, gts, list(range(n_img))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    from softmil.synth import SynthConfig, synth

    return synth(SynthConfig(n_images=90, seed=3))
