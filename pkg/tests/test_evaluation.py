import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softmil.errors import ValidationError
from softmil.evaluation import (
    Candidate,
    RocTable,
    apply_thresholds,
    build_bags,
    detection_set,
    froc,
    reader_stats,
)
from softmil.labels import SoftTarget
from softmil.objective import HARD_NEGATIVE, SOFT

from conftest import brute_force_froc, circle, make_gt, random_scored_dataset


def test_froc_equals_exhaustive_enumeration():
    rng = np.random.default_rng(7)
    fps = (0.25, 0.5, 1.0, 2.0)
    for _ in range(50):
        scores, cands, gts, images = random_scored_dataset(rng)
        got = froc(scores, cands, gts, images, fps)
        want = brute_force_froc(list(scores), cands, gts, images, fps)
        assert got == want


def test_froc_hand_example():
    gts = [make_gt(0, 0, 0, 0, 5), make_gt(1, 1, 0, 0, 5), make_gt(2, 1, 50, 50, 5, readers=1)]
    cands = [Candidate(0, 0, (0, 0), [0]), Candidate(1, 0, (30, 30), [0]),
             Candidate(2, 1, (1, 1), [0]), Candidate(3, 1, (50, 50), [0])]
    scores = np.array([0.9, 0.8, 0.3, 0.7])
    table = froc(scores, cands, gts, [0, 1], (0.5, 1.0))
    # false candidates score 0.8 and 0.7 (a single-reader GT is not truth);
    # FP <= 0.5 allows one of them, so 0.7 is the lowest admissible threshold
    assert table.thresholds == [0.7, -math.inf]
    assert table.gt_sensitivity == [50.0, 100.0]
    assert table.image_sensitivity == [50.0, 100.0]


def test_froc_validation_and_empty_input():
    with pytest.raises(ValidationError):
        froc(np.zeros(0), [], [], [0], (1.0, 0.5))
    empty = froc(np.zeros(0), [], [], [0], (0.5,))
    assert empty.gt_sensitivity == [0.0] and empty.thresholds == [-math.inf]


def test_apply_thresholds_reports_induced_fp():
    gts = [make_gt(0, 0, 0, 0, 5)]
    cands = [Candidate(0, 0, (0, 0), [0]), Candidate(1, 0, (30, 30), [0]), Candidate(2, 1, (30, 30), [0])]
    det = detection_set(cands, gts, [0, 1], intercept=False)
    table = apply_thresholds(det, np.array([0.9, 0.5, 0.6]), [0.55, 0.0])
    assert table.fp_points == [0.5, 1.0]
    assert table.gt_sensitivity == [100.0, 100.0]


def test_roc_csv_round_trip():
    t = RocTable([0.5, 1.0], [1 / 3, 50.0], [2 / 3, 75.0], [0.123456789, -math.inf])
    assert RocTable.from_csv(t.to_csv()) == t
    assert t.to_csv().splitlines()[0] == "fp_point,threshold,gt_sensitivity,image_sensitivity"


def test_build_bags_grouping_and_weights():
    gts = [make_gt(0, 0, 0, 0, 5), make_gt(1, 0, 100, 100, 5), make_gt(2, 0, 2, 0, 5)]
    targets = [SoftTarget(0, 0, 0.5, 5), SoftTarget(1, 0, 1.0, 5), SoftTarget(2, 0, 0.8, 5)]
    cands = [Candidate(0, 0, (0, 0), [1.0]), Candidate(1, 0, (-4, 0), [2.0]),
             Candidate(2, 0, (60, 60), [3.0])]
    bags = build_bags(cands, gts, targets, {0: 5})
    # candidate 0 sits in GT 0 and GT 2; the higher target wins
    assert [(b.kind, b.candidate_ids, b.p_target) for b in bags] == [
        (SOFT, (1,), 0.5), (SOFT, (0,), 0.8), (HARD_NEGATIVE, (2,), 0.0)]
    assert bags[0].annotator_weight == pytest.approx(5 / 25)
    np.testing.assert_array_equal(bags[0].instances, [[2.0, 1.0]])
    with pytest.raises(ValidationError):
        build_bags(cands, gts, targets[:2], {0: 5})
    with pytest.raises(ValidationError):
        build_bags(cands, gts, targets, {})


def test_scale_inflates_assignment():
    gts = [make_gt(0, 0, 0, 0, 5)]
    cands = [Candidate(0, 0, (7, 0), [1.0])]
    t = [SoftTarget(0, 0, 1.0, 4)]
    assert build_bags(cands, gts, t, {0: 4})[0].kind == HARD_NEGATIVE
    assert build_bags(cands, gts, t, {0: 4}, scale=1.5)[0].kind == SOFT


def test_reader_stats():
    gts = [make_gt(0, 0, 0, 0, 5)]
    marks = [circle(0, 1, 0, 0, 5), circle(1, 1, 40, 40, 5), circle(2, 2, 0, 0, 5, image_id=1)]
    stats = reader_stats(marks, gts, {0: (1, 2), 1: (2,), 2: ()})
    assert stats[1].sensitivity == 1.0 and stats[1].fp_rate == 1.0
    assert stats[2].sensitivity == 0.0 and stats[2].n_images == 2
    assert math.isnan(reader_stats([], [], {0: (3,)})[3].sensitivity)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_sensitivity_nondecreasing_in_fp_budget(seed):
    rng = np.random.default_rng(seed)
    scores, cands, gts, images = random_scored_dataset(rng)
    t = froc(scores, cands, gts, images, (0.25, 0.5, 1.0, 2.0, 4.0))
    assert all(b >= a for a, b in zip(t.gt_sensitivity, t.gt_sensitivity[1:]))
    assert all(b <= a for a, b in zip(t.thresholds, t.thresholds[1:]))
