import numpy as np
import pytest

from softmil.errors import ValidationError
from softmil.evaluation import build_bags
from softmil.geometry import merge_dataset
from softmil.labels import assign_soft_targets
from softmil.optimizer import OptimizerConfig, fit
from softmil.synth import SynthConfig, synth


def test_seed_fixes_everything():
    a, b = synth(SynthConfig(n_images=30, seed=5)), synth(SynthConfig(n_images=30, seed=5))
    assert a.dataset.marks == b.dataset.marks and a.dataset.images == b.dataset.images
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a.dataset.candidates, b.dataset.candidates))
    np.testing.assert_array_equal(a.w_true, b.w_true)
    c = synth(SynthConfig(n_images=30, seed=6))
    assert c.dataset.marks != a.dataset.marks


def test_rosters_and_support():
    cfg = SynthConfig(n_images=50, readers_min=4, readers_max=5, seed=2)
    res = synth(cfg)
    assert all(4 <= len(r) <= 5 for r in res.dataset.images.values())
    assert np.count_nonzero(res.w_true) == cfg.support_size
    assert res.dataset.n_features == cfg.n_features
    readers = {i: set(r) for i, r in res.dataset.images.items()}
    assert all(m.reader_id in readers[m.image_id] for m in res.dataset.marks)


def test_noise_free_readers_give_unit_targets():
    res = synth(SynthConfig(n_images=80, noise=0.0, seed=1))
    ds = res.dataset
    gts = merge_dataset(ds.marks)
    targets = assign_soft_targets(gts, ds.readers_per_image)
    assert targets and all(t.p_target == 1.0 for t in targets)
    # every GT is one lesion marked by the whole panel
    assert len(gts) == sum(p >= 0.5 for p in res.lesion_probability)


def test_recovers_planted_direction():
    res = synth(SynthConfig(n_images=600, seed=0))
    ds = res.dataset
    gts = merge_dataset(ds.marks)
    bags = build_bags(ds.candidates, gts, assign_soft_targets(gts, ds.readers_per_image), ds.readers_per_image)
    w = fit(bags, OptimizerConfig(lam=0.0)).weights.w[:-1]
    cos = w @ res.w_true / np.linalg.norm(w) / np.linalg.norm(res.w_true)
    assert cos > 0.95


@pytest.mark.parametrize("kw", [dict(support_size=60), dict(readers_min=7, readers_max=5),
                                dict(noise=1.5), dict(n_images=0), dict(feature_scale=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        SynthConfig(**kw)
