import json

import pytest

from softmil.data import read_model
from softmil.errors import ValidationError
from softmil.evaluation import RocTable
from softmil.pipeline import PipelineConfig, run_pipeline, split_images
from softmil.synth import SynthConfig, synth

GRID = [0.01, 0.1, 0.5, 1.0]


@pytest.fixture(scope="module")
def dataset():
    return synth(SynthConfig(n_images=150, seed=4)).dataset


def test_split_is_three_equal_parts():
    a, b, c = split_images(range(30), seed=3)
    assert len(a) == len(b) == len(c) == 10
    assert sorted(a + b + c) == list(range(30))
    assert split_images(range(30), seed=3) == (a, b, c)
    assert split_images(range(30), seed=4) != (a, b, c)


def test_pipeline_outputs_and_byte_identical_rerun(dataset, tmp_path):
    cfg = PipelineConfig(grid=GRID, split_seed=11)
    m1 = run_pipeline(dataset, cfg, tmp_path / "one")
    run_pipeline(dataset, cfg, tmp_path / "two")
    names = sorted(p.name for p in (tmp_path / "one").iterdir())
    assert names == sorted(["gts.jsonl", "targets.jsonl", "model.json", "roc_trainval.csv", "roc_test.csv",
                            "sweep.csv", "froc.png", "sweep.png", "manifest.json"])
    for name in names:
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes(), name
    assert m1["split_seed"] == 11
    assert m1["selected_lambda"] in GRID
    assert m1["sweep_certificates_ok"] and m1["final_certificate_ok"]
    manifest = json.loads((tmp_path / "one" / "manifest.json").read_text())
    assert len(manifest["config_sha256"]) == 64


def test_test_table_reports_induced_fp(dataset, tmp_path):
    run_pipeline(dataset, PipelineConfig(lam=0.5, figures=False), tmp_path)
    tv = RocTable.from_csv((tmp_path / "roc_trainval.csv").read_text())
    te = RocTable.from_csv((tmp_path / "roc_test.csv").read_text())
    assert tv.fp_points == [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
    assert te.thresholds == tv.thresholds
    assert not (tmp_path / "sweep.csv").exists()
    w, meta = read_model(tmp_path / "model.json", dataset.feature_names)
    assert meta["lambda"] == 0.5 and meta["convergence"]["converged"]


def test_stage_errors_name_the_stage(dataset, tmp_path):
    with pytest.raises(ValidationError, match="^sweep: "):
        run_pipeline(dataset, PipelineConfig(grid=[0.5, 0.1]), tmp_path)
