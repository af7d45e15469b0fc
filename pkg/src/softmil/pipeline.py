"""End-to-end run: merge -> label -> bags -> train/sweep -> evaluate.

Images are split three ways (train / validation / test) with a seeded
permutation. Model selection and operating thresholds use train and
validation only; the test split sees the retrained model with thresholds
carried over unchanged, so the reported test FP rates are induced ones.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from softmil import __version__
from softmil.data import Dataset, model_document, write_gts, write_model, write_targets
from softmil.errors import ConvergenceError, SoftMilError, ValidationError
from softmil.evaluation import apply_thresholds, build_bags, detection_set, froc_table
from softmil.geometry import GroundTruthMark, HitConfig, merge_dataset
from softmil.labels import LabelConfig, SoftTarget, assign_soft_targets
from softmil.objective import Bag, NormalizationMode
from softmil.optimizer import (
    EvalSplit,
    FitResult,
    LambdaSweepResult,
    OptimizerConfig,
    certify,
    default_lambda_grid,
    fit,
    lambda_sweep,
)

log = logging.getLogger(__name__)

DEFAULT_FP_POINTS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


@dataclass
class PipelineConfig:
    hit: HitConfig = field(default_factory=HitConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    normalization: str = "per-class"
    use_annotator_weights: bool = False
    lam: float | None = None
    grid: list[float] = field(default_factory=default_lambda_grid)
    selection_fp_points: tuple[float, ...] = (0.5, 1.0)
    report_fp_points: tuple[float, ...] = DEFAULT_FP_POINTS
    selection_penalty: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    assignment_scale: float = 1.0
    merge_seed: int = 0
    split_seed: int = 0
    fatal_nonconvergence: bool = False
    figures: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def split_images(image_ids: Sequence[int], seed: int) -> tuple[list[int], list[int], list[int]]:
    """Three equal-size image splits from a seeded permutation."""
    ids = np.array(sorted(image_ids))
    perm = np.random.default_rng(seed).permutation(len(ids))
    parts = np.array_split(ids[perm], 3)
    return tuple(sorted(int(i) for i in p) for p in parts)


@dataclass
class Prepared:
    """Everything downstream of merging and labeling for one image subset."""

    dataset: Dataset
    gts: list[GroundTruthMark]
    targets: list[SoftTarget]
    bags: list[Bag]
    split: EvalSplit


def prepare(dataset: Dataset, gts, targets, cfg: PipelineConfig) -> Prepared:
    keep = set(dataset.images)
    gts = [g for g in gts if g.image_id in keep]
    targets = [t for t in targets if t.image_id in keep]
    bags = build_bags(dataset.candidates, gts, targets, dataset.readers_per_image,
                      cfg.labels.n_readers_max, cfg.assignment_scale)
    det = detection_set(dataset.candidates, gts, list(dataset.images), cfg.assignment_scale)
    return Prepared(dataset, gts, targets, bags, EvalSplit(bags, det))


def _check_fit(result: FitResult, cfg: PipelineConfig, what: str) -> None:
    if not result.converged:
        msg = f"{what}: optimizer did not converge in {result.iterations} iterations"
        if cfg.fatal_nonconvergence:
            raise ConvergenceError(msg)
        log.warning(msg)


def convergence_record(result: FitResult, certificate) -> dict:
    return {
        "converged": result.converged,
        "iterations": result.iterations,
        "objective": result.objective_value,
        "nnz": result.nnz,
        "stationarity_violation": certificate.violation,
        "stationarity_tolerance": certificate.tolerance,
    }


def run_pipeline(dataset: Dataset, cfg: PipelineConfig, out_dir, seed_note: str | None = None) -> dict:
    """Run every stage and write the artifacts into ``out_dir``.

    Returns the run manifest (also written as ``manifest.json``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    stage = "merge"
    try:
        gts = merge_dataset(dataset.marks, cfg.hit, cfg.merge_seed)
        write_gts(out / "gts.jsonl", gts)

        stage = "label"
        targets = assign_soft_targets(gts, dataset.readers_per_image, cfg.labels)
        write_targets(out / "targets.jsonl", targets)

        stage = "bags"
        train_ids, val_ids, test_ids = split_images(list(dataset.images), cfg.split_seed)
        train = prepare(dataset.subset(train_ids), gts, targets, cfg)
        val = prepare(dataset.subset(val_ids), gts, targets, cfg)
        test = prepare(dataset.subset(test_ids), gts, targets, cfg)
        trainval = prepare(dataset.subset(train_ids + val_ids), gts, targets, cfg)

        sweep: LambdaSweepResult | None = None
        if cfg.lam is None:
            stage = "sweep"
            sweep = lambda_sweep(
                train.split, val.split, cfg.grid, cfg.selection_fp_points, cfg.optimizer,
                cfg.normalization, cfg.use_annotator_weights, cfg.selection_penalty,
            )
            (out / "sweep.csv").write_text(sweep.to_csv(), encoding="utf-8")
            lam = sweep.selected_lambda
        else:
            lam = float(cfg.lam)

        stage = "train"
        opt = OptimizerConfig(cfg.optimizer.max_iterations, cfg.optimizer.tolerance, cfg.optimizer.memory, lam)
        result = fit(trainval.bags, opt, cfg.normalization, cfg.use_annotator_weights)
        _check_fit(result, cfg, "final model")
        cert = certify(trainval.bags, result.weights, NormalizationMode(cfg.normalization, lam),
                       cfg.use_annotator_weights)
        doc = model_document(result.weights, dataset.feature_names, lam, cfg.normalization,
                             cfg.use_annotator_weights, convergence_record(result, cert))
        write_model(out / "model.json", doc)

        stage = "eval"
        w = result.weights.w
        tv_det, test_det = trainval.split.detection, test.split.detection
        roc_tv = froc_table(tv_det, tv_det.scores(w), cfg.report_fp_points)
        roc_test = apply_thresholds(test_det, test_det.scores(w), roc_tv.thresholds)
        (out / "roc_trainval.csv").write_text(roc_tv.to_csv(), encoding="utf-8")
        (out / "roc_test.csv").write_text(roc_test.to_csv(), encoding="utf-8")

        if cfg.figures:
            from softmil import plotting

            plotting.save_froc_figure(out / "froc.png", {"train+validation": roc_tv, "test": roc_test})
            if sweep is not None:
                plotting.save_sweep_figure(out / "sweep.png", sweep)
    except SoftMilError as exc:
        wrapped = type(exc)(f"{stage}: {exc}")
        wrapped.__dict__.update(exc.__dict__)
        raise wrapped from exc
    except (ValueError, OSError) as exc:
        raise ValidationError(f"{stage}: {exc}") from exc

    manifest = {
        "softmil_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "split_seed": cfg.split_seed,
        "merge_seed": cfg.merge_seed,
        "splits": {"train": train_ids, "validation": val_ids, "test": test_ids},
        "n_gts": len(gts),
        "n_pseudo_golden_gts": sum(g.is_pseudo_golden for g in gts),
        "n_training_bags": len(trainval.bags),
        "selected_lambda": lam,
        "nnz": result.nnz,
        "sweep_certificates_ok": None if sweep is None else all(
            certify(train.bags, f.weights, NormalizationMode(cfg.normalization, g),
                    cfg.use_annotator_weights).ok
            for f, g in zip(sweep.fits, sweep.grid)
        ),
        "final_certificate_ok": cert.ok,
    }
    if seed_note:
        manifest["note"] = seed_note
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
