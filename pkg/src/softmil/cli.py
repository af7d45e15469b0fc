"""Command line entry point (``softmil <command> ...``).

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure, 3 non-convergence when ``--fatal-nonconvergence`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from softmil import __version__
from softmil.data import (
    export,
    ingest,
    model_document,
    read_bags,
    read_gts,
    read_model,
    read_targets,
    write_bags,
    write_gts,
    write_model,
    write_targets,
)
from softmil.errors import ConfigurationError, ConvergenceError, NumericalError, ValidationError
from softmil.evaluation import RocTable, apply_thresholds, build_bags, detection_set, froc_table
from softmil.geometry import HitConfig, merge_dataset
from softmil.labels import LabelConfig, assign_soft_targets
from softmil.objective import MODES, NormalizationMode
from softmil.optimizer import OptimizerConfig, certify, default_lambda_grid, fit, lambda_sweep
from softmil.pipeline import DEFAULT_FP_POINTS, PipelineConfig, convergence_record, prepare, run_pipeline, split_images


log = logging.getLogger("softmil")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None


def _grid(args) -> list[float]:
    if args.grid:
        return args.grid
    return default_lambda_grid(args.grid_points, args.grid_low, args.grid_high)


def _hit(args) -> HitConfig:
    return HitConfig(t0=args.t0)


def _labels(args) -> LabelConfig:
    return LabelConfig(args.n_readers_min, args.n_readers_max, args.depression)


def _optimizer(args, lam: float = 0.0) -> OptimizerConfig:
    return OptimizerConfig(args.max_iterations, args.tolerance, args.memory, lam)


def _add_data(p):
    p.add_argument("--data", required=True, type=Path,
                   help="directory with images.jsonl, marks.jsonl and candidates.csv")


def _add_geometry(p):
    p.add_argument("--t0", type=float, default=0.63, help="hit threshold ceiling (default 0.63)")
    p.add_argument("--scale", type=float, default=1.0,
                   help="ellipse scale for candidate-to-GT assignment (default 1.0)")


def _add_labels(p):
    p.add_argument("--n-readers-min", type=int, default=4)
    p.add_argument("--n-readers-max", type=int, default=25)
    p.add_argument("--depression", type=float, default=1 / 8,
                   help="single-annotator depression factor (default 1/8)")


def _add_training(p):
    p.add_argument("--mode", choices=MODES, default="per-class", help="normalization mode")
    p.add_argument("--annotator-weights", action="store_true", help="weight bags by n_readers/n_max")
    p.add_argument("--max-iterations", type=int, default=500)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--memory", type=int, default=10)
    p.add_argument("--fatal-nonconvergence", action="store_true",
                   help="exit with code 3 when the optimizer does not converge")


def _add_sweep(p):
    p.add_argument("--grid", type=_floats, default=None, help="explicit lambda grid, comma separated")
    p.add_argument("--grid-points", type=int, default=20)
    p.add_argument("--grid-low", type=float, default=1e-3)
    p.add_argument("--grid-high", type=float, default=1.0)
    p.add_argument("--selection-fp", type=_floats, default=[0.5, 1.0],
                   help="FP points used by the selection score (default 0.5,1)")
    p.add_argument("--penalty", type=float, default=1.0, help="weight of the train/validation gap")
    p.add_argument("--split-seed", type=int, default=0)


def _check_converged(result, args, what):
    if not result.converged:
        msg = f"{what}: no convergence after {result.iterations} iterations"
        if args.fatal_nonconvergence:
            raise ConvergenceError(msg)
        log.warning(msg)


# -- commands ---------------------------------------------------------------


def cmd_synth(args):
    from softmil.synth import SynthConfig, synth

    cfg = SynthConfig(n_images=args.n_images, readers_min=args.readers[0], readers_max=args.readers[1],
                      reader_pool=args.reader_pool, n_features=args.n_features,
                      support_size=args.support_size, noise=args.noise, seed=args.seed)
    result = synth(cfg)
    export(result.dataset, args.out)
    truth = {
        "weights": {n: float(v) for n, v in zip(result.dataset.feature_names, result.w_true) if v != 0.0},
        "intercept": result.b_true,
        "seed": args.seed,
    }
    (args.out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(result.dataset.images)} images, {len(result.dataset.marks)} marks, "
          f"{len(result.dataset.candidates)} candidates to {args.out}")


def cmd_merge(args):
    ds = ingest(args.data)
    gts = merge_dataset(ds.marks, _hit(args), args.seed)
    write_gts(args.out, gts)
    print(f"{len(gts)} GTs ({sum(g.is_pseudo_golden for g in gts)} pseudo golden) -> {args.out}")


def cmd_label(args):
    ds = ingest(args.data)
    targets = assign_soft_targets(read_gts(args.gts), ds.readers_per_image, _labels(args))
    write_targets(args.out, targets)
    print(f"{len(targets)} targets -> {args.out}")


def cmd_bags(args):
    ds = ingest(args.data)
    bags = build_bags(ds.candidates, read_gts(args.gts), read_targets(args.targets),
                      ds.readers_per_image, args.n_readers_max, args.scale)
    write_bags(args.out, bags)
    n_soft = sum(b.kind == "soft-positive" for b in bags)
    print(f"{n_soft} soft bags, {len(bags) - n_soft} hard negatives -> {args.out}")


def cmd_train(args):
    ds = ingest(args.data)
    bags = read_bags(args.bags, ds.candidates)
    result = fit(bags, _optimizer(args, args.lam), args.mode, args.annotator_weights)
    _check_converged(result, args, "train")
    cert = certify(bags, result.weights, NormalizationMode(args.mode, args.lam), args.annotator_weights)
    doc = model_document(result.weights, ds.feature_names, args.lam, args.mode, args.annotator_weights,
                         convergence_record(result, cert))
    write_model(args.out, doc)
    print(f"lambda={args.lam:g} nnz={result.nnz} objective={result.objective_value:.6g} "
          f"iterations={result.iterations} -> {args.out}")


def cmd_sweep(args):
    ds = ingest(args.data)
    gts, targets = read_gts(args.gts), read_targets(args.targets)
    cfg = PipelineConfig(normalization=args.mode, use_annotator_weights=args.annotator_weights,
                         assignment_scale=args.scale, labels=LabelConfig(n_readers_max=args.n_readers_max))
    train_ids, val_ids, _ = split_images(list(ds.images), args.split_seed)
    train = prepare(ds.subset(train_ids), gts, targets, cfg)
    val = prepare(ds.subset(val_ids), gts, targets, cfg)
    sweep = lambda_sweep(train.split, val.split, _grid(args), args.selection_fp, _optimizer(args),
                         args.mode, args.annotator_weights, args.penalty)
    for f, lam in zip(sweep.fits, sweep.grid):
        _check_converged(f, args, f"sweep lambda={lam:g}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "sweep.csv").write_text(sweep.to_csv(), encoding="utf-8")
    from softmil.plotting import save_sweep_figure

    save_sweep_figure(args.out / "sweep.png", sweep)
    print(f"selected lambda={sweep.selected_lambda:g} (nnz={sweep.fits[sweep.selected_index].nnz}) -> {args.out}")


def cmd_eval(args):
    ds = ingest(args.data)
    if args.images:
        ds = ds.subset(int(v) for v in args.images)
    gts = [g for g in read_gts(args.gts) if g.image_id in ds.images]
    weights, _ = read_model(args.model, ds.feature_names)
    det = detection_set(ds.candidates, gts, list(ds.images), args.scale)
    scores = det.scores(weights.w)
    if args.thresholds_from:
        ref = RocTable.from_csv(Path(args.thresholds_from).read_text(encoding="utf-8"))
        table = apply_thresholds(det, scores, ref.thresholds)
    else:
        table = froc_table(det, scores, args.fp_points)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(table.to_csv(), encoding="utf-8")
    if not args.no_figure:
        from softmil.plotting import save_froc_figure

        save_froc_figure(args.out.with_suffix(".png"), {args.model.stem: table})
    sys.stdout.write(table.to_csv())


def cmd_check_gradients(args):
    from softmil.gradcheck import derivative_sweep

    checks = derivative_sweep(args.instances, args.seed)
    g_worst = max(c.gradient_error for c in checks)
    h_worst = max(c.hessian_error for c in checks)
    print("d,max_instances,mode,annotator_weights,gradient_error,hessian_error")
    if args.verbose:
        for c in checks:
            print(f"{c.d},{c.max_instances},{c.mode},{int(c.use_annotator_weights)},"
                  f"{c.gradient_error:.3e},{c.hessian_error:.3e}")
    ok = g_worst < args.gradient_tol and h_worst < args.hessian_tol
    print(f"worst gradient error {g_worst:.3e} (tol {args.gradient_tol:g}), "
          f"worst Hessian error {h_worst:.3e} (tol {args.hessian_tol:g}): {'ok' if ok else 'FAILED'}")
    if not ok:
        raise NumericalError("analytic derivatives disagree with finite differences")


def cmd_run(args):
    ds = ingest(args.data)
    cfg = PipelineConfig(
        hit=_hit(args), labels=_labels(args), normalization=args.mode,
        use_annotator_weights=args.annotator_weights, lam=args.lam, grid=_grid(args),
        selection_fp_points=tuple(args.selection_fp), report_fp_points=tuple(args.fp_points),
        selection_penalty=args.penalty, optimizer=_optimizer(args), assignment_scale=args.scale,
        merge_seed=args.seed, split_seed=args.split_seed,
        fatal_nonconvergence=args.fatal_nonconvergence, figures=not args.no_figures,
    )
    manifest = run_pipeline(ds, cfg, args.out)
    print(f"selected lambda={manifest['selected_lambda']:g} nnz={manifest['nnz']} -> {args.out}")


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softmil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"softmil {__version__}")
    parser.add_argument("-v", "--verbose-log", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with a planted sparse model")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-images", type=int, default=640)
    p.add_argument("--readers", type=int, nargs=2, default=(4, 6), metavar=("MIN", "MAX"))
    p.add_argument("--reader-pool", type=int, default=8)
    p.add_argument("--n-features", type=int, default=50)
    p.add_argument("--support-size", type=int, default=5)
    p.add_argument("--noise", type=float, default=1.0, help="0 = unanimous readers, 1 = fully stochastic")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("merge", help="fuse reader marks into scored GT regions")
    _add_data(p)
    _add_geometry(p)
    p.add_argument("--seed", type=int, default=0, help="tie-break seed for two-mark GTs")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("label", help="turn GT scores into soft targets")
    _add_data(p)
    _add_labels(p)
    p.add_argument("--gts", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("bags", help="group candidates into soft and hard-negative bags")
    _add_data(p)
    _add_geometry(p)
    p.add_argument("--n-readers-max", type=int, default=25)
    p.add_argument("--gts", required=True, type=Path)
    p.add_argument("--targets", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_bags)

    p = sub.add_parser("train", help="fit the L1-regularized model at one lambda")
    _add_data(p)
    _add_training(p)
    p.add_argument("--bags", required=True, type=Path)
    p.add_argument("--lam", type=float, default=0.06)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="fit along a lambda grid on train, score on validation")
    _add_data(p)
    _add_geometry(p)
    _add_training(p)
    _add_sweep(p)
    p.add_argument("--n-readers-max", type=int, default=25)
    p.add_argument("--gts", required=True, type=Path)
    p.add_argument("--targets", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="FROC operating points of a model")
    _add_data(p)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--gts", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--images", type=_floats, default=None, help="restrict to these image ids")
    p.add_argument("--fp-points", type=_floats, default=list(DEFAULT_FP_POINTS))
    p.add_argument("--thresholds-from", type=Path, default=None,
                   help="reuse the thresholds of an earlier table (induced FP rates)")
    p.add_argument("--no-figure", action="store_true")
    p.add_argument("--out", required=True, type=Path, help="CSV path; the figure goes next to it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-gradients", help="compare analytic derivatives with finite differences")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gradient-tol", type=float, default=1e-6)
    p.add_argument("--hessian-tol", type=float, default=1e-5)
    p.add_argument("--verbose", action="store_true", help="print every instance")
    p.set_defaults(func=cmd_check_gradients)

    p = sub.add_parser("run", help="merge, label, split, sweep or train, and evaluate")
    _add_data(p)
    _add_geometry(p)
    _add_labels(p)
    _add_training(p)
    _add_sweep(p)
    p.add_argument("--lam", type=float, default=None, help="fixed lambda (skips the sweep)")
    p.add_argument("--seed", type=int, default=0, help="merge tie-break seed")
    p.add_argument("--fp-points", type=_floats, default=list(DEFAULT_FP_POINTS))
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose_log else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, ConfigurationError, FileNotFoundError, ValueError) as exc:
        _report(exc)
        return 1
    except NumericalError as exc:
        _report(exc)
        return 2
    except ConvergenceError as exc:
        _report(exc)
        return 3
    return 0


def _report(exc: BaseException) -> None:
    print(f"error: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
