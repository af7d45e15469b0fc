"""L1-regularized minimization by orthant-wise limited-memory quasi-Newton.

The solver works on ``F(w) = N(w) + (lam/d) * sum_{penalized} |w_i|``
where ``N`` is the (normalized) divergence. Each step stays inside the
orthant picked by the pseudo-gradient, so coordinates that cross zero are
clamped to exactly ``0.0`` and sparsity is read off directly.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from softmil.errors import NumericalError, ValidationError
from softmil.evaluation import DetectionSet, RocTable, froc_table
from softmil.objective import (
    BagsLike,
    ModelWeights,
    NormalizationMode,
    evaluate,
    pack,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 500
    tolerance: float = 1e-9
    memory: int = 10
    lam: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")
        if self.memory < 1:
            raise ValidationError("memory must be >= 1")
        if not self.lam >= 0:
            raise ValidationError(f"lambda must be nonnegative, got {self.lam}")


@dataclass
class FitResult:
    weights: ModelWeights
    objective_value: float
    iterations: int
    converged: bool
    nnz: int
    history: list[float] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class Certificate:
    """First-order optimality check for the L1 problem."""

    violation: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.violation <= self.tolerance


def pseudo_gradient(w: np.ndarray, grad: np.ndarray, mask: np.ndarray, c: float) -> np.ndarray:
    """Minimum-norm subgradient of the penalized objective."""
    pg = grad.copy()
    pen = mask & (w != 0)
    pg[pen] += c * np.sign(w[pen])
    at_zero = mask & (w == 0)
    g0 = grad[at_zero]
    pg[at_zero] = np.where(g0 + c < 0, g0 + c, np.where(g0 - c > 0, g0 - c, 0.0))
    return pg


def stationarity_violation(w: np.ndarray, grad: np.ndarray, mask: np.ndarray, c: float) -> float:
    """Largest breach of the subgradient optimality conditions.

    Zero penalized coordinates need ``|g_i| <= c``; nonzero ones need
    ``g_i + c*sign(w_i) = 0``; unpenalized ones need ``g_i = 0``.
    """
    return float(np.max(np.abs(pseudo_gradient(w, grad, mask, c)), initial=0.0))


def certify(
    bags: BagsLike,
    weights: ModelWeights,
    mode: NormalizationMode,
    use_annotator_weights: bool = False,
) -> Certificate:
    """Stationarity certificate with tolerance ``1e-5 * max(1, |F|)``."""
    report = evaluate(bags, weights, mode, use_annotator_weights)
    c = mode.lam / weights.dim
    violation = stationarity_violation(weights.w, report.gradient, weights.penalized_mask, c)
    return Certificate(violation, 1e-5 * max(1.0, abs(report.value)))


def _two_loop(v: np.ndarray, memory: deque) -> np.ndarray:
    q = v.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = memory[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def fit(
    bags: BagsLike,
    cfg: OptimizerConfig = OptimizerConfig(),
    mode: NormalizationMode | str = "per-class",
    use_annotator_weights: bool = False,
    w0: ModelWeights | None = None,
) -> FitResult:
    """Minimize the L1-penalized soft-MIL objective.

    The penalty strength comes from ``cfg.lam``; only ``mode.kind`` is read
    from ``mode``. Without ``w0`` the search starts at zero with the last
    coordinate treated as an unpenalized intercept.
    """
    batch = pack(bags)
    kind = mode.kind if isinstance(mode, NormalizationMode) else mode
    norm = NormalizationMode(kind, cfg.lam)
    if w0 is None:
        w0 = ModelWeights.zeros(batch.dim)
    if w0.dim != batch.dim:
        raise ValidationError(f"w0 has dimension {w0.dim}, bags have {batch.dim}")
    mask = w0.penalized_mask
    c = cfg.lam / batch.dim

    def evaluate_at(w, iteration):
        if not np.all(np.isfinite(w)):
            raise NumericalError(f"non-finite weights at iteration {iteration}", iteration)
        rep = evaluate(batch, ModelWeights(w, mask), norm, use_annotator_weights)
        if not np.isfinite(rep.value) or not np.all(np.isfinite(rep.gradient)):
            raise NumericalError(f"non-finite objective at iteration {iteration}", iteration)
        return rep.value, rep.gradient

    x = w0.w.copy()
    f, g = evaluate_at(x, 0)
    history = [f]
    memory: deque = deque(maxlen=cfg.memory)
    converged = False
    small_steps = 0
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        pg = pseudo_gradient(x, g, mask, c)
        pg_norm = np.max(np.abs(pg), initial=0.0)
        scale = max(1.0, abs(f))
        if pg_norm <= 1e-9 * scale or (small_steps >= 3 and pg_norm <= 1e-7 * scale):
            converged = True
            it -= 1
            break
        if small_steps >= 3:
            # stalled far from stationarity: drop curvature pairs and restart
            memory.clear()
            small_steps = 0
        if memory:
            direction = -_two_loop(pg, memory)
            direction[direction * pg >= 0] = 0.0
            if direction @ pg >= 0:
                memory.clear()
                direction = -pg
        else:
            direction = -pg
        orthant = np.where(x != 0, np.sign(x), np.sign(-pg))
        step = 1.0 if memory else 1.0 / max(1.0, float(np.linalg.norm(pg)))

        accepted = False
        for _ in range(60):
            xn = x + step * direction
            crossed = mask & (np.sign(xn) != orthant)
            xn[crossed] = 0.0
            fn, gn = evaluate_at(xn, it)
            if fn <= f + 1e-4 * (pg @ (xn - x)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if memory:
                memory.clear()
                continue
            # steepest descent cannot decrease F any further in floating point
            converged = pg_norm <= 1e-5 * scale
            break

        s, yv = xn - x, gn - g
        sy = s @ yv
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            memory.append((s, yv, 1.0 / sy))
        rel = (f - fn) / max(abs(f), abs(fn), 1.0)
        x, f, g = xn, fn, gn
        history.append(f)
        small_steps = small_steps + 1 if rel < cfg.tolerance else 0

    weights = w0.with_values(x)
    if not converged:
        log.warning("no convergence after %d iterations (lambda=%g)", cfg.max_iterations, cfg.lam)
    return FitResult(weights, f, it, converged, weights.nnz, history)


def null_model(
    bags: BagsLike,
    mode: NormalizationMode | str = "per-class",
    use_annotator_weights: bool = False,
    template: ModelWeights | None = None,
) -> ModelWeights:
    """Best model with every penalized weight held at zero (Newton steps)."""
    batch = pack(bags)
    template = template or ModelWeights.zeros(batch.dim)
    kind = mode.kind if isinstance(mode, NormalizationMode) else mode
    norm = NormalizationMode(kind, 0.0)
    free = ~template.penalized_mask
    w = np.zeros(batch.dim)
    if not free.any():
        return template.with_values(w)
    for _ in range(100):
        rep = evaluate(batch, w, norm, use_annotator_weights, with_hessian=True)
        g = rep.gradient[free]
        if np.max(np.abs(g)) < 1e-13:
            break
        step = np.linalg.solve(rep.hessian[np.ix_(free, free)], g)
        t = 1.0
        while t > 1e-10:
            trial = w.copy()
            trial[free] -= t * step
            if evaluate(batch, trial, norm, use_annotator_weights).value <= rep.value:
                break
            t *= 0.5
        w = trial
    return template.with_values(w)


def lambda_max(
    bags: BagsLike,
    mode: NormalizationMode | str = "per-class",
    use_annotator_weights: bool = False,
    template: ModelWeights | None = None,
) -> float:
    """Smallest lambda at which every penalized weight is zero at the optimum.

    The gradient is taken at :func:`null_model`, which coincides with the
    origin when no coordinate is unpenalized.
    """
    batch = pack(bags)
    base = null_model(batch, mode, use_annotator_weights, template)
    kind = mode.kind if isinstance(mode, NormalizationMode) else mode
    g = evaluate(batch, base, NormalizationMode(kind, 0.0), use_annotator_weights).gradient
    return batch.dim * float(np.max(np.abs(g[base.penalized_mask]), initial=0.0))


@dataclass
class EvalSplit:
    """Training bags of one data split together with its detection view."""

    bags: BagsLike
    detection: DetectionSet


@dataclass
class LambdaSweepResult:
    grid: list[float]
    fits: list[FitResult]
    train_tables: list[RocTable]
    val_tables: list[RocTable]
    scores: list[float]
    selected_lambda: float

    @property
    def selected_index(self) -> int:
        return self.grid.index(self.selected_lambda)

    def to_csv(self) -> str:
        fps = self.train_tables[0].fp_points if self.train_tables else []
        header = ["lambda", "nnz", "converged", "objective", "score"]
        for fp in fps:
            header += [f"{part}_{kind}_fp{fp:g}" for part in ("train", "val") for kind in ("gt", "image")]
        lines = [",".join(header)]
        for lam, fr, tr, va, sc in zip(self.grid, self.fits, self.train_tables, self.val_tables, self.scores):
            row = [repr(lam), str(fr.nnz), str(int(fr.converged)), repr(fr.objective_value), repr(sc)]
            for j in range(len(fps)):
                row += [repr(tr.gt_sensitivity[j]), repr(tr.image_sensitivity[j]),
                        repr(va.gt_sensitivity[j]), repr(va.image_sensitivity[j])]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def default_selection_score(train: RocTable, val: RocTable, penalty: float = 1.0) -> float:
    """Worst validation sensitivity minus the train/validation gap.

    Taken over both GT and image sensitivity at every FP operating point.
    """
    terms = []
    for tr_list, va_list in ((train.gt_sensitivity, val.gt_sensitivity),
                             (train.image_sensitivity, val.image_sensitivity)):
        for tr, va in zip(tr_list, va_list):
            terms.append(va - penalty * abs(tr - va))
    return min(terms)


def default_lambda_grid(n: int = 20, low: float = 1e-3, high: float = 1.0) -> list[float]:
    return [float(v) for v in np.logspace(np.log10(low), np.log10(high), n)]


def lambda_sweep(
    train: EvalSplit,
    val: EvalSplit,
    grid: Sequence[float],
    fp_points: Sequence[float] = (0.5, 1.0),
    cfg: OptimizerConfig = OptimizerConfig(),
    mode: NormalizationMode | str = "per-class",
    use_annotator_weights: bool = False,
    penalty: float = 1.0,
    score: Callable[[RocTable, RocTable], float] | None = None,
    warm_start: bool = True,
) -> LambdaSweepResult:
    """Fit along an increasing lambda grid and pick the best-generalizing one.

    Ties in the selection score go to the larger lambda (the sparser model).
    """
    grid = [float(v) for v in grid]
    if not grid:
        raise ValidationError("empty lambda grid")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("lambda grid must be strictly increasing")
    score = score or (lambda tr, va: default_selection_score(tr, va, penalty))
    train_batch = pack(train.bags)

    fits, tr_tables, va_tables, scores = [], [], [], []
    w0 = None
    for lam in grid:
        result = fit(train_batch, replace(cfg, lam=lam), mode, use_annotator_weights, w0)
        w = result.weights.w
        tr = froc_table(train.detection, train.detection.scores(w), fp_points)
        va = froc_table(val.detection, val.detection.scores(w), fp_points)
        fits.append(result)
        tr_tables.append(tr)
        va_tables.append(va)
        scores.append(float(score(tr, va)))
        if warm_start:
            w0 = result.weights
    best = max(range(len(grid)), key=lambda i: (scores[i], i))
    return LambdaSweepResult(grid, fits, tr_tables, va_tables, scores, grid[best])
