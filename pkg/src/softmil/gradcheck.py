"""Finite-difference verification of the analytic gradient and Hessian."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from softmil.objective import (
    HARD_NEGATIVE,
    MODES,
    SOFT,
    Bag,
    NormalizationMode,
    evaluate,
    gradient,
    objective,
    pack,
)


def central_difference_gradient(f: Callable[[np.ndarray], float], w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    for i in range(w.size):
        step = np.zeros_like(w)
        step[i] = h
        out[i] = (f(w + step) - f(w - step)) / (2.0 * h)
    return out


def central_difference_jacobian(g: Callable[[np.ndarray], np.ndarray], w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    cols = []
    for i in range(w.size):
        step = np.zeros_like(w)
        step[i] = h
        cols.append((g(w + step) - g(w - step)) / (2.0 * h))
    return np.column_stack(cols)


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """Max-norm error scaled by the larger max-norm of the two arrays."""
    approx, exact = np.asarray(approx), np.asarray(exact)
    scale = max(np.max(np.abs(approx)), np.max(np.abs(exact)), 1e-300)
    return float(np.max(np.abs(approx - exact)) / scale)


def random_bags(
    rng: np.random.Generator,
    d: int,
    max_instances: int,
    n_soft: int = 4,
    n_negative: int = 4,
    hard_soft_targets: bool = False,
) -> list[Bag]:
    """Random bags with O(1) features; soft bags hold 1..max_instances rows."""
    bags = []
    for i in range(n_soft):
        k = int(rng.integers(1, max_instances + 1))
        pt = float(rng.integers(0, 2)) if hard_soft_targets else float(rng.uniform(0.05, 0.95))
        bags.append(Bag(i, i, rng.normal(size=(k, d)), pt, float(rng.uniform(0.1, 1.0)), SOFT))
    for i in range(n_soft, n_soft + n_negative):
        bags.append(Bag(i, i, rng.normal(size=(1, d)), 0.0, float(rng.uniform(0.1, 1.0)), HARD_NEGATIVE))
    return bags


@dataclass
class DerivativeCheck:
    d: int
    max_instances: int
    mode: str
    use_annotator_weights: bool
    gradient_error: float
    hessian_error: float


def check_derivatives(
    bags,
    w: np.ndarray,
    mode: NormalizationMode = NormalizationMode(),
    use_annotator_weights: bool = False,
    h: float = 1e-5,
) -> tuple[float, float]:
    """Relative errors of the analytic gradient and Hessian (lambda = 0)."""
    batch = pack(bags)
    smooth = NormalizationMode(mode.kind, 0.0)
    report = evaluate(batch, w, smooth, use_annotator_weights, with_hessian=True)
    fd_grad = central_difference_gradient(lambda v: objective(batch, v, smooth, use_annotator_weights), w, h)
    fd_hess = central_difference_jacobian(lambda v: gradient(batch, v, smooth, use_annotator_weights), w, h)
    return relative_error(report.gradient, fd_grad), relative_error(report.hessian, fd_hess)


def derivative_sweep(n_instances: int = 100, seed: int = 0) -> list[DerivativeCheck]:
    """Check derivatives over a grid of dimensions, bag sizes and modes."""
    rng = np.random.default_rng(seed)
    grid = list(itertools.product((2, 10, 50), (1, 3, 10), MODES, (False, True)))
    results = []
    for i in range(n_instances):
        d, k, kind, use_aw = grid[i % len(grid)]
        bags = random_bags(rng, d, k, hard_soft_targets=bool(i % 5 == 4))
        # keep |w @ x| around 1 whatever the dimension
        w = rng.normal(size=d) / np.sqrt(d)
        g_err, h_err = check_derivatives(bags, w, NormalizationMode(kind), use_aw)
        results.append(DerivativeCheck(d, k, kind, use_aw, g_err, h_err))
    return results
