"""Soft multiple-instance logistic objective with analytic derivatives.

A bag is positive when at least one of its instances is, so its positive
probability is ``1 - prod_k (1 - sigmoid(w @ x_k))``. Training minimizes the
cross-entropy between the bag's soft target and that probability, plus an
L1 penalty scaled by ``1/d``. Hard-negative bags (one instance, target 0)
take a shortcut through plain logistic-regression formulas.

All per-bag quantities are computed in log space: ``log(1 - p)`` is the sum
of ``log sigmoid(-z)`` over the bag, which never underflows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import sparse
from scipy.special import expit

from softmil.errors import ConfigurationError, ValidationError

EPS = 1e-12

SOFT = "soft-positive"
HARD_NEGATIVE = "hard-negative"

MODES = ("raw", "per-sample", "per-class")


@dataclass
class Bag:
    bag_id: int
    image_id: int
    instances: np.ndarray
    p_target: float
    annotator_weight: float = 1.0
    kind: str = SOFT
    candidate_ids: tuple[int, ...] = ()

    def __post_init__(self):
        self.instances = np.atleast_2d(np.asarray(self.instances, dtype=float))
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValidationError(f"bag {self.bag_id}: needs at least one instance")
        if not np.all(np.isfinite(self.instances)):
            raise ValidationError(f"bag {self.bag_id}: non-finite features")
        if not 0.0 <= self.p_target <= 1.0:
            raise ValidationError(f"bag {self.bag_id}: p_target {self.p_target} outside [0, 1]")
        if not 0.0 < self.annotator_weight <= 1.0:
            raise ValidationError(f"bag {self.bag_id}: annotator_weight must be in (0, 1]")
        if self.kind not in (SOFT, HARD_NEGATIVE):
            raise ValidationError(f"bag {self.bag_id}: unknown kind {self.kind!r}")
        if self.kind == HARD_NEGATIVE and (self.p_target != 0.0 or len(self.instances) != 1):
            raise ValidationError(
                f"bag {self.bag_id}: hard-negative bags hold one instance with p_target 0"
            )

    @property
    def size(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]


@dataclass
class ModelWeights:
    w: np.ndarray
    penalized_mask: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.penalized_mask = np.asarray(self.penalized_mask, dtype=bool)
        if self.w.shape != self.penalized_mask.shape or self.w.ndim != 1:
            raise ValidationError("weights and penalized_mask must be 1-d of equal length")
        if not np.all(np.isfinite(self.w)):
            raise ValidationError("non-finite weights")

    @classmethod
    def zeros(cls, d: int, intercept: bool = True) -> ModelWeights:
        """Zero weights; with ``intercept`` the last coordinate is unpenalized."""
        mask = np.ones(d, dtype=bool)
        if intercept:
            mask[-1] = False
        return cls(np.zeros(d), mask)

    def with_values(self, w: np.ndarray) -> ModelWeights:
        return ModelWeights(np.array(w, dtype=float), self.penalized_mask.copy())

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.w[self.penalized_mask]))


@dataclass(frozen=True)
class NormalizationMode:
    kind: str = "raw"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigurationError(f"unknown normalization {self.kind!r}; expected one of {MODES}")
        if not self.lam >= 0:
            raise ConfigurationError(f"lambda must be nonnegative, got {self.lam}")


@dataclass
class ObjectiveReport:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray | None = None


@dataclass
class BagBatch:
    """Bags packed into flat arrays for vectorized evaluation.

    Soft bags keep their instances stacked in ``soft_x`` with ``owner``
    mapping each row to its position among the soft bags; hard negatives
    are stacked one row per bag in ``neg_x``.
    """

    bags: list[Bag]
    dim: int
    p_target: np.ndarray
    annotator_weight: np.ndarray
    is_negative: np.ndarray
    soft_idx: np.ndarray
    neg_idx: np.ndarray
    soft_x: np.ndarray
    owner: np.ndarray
    neg_x: np.ndarray
    aggregate: sparse.csr_matrix = field(repr=False)

    @property
    def n_bags(self) -> int:
        return len(self.bags)

    @property
    def n_soft(self) -> int:
        return len(self.soft_idx)

    @property
    def n_negative(self) -> int:
        return len(self.neg_idx)


BagsLike = Union[Sequence[Bag], BagBatch]


def pack(bags: BagsLike) -> BagBatch:
    if isinstance(bags, BagBatch):
        return bags
    bags = list(bags)
    if not bags:
        raise ValidationError("empty bag list")
    dims = {b.dim for b in bags}
    if len(dims) != 1:
        raise ValidationError(f"bags disagree on feature dimension: {sorted(dims)}")
    d = dims.pop()
    is_neg = np.array([b.kind == HARD_NEGATIVE for b in bags])
    soft_idx = np.flatnonzero(~is_neg)
    neg_idx = np.flatnonzero(is_neg)
    if len(soft_idx):
        soft_x = np.vstack([bags[i].instances for i in soft_idx])
        owner = np.repeat(np.arange(len(soft_idx)), [bags[i].size for i in soft_idx])
    else:
        soft_x = np.zeros((0, d))
        owner = np.zeros(0, dtype=int)
    neg_x = np.vstack([bags[i].instances for i in neg_idx]) if len(neg_idx) else np.zeros((0, d))
    aggregate = sparse.csr_matrix(
        (np.ones(len(owner)), (owner, np.arange(len(owner)))), shape=(len(soft_idx), len(owner))
    )
    return BagBatch(
        bags=bags,
        dim=d,
        p_target=np.array([b.p_target for b in bags]),
        annotator_weight=np.array([b.annotator_weight for b in bags]),
        is_negative=is_neg,
        soft_idx=soft_idx,
        neg_idx=neg_idx,
        soft_x=soft_x,
        owner=owner,
        neg_x=neg_x,
        aggregate=aggregate,
    )


def _coerce_weights(w, d: int) -> np.ndarray:
    w = w.w if isinstance(w, ModelWeights) else np.asarray(w, dtype=float)
    if w.shape != (d,):
        raise ValidationError(f"weight dimension {w.shape} does not match features ({d},)")
    return w


def _penalized_mask(w, d: int) -> np.ndarray:
    if isinstance(w, ModelWeights):
        return w.penalized_mask
    return np.ones(d, dtype=bool)


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def bag_weights(batch: BagBatch, mode: NormalizationMode | str, use_annotator_weights: bool) -> np.ndarray:
    """Per-bag multipliers that realize a normalization mode.

    Every normalization is a reweighting of the per-bag divergences; the
    annotator-count factor multiplies on top.
    """
    kind = mode.kind if isinstance(mode, NormalizationMode) else NormalizationMode(mode).kind
    m = batch.n_bags
    if kind == "raw":
        weights = np.ones(m)
    elif kind == "per-sample":
        weights = np.full(m, 1.0 / m)
    else:
        if batch.n_soft == 0 or batch.n_negative == 0:
            raise ConfigurationError(
                f"per-class normalization needs both soft and hard-negative bags "
                f"(got {batch.n_soft} soft, {batch.n_negative} negative)"
            )
        weights = np.where(batch.is_negative, 1.0 / batch.n_negative, 1.0 / batch.n_soft)
    if use_annotator_weights:
        weights = weights * batch.annotator_weight
    return weights


@dataclass
class _BagState:
    log_p: np.ndarray  # per bag, original order
    log_1mp: np.ndarray
    soft_p: np.ndarray  # clamped bag probabilities of soft bags
    soft_inst_p: np.ndarray  # instance probabilities, soft rows
    neg_p: np.ndarray  # instance probabilities, hard negatives


def _bag_state(batch: BagBatch, w: np.ndarray) -> _BagState:
    log_p = np.empty(batch.n_bags)
    log_1mp = np.empty(batch.n_bags)

    z = batch.soft_x @ w
    s = np.bincount(batch.owner, weights=log_sigmoid(-z), minlength=batch.n_soft)
    p = np.maximum(-np.expm1(s), EPS)
    log_p[batch.soft_idx] = np.log(p)
    log_1mp[batch.soft_idx] = s

    zn = batch.neg_x @ w
    log_p[batch.neg_idx] = log_sigmoid(zn)
    log_1mp[batch.neg_idx] = log_sigmoid(-zn)
    return _BagState(log_p, log_1mp, p, expit(z), expit(zn))


def _divergences(batch: BagBatch, state: _BagState) -> np.ndarray:
    pt = batch.p_target
    return -(pt * state.log_p + (1.0 - pt) * state.log_1mp)


def _penalty(w: np.ndarray, mask: np.ndarray, lam: float) -> float:
    if lam == 0.0:
        return 0.0
    return lam / w.shape[0] * float(np.sum(np.abs(w[mask])))


def evaluate(
    bags: BagsLike,
    w,
    mode: NormalizationMode = NormalizationMode(),
    use_annotator_weights: bool = False,
    with_hessian: bool = False,
) -> ObjectiveReport:
    """Objective value (with L1 term) and the smooth part's derivatives."""
    batch = pack(bags)
    wv = _coerce_weights(w, batch.dim)
    bw = bag_weights(batch, mode, use_annotator_weights)
    state = _bag_state(batch, wv)
    value = float(np.sum(bw * _divergences(batch, state)))
    value += _penalty(wv, _penalized_mask(w, batch.dim), mode.lam)

    pt_soft = batch.p_target[batch.soft_idx]
    bw_soft = bw[batch.soft_idx]
    bw_neg = bw[batch.neg_idx]
    # d/dw of -[pt log p + (1-pt) log(1-p)] is -(pt/p - 1) * sum_k x_k P_k
    r = -(pt_soft / state.soft_p - 1.0) * bw_soft
    inst_p = state.soft_inst_p
    grad = batch.soft_x.T @ (r[batch.owner] * inst_p)
    grad += batch.neg_x.T @ (bw_neg * state.neg_p)

    hess = None
    if with_hessian:
        c = inst_p * (1.0 - inst_p)
        hess = batch.soft_x.T @ (batch.soft_x * (r[batch.owner] * c)[:, None])
        if batch.n_soft:
            xg = batch.aggregate @ (batch.soft_x * inst_p[:, None])
            p = state.soft_p
            q = bw_soft * pt_soft * (1.0 - p) / p**2
            hess += xg.T @ (xg * q[:, None])
        cn = state.neg_p * (1.0 - state.neg_p)
        hess += batch.neg_x.T @ (batch.neg_x * (bw_neg * cn)[:, None])
        hess = 0.5 * (hess + hess.T)
    return ObjectiveReport(value, grad, hess)


def objective(bags: BagsLike, w, mode=NormalizationMode(), use_annotator_weights: bool = False) -> float:
    batch = pack(bags)
    wv = _coerce_weights(w, batch.dim)
    bw = bag_weights(batch, mode, use_annotator_weights)
    state = _bag_state(batch, wv)
    value = float(np.sum(bw * _divergences(batch, state)))
    return value + _penalty(wv, _penalized_mask(w, batch.dim), mode.lam)


def gradient(bags: BagsLike, w, mode=NormalizationMode(), use_annotator_weights: bool = False) -> np.ndarray:
    """Gradient of the divergence part; the L1 term is left to the optimizer."""
    return evaluate(bags, w, mode, use_annotator_weights).gradient


def hessian(bags: BagsLike, w, mode=NormalizationMode(), use_annotator_weights: bool = False) -> np.ndarray:
    return evaluate(bags, w, mode, use_annotator_weights, with_hessian=True).hessian


def bag_positive_probability(bag: Bag, w) -> float:
    wv = _coerce_weights(w, bag.dim)
    s = float(np.sum(log_sigmoid(-(bag.instances @ wv))))
    return -np.expm1(s)


def bag_divergence(bag: Bag, w) -> float:
    batch = pack([bag])
    state = _bag_state(batch, _coerce_weights(w, batch.dim))
    return float(_divergences(batch, state)[0])


def hard_label_log_likelihood(bags: BagsLike, w) -> float:
    """Log-likelihood of binary bag labels under the MIL logistic model."""
    batch = pack(bags)
    y = batch.p_target
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("hard-label likelihood needs targets in {0, 1}")
    state = _bag_state(batch, _coerce_weights(w, batch.dim))
    return float(np.sum(y * state.log_p + (1.0 - y) * state.log_1mp))


def reduce_to_hard_label_objective(bags: BagsLike, w) -> float:
    """Unpenalized raw objective restricted to binary targets."""
    batch = pack(bags)
    y = batch.p_target
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("hard-label reduction needs targets in {0, 1}")
    return objective(batch, w, NormalizationMode("raw", 0.0))
