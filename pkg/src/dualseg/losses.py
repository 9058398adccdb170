"""Loss components and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .pseudo import PseudoLabelBatch
from .tensor import ContractError, ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.3
    lambda2: float = 0.1
    lambda3: float = 0.01

    def __post_init__(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    ce: float = 0.0
    pl: float = 0.0
    consist: float = 0.0
    reg: float = 0.0
    total: float = 0.0
    n_labeled: int = 0
    n_unlabeled: int = 0
    n_confident: int = 0
    mask_fraction: float = 0.0
    flags: list[str] = field(default_factory=list)

    def row(self, step: int) -> dict:
        return {
            "step": step,
            "ce": self.ce,
            "pl": self.pl,
            "consist": self.consist,
            "reg": self.reg,
            "total": self.total,
            "mask_fraction": self.mask_fraction,
        }


LOSS_COLUMNS = ["step", "ce", "pl", "consist", "reg", "total", "mask_fraction"]


def _zero() -> Tensor:
    return Tensor(0.0)


def consistency_loss(t1_logits: Tensor, t2_logits: Tensor, batch_u: int) -> tuple[Tensor, bool]:
    """Squared L2 distance between the teachers' logits, summed per sample and averaged over ``batch_u``.

    Returns ``(loss, empty)``; ``empty`` is set when there is no unlabeled batch.
    """
    if t1_logits.shape != t2_logits.shape:
        raise ShapeError(f"consistency_loss: {t1_logits.shape} vs {t2_logits.shape}")
    if batch_u == 0:
        return _zero(), True
    diff = T.sub(t1_logits, t2_logits)
    return T.scale(T.sum(T.square(diff)), 1.0 / batch_u), False


def _expand_weights(w_class: Tensor, logits_shape: tuple[int, ...]) -> Tensor:
    b, c = w_class.shape
    if logits_shape[0] != b or logits_shape[-1] != c:
        raise ShapeError(f"class weights {w_class.shape} do not fit logits {logits_shape}")
    rows = T.reshape(w_class, (b,) + (1,) * (len(logits_shape) - 2) + (c,))
    return T.broadcast_to(rows, logits_shape)


def weighted_nll(logits: Tensor, w_class: Tensor, labels: np.ndarray, select: np.ndarray) -> Tensor:
    """Mean over selected pixels of ``-log softmax(logits * w)[label]``."""
    modulated = T.mul(logits, _expand_weights(w_class, logits.shape))
    logp = T.log_softmax(modulated)
    n = int(select.sum())
    onehot = np.zeros(logits.shape)
    idx = np.nonzero(select)
    onehot[idx + (labels[idx],)] = 1.0
    return T.scale(T.sum(T.mul(logp, Tensor(onehot))), -1.0 / n)


def pseudo_label_loss(student_logits: Tensor, w_class: Tensor, plb: PseudoLabelBatch) -> tuple[Tensor, bool]:
    """Weighted cross-entropy on confident pixels only; ``(0, True)`` when nothing is confident."""
    c = student_logits.shape[-1]
    labels = plb.labels
    if labels.shape != student_logits.shape[:-1]:
        raise ShapeError(f"pseudo labels {labels.shape} do not match logits {student_logits.shape}")
    if np.any(labels[plb.mask] < 0) or np.any(labels[plb.mask] >= c):
        raise ContractError("pseudo label outside [0, C-1] at a confident pixel")
    if not plb.mask.any():
        return _zero(), True
    return weighted_nll(student_logits, w_class, labels, plb.mask), False


def supervised_ce(student_logits: Tensor, w_class: Tensor, truth: np.ndarray) -> Tensor:
    c = student_logits.shape[-1]
    truth = np.asarray(truth)
    if truth.shape != student_logits.shape[:-1]:
        raise ShapeError(f"truth {truth.shape} does not match logits {student_logits.shape}")
    if truth.size and (truth.min() < 0 or truth.max() >= c):
        raise ContractError(f"ground-truth label outside [0, {c - 1}]")
    return weighted_nll(student_logits, w_class, truth, np.ones(truth.shape, dtype=bool))


def weight_regularizer(w_class: Tensor) -> Tensor:
    return T.sum(T.square(T.sub(w_class, 1.0)))


def total_loss(ce, pl, consist, reg, weights: LossWeights):
    """``ce + l1*pl + l2*consist + l3*reg`` for floats or tensors alike."""
    if isinstance(ce, Tensor):
        out = ce
        for lam, part in ((weights.lambda1, pl), (weights.lambda2, consist), (weights.lambda3, reg)):
            out = T.add(out, T.scale(part, lam))
        return out
    return ce + weights.lambda1 * pl + weights.lambda2 * consist + weights.lambda3 * reg
