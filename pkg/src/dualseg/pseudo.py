"""Consensus pseudo-labels from two teachers, and a Monte-Carlo check of the averaging variance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError


@dataclass
class PseudoLabelBatch:
    p_avg: np.ndarray  # [B, H, W, C]
    labels: np.ndarray  # [B, H, W] int, ignore == C
    mask: np.ndarray  # [B, H, W] bool
    tau: float

    @property
    def ignore_index(self) -> int:
        return self.p_avg.shape[-1]

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def consensus(probs1: np.ndarray, probs2: np.ndarray) -> np.ndarray:
    probs1, probs2 = np.asarray(probs1, dtype=np.float64), np.asarray(probs2, dtype=np.float64)
    if probs1.shape != probs2.shape:
        raise ShapeError(f"consensus: shapes differ {probs1.shape} vs {probs2.shape}")
    return 0.5 * (probs1 + probs2)


def threshold_labels(p_avg: np.ndarray, tau: float = 0.95) -> PseudoLabelBatch:
    """Argmax labels where the top probability strictly exceeds ``tau``; ``C`` elsewhere."""
    p_avg = np.asarray(p_avg, dtype=np.float64)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    c = p_avg.shape[-1]
    top = p_avg.max(axis=-1)
    mask = top > tau
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    labels = np.where(mask, np.argmax(p_avg, axis=-1), c).astype(np.int64)
    return PseudoLabelBatch(p_avg=p_avg, labels=labels, mask=mask, tau=float(tau))


# --- variance study ----------------------------------------------------------


@dataclass
class VarianceReport:
    rho: float
    sigma: float
    trials: int
    var_single: float
    var_avg: float
    ratio: float
    cov: float
    var_second: float

    @property
    def closed_form(self) -> float:
        """Variance of the average predicted from the two marginal variances and their covariance."""
        return 0.25 * (self.var_single + self.var_second + 2.0 * self.cov)

    def row(self) -> dict:
        return {
            "rho": self.rho,
            "sigma": self.sigma,
            "trials": self.trials,
            "var_single": self.var_single,
            "var_avg": self.var_avg,
            "ratio": self.ratio,
            "cov": self.cov,
        }


VARIANCE_COLUMNS = ["rho", "sigma", "trials", "var_single", "var_avg", "ratio", "cov"]

# Fixed clean logits the simulated teachers perturb; moderately confident in class 0.
BASE_LOGITS = np.array([1.0, 0.0, -0.5, -1.0])


def sample_teacher_probs(
    sigma: float, rho: float, trials: int, rng: np.random.Generator, base: np.ndarray = BASE_LOGITS
) -> tuple[np.ndarray, np.ndarray]:
    shared = rng.standard_normal((trials, base.size))
    own1 = rng.standard_normal((trials, base.size))
    own2 = rng.standard_normal((trials, base.size))
    a, b = np.sqrt(rho), np.sqrt(1.0 - rho)
    p1 = softmax_np(base + sigma * (a * shared + b * own1))
    p2 = softmax_np(base + sigma * (a * shared + b * own2))
    return p1, p2


def variance_study(
    sigma: float = 0.3, rho: float = 0.0, trials: int = 100_000, seed: int = 0, workers: int = 4
) -> VarianceReport:
    """Variance of one teacher's probabilities vs. the two-teacher average under correlated logit noise.

    Variances and the covariance are summed over classes (trace of the covariance
    matrix).  Trials are split into ``workers`` partitions, each with its own
    child RNG stream of ``seed``, and merged in partition order.
    """
    if trials <= 0:
        raise ValueError(f"trials must be positive, got {trials}")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    streams = np.random.SeedSequence(seed).spawn(workers)
    sizes = [trials // workers + (1 if i < trials % workers else 0) for i in range(workers)]
    p1s, p2s = [], []
    for ss, n in zip(streams, sizes):
        if n == 0:
            continue
        p1, p2 = sample_teacher_probs(sigma, rho, n, np.random.default_rng(ss))
        p1s.append(p1)
        p2s.append(p2)
    p1, p2 = np.concatenate(p1s), np.concatenate(p2s)
    avg = 0.5 * (p1 + p2)
    v1 = float(p1.var(axis=0, ddof=1).sum())
    v2 = float(p2.var(axis=0, ddof=1).sum())
    va = float(avg.var(axis=0, ddof=1).sum())
    d1, d2 = p1 - p1.mean(axis=0), p2 - p2.mean(axis=0)
    cov = float((d1 * d2).sum(axis=0).sum() / (len(p1) - 1))
    return VarianceReport(rho, sigma, trials, v1, va, va / v1, cov, v2)


def write_variance_csv(reports: list[VarianceReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=VARIANCE_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
