"""Exponential-moving-average teacher heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import HeadParams
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"EMA alpha must lie in (0, 1), got {self.alpha}")


def _pairs(teacher: HeadParams, student: HeadParams):
    for name in ("weight", "bias"):
        t, s = getattr(teacher, name), getattr(student, name)
        if t.shape != s.shape:
            raise ShapeError(f"ema: teacher {name} {t.shape} vs student {s.shape}")
        yield name, t, s


def ema_update(teacher: HeadParams, student: HeadParams, cfg: EmaConfig) -> HeadParams:
    """Return ``alpha * teacher + (1 - alpha) * student`` as a new gradient-free head."""
    a = cfg.alpha
    out = {}
    for name, t, s in _pairs(teacher, student):
        out[name] = Tensor(a * t.data + (1.0 - a) * s.data)
    return HeadParams(**out)


def _flat(head: HeadParams) -> np.ndarray:
    return np.concatenate([head.weight.data.ravel(), head.bias.data.ravel()])


def verify_ema_bound(
    before: HeadParams, after: HeadParams, student_after: HeadParams, cfg: EmaConfig
) -> float:
    """Residual of ``|T' - T| = (1 - alpha) |S' - T|`` in the L2 norm over all head parameters."""
    t0, t1, s1 = _flat(before), _flat(after), _flat(student_after)
    moved = np.linalg.norm(t1 - t0)
    bound = (1.0 - cfg.alpha) * np.linalg.norm(s1 - t0)
    return float(abs(moved - bound))


def perturb(head: HeadParams, scale: float, rng: np.random.Generator) -> HeadParams:
    """Jitter a head copy by uniform noise of ``scale`` times its weight range."""
    amp = scale * float(np.abs(head.weight.data).max(initial=0.0))
    return HeadParams(
        Tensor(head.weight.data + rng.uniform(-amp, amp, size=head.weight.shape)),
        Tensor(head.bias.data + rng.uniform(-amp, amp, size=head.bias.shape)),
    )


@dataclass
class TeacherPair:
    """Two EMA teachers of one student, decorrelated by perturbed starts and alternating updates."""

    first: HeadParams
    second: HeadParams
    last_step: int = -1

    @classmethod
    def from_student(cls, student: HeadParams, seed: int, jitter: float = 1e-2) -> "TeacherPair":
        rng = np.random.default_rng([seed, 0x7EAC])
        return cls(perturb(student, jitter, rng), perturb(student, jitter, rng))

    def update(self, student: HeadParams, cfg: EmaConfig, step: int, active: int = 2) -> None:
        """Teacher one moves on even steps and teacher two on odd steps.

        With ``active=1`` only teacher one exists and it moves every step.
        """
        if active == 1 or step % 2 == 0:
            self.first = ema_update(self.first, student, cfg)
        if active == 2 and step % 2 == 1:
            self.second = ema_update(self.second, student, cfg)
        self.last_step = step
