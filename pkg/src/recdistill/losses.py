"""Task and distillation objectives, plus the sampling-aware debias correction.

All loss functions are elementwise: they accept scalars or arrays and return a
:class:`LossValue` whose ``value`` and ``dL_dz`` have the broadcast shape of the
inputs. Reduction over a batch is left to the caller (see ``LossValue.mean``).
The gradient is always taken with respect to the *student* logit; teacher
quantities are constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError

P_MIN = 1e-7
P_MAX = 1.0 - 1e-7

ALPHA_MIN = 1.0
ALPHA_MAX = 1000.0


def _clamp(p):
    return np.clip(p, P_MIN, P_MAX)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


@dataclass
class LossValue:
    value: np.ndarray
    dL_dz: np.ndarray

    def mean(self) -> "LossValue":
        """Batch mean; gradients are rescaled so they stay consistent with the value."""
        v = np.asarray(self.value)
        n = max(v.size, 1)
        return LossValue(float(v.sum() / n), np.asarray(self.dL_dz) / n)


@dataclass
class LossWeights:
    alpha: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")


@dataclass
class DebiasParams:
    """Sampling parameters for one (task, traffic source); fields may be arrays."""

    r_s: float = 1.0
    r_plus: float = 1.0
    p_x: float = 1.0
    b_s: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.r_s) < 1):
            raise ConfigError(f"r_s must be >= 1, got {self.r_s}")
        r_plus = np.asarray(self.r_plus)
        if np.any(r_plus <= 0) or np.any(r_plus > 1):
            raise ConfigError(f"r_plus must be in (0, 1], got {self.r_plus}")
        p_x = np.asarray(self.p_x)
        if np.any(p_x <= 0) or np.any(p_x > 1):
            raise ConfigError(f"p_x must be in (0, 1], got {self.p_x}")
        if np.any(np.asarray(self.b_s) < 0):
            raise ConfigError(f"b_s must be >= 0, got {self.b_s}")

    @classmethod
    def identity(cls) -> "DebiasParams":
        return cls(1.0, 1.0, 1.0, 0.0)


def task_loss(z, y) -> LossValue:
    """Binary cross-entropy on a logit, computed without forming log(p)."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    value = np.logaddexp(0.0, z) - y * z
    return LossValue(value, expit(z) - y)


def distill_ce(p_t, z_s) -> LossValue:
    """Soft-label cross-entropy; the gradient is ``p_S - p_T``."""
    p_t = _clamp(np.asarray(p_t, dtype=np.float64))
    z_s = np.asarray(z_s, dtype=np.float64)
    value = -p_t * _log_sigmoid(z_s) - (1.0 - p_t) * _log_sigmoid(-z_s)
    return LossValue(value, expit(z_s) - p_t)


def distill_kl(z_t, z_s, tau: float = 1.0) -> LossValue:
    """``tau^2 * KL(Bern(sigmoid(z_t/tau)) || Bern(sigmoid(z_s/tau)))``."""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    z_t = np.asarray(z_t, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    p_t = _clamp(expit(z_t / tau))
    u = z_s / tau
    kl = p_t * (np.log(p_t) - _log_sigmoid(u)) + (1.0 - p_t) * (
        np.log1p(-p_t) - _log_sigmoid(-u)
    )
    return LossValue(tau * tau * kl, tau * (expit(u) - p_t))


def distill_mse(p_t, z_s) -> LossValue:
    """Half squared error in probability space; gradient carries ``p_S(1-p_S)``."""
    p_t = np.asarray(p_t, dtype=np.float64)
    p_s = expit(np.asarray(z_s, dtype=np.float64))
    diff = p_s - p_t
    return LossValue(0.5 * diff * diff, diff * p_s * (1.0 - p_s))


def binary_entropy(p):
    p = _clamp(np.asarray(p, dtype=np.float64))
    return -p * np.log(p) - (1.0 - p) * np.log1p(-p)


def debias_logit(z, d: DebiasParams):
    """Return ``(u, du_dz)`` with ``debias(z, d) == sigmoid(u)``.

    Rewriting ``1 / (1 + a*(exp(-z) + c))`` as ``sigmoid(z - ln a - ln(1 + c*exp(z)))``
    keeps the correction finite for any logit.
    """
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(d.r_s, dtype=np.float64) / np.asarray(d.p_x, dtype=np.float64)
    c = 1.0 - np.asarray(d.r_plus, dtype=np.float64) + np.asarray(d.b_s, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_c = np.log(c)
    shifted = z + log_c
    u = z - np.log(a) - np.logaddexp(0.0, shifted)
    du_dz = expit(-shifted)
    return u, du_dz


def debias(z, d: DebiasParams):
    """Sampling-aware correction of a raw logit into a posterior estimate."""
    u, _ = debias_logit(z, d)
    return expit(u)


def teacher_rebias(t1, student_d: DebiasParams):
    """Project a raw teacher logit through the *student-side* correction."""
    return debias(t1, student_d)


def kd_debias_loss(
    t1,
    s1,
    student_d: DebiasParams,
    metric: str = "ce",
    target_d: DebiasParams | None = None,
    grad_mode: str = "full",
) -> LossValue:
    """Distillation loss between corrected teacher target and corrected student output.

    The target is ``debias(t1, target_d)``; ``target_d`` defaults to
    ``student_d`` (teacher re-bias). Passing the teacher's own sampling
    parameters gives the mismatched-space ablation. With ``grad_mode="full"``
    the gradient is chained through the student-side correction; ``"posthoc"``
    stops it at the corrected logit.
    """
    if metric not in ("ce", "mse"):
        raise ConfigError(f"unknown distillation metric {metric!r}")
    if grad_mode not in ("full", "posthoc"):
        raise ConfigError(f"unknown grad_mode {grad_mode!r}")
    target = debias(t1, student_d if target_d is None else target_d)
    u, du_ds = debias_logit(s1, student_d)
    inner = distill_ce(target, u) if metric == "ce" else distill_mse(target, u)
    grad = inner.dL_dz * du_ds if grad_mode == "full" else inner.dL_dz
    return LossValue(inner.value, grad)


def combined_loss(task: LossValue, distill: LossValue, w: LossWeights) -> LossValue:
    """``L_task + alpha * L_distill``; the two weights are not normalised."""
    return LossValue(
        np.asarray(task.value) + w.alpha * np.asarray(distill.value),
        np.asarray(task.dL_dz) + w.alpha * np.asarray(distill.dL_dz),
    )


def align_alpha(
    task_losses: Sequence[float], distill_losses: Sequence[float], eps: float = 1e-12
) -> float:
    """Pick alpha so the weighted distillation term matches the task loss in magnitude."""
    task_losses = np.asarray(task_losses, dtype=np.float64)
    distill_losses = np.asarray(distill_losses, dtype=np.float64)
    if task_losses.size == 0 or distill_losses.size == 0:
        raise ValueError("align_alpha needs non-empty loss windows")
    ratio = np.mean(np.abs(task_losses)) / max(np.mean(np.abs(distill_losses)), eps)
    return float(np.clip(ratio, ALPHA_MIN, ALPHA_MAX))
