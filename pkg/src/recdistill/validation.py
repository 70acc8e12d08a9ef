"""Self-checks behind the ``gradcheck`` and ``calibrate`` commands."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logit

from .losses import (
    DebiasParams,
    LossValue,
    LossWeights,
    combined_loss,
    debias,
    distill_ce,
    distill_kl,
    distill_mse,
    kd_debias_loss,
    task_loss,
)
from .numerics import grad_check, init_mlp, mlp_backward, mlp_forward

GRADCHECK_SIZES = (6, 8, 5, 1)
GRADCHECK_BATCH = 16

# Monte Carlo threshold: at 1e6 samples the bar is 0.01; below that it widens
# with the standard error, i.e. 0.01 * sqrt(1e6 / samples).
CALIBRATION_TOLERANCE = 0.01
CALIBRATION_REFERENCE_SAMPLES = 1_000_000
CALIBRATION_MIN_SAMPLES = 10_000


@dataclass
class CheckResult:
    name: str
    worst: float
    passed: bool


def _loss_suite(rng: np.random.Generator) -> dict[str, Callable]:
    """Per-logit losses keyed by name; each maps a logit vector to a LossValue."""
    n = GRADCHECK_BATCH
    y = (rng.random(n) < 0.4).astype(float)
    p_t = rng.uniform(0.05, 0.95, n)
    z_t = logit(p_t)
    t1 = rng.normal(0.0, 1.5, n)
    student_d = DebiasParams(r_s=3.0, r_plus=1.0, p_x=1.0, b_s=0.0)
    teacher_d = DebiasParams(r_s=7.0, r_plus=0.8, p_x=0.8, b_s=0.1)
    w = LossWeights(alpha=2.5, tau=1.0)
    suite = {
        "task": lambda z: task_loss(z, y),
        "distill_ce": lambda z: distill_ce(p_t, z),
        "distill_mse": lambda z: distill_mse(p_t, z),
        "kd_debias_ce": lambda z: kd_debias_loss(t1, z, student_d, "ce"),
        "kd_debias_mse": lambda z: kd_debias_loss(t1, z, student_d, "mse"),
        "kd_debias_ce_teacher_space": lambda z: kd_debias_loss(t1, z, student_d, "ce", teacher_d),
        "combined": lambda z: combined_loss(task_loss(z, y), distill_ce(p_t, z), w),
    }
    for tau in (0.5, 1.0, 2.0):
        suite[f"distill_kl_tau{tau:g}"] = lambda z, tau=tau: distill_kl(z_t, z, tau)
    return suite


def run_gradcheck(probes: int = 20, tolerance: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    """Finite-difference check of every loss chained through a small random MLP."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(GRADCHECK_BATCH, GRADCHECK_SIZES[0]))
    results = []
    for k, (name, loss) in enumerate(_loss_suite(rng).items()):
        net = init_mlp(list(GRADCHECK_SIZES), [seed, k])

        def value_and_tape(params, loss=loss):
            z, cache = mlp_forward(params, x)
            lv: LossValue = loss(z)
            return float(np.sum(lv.value)), mlp_backward(params, cache, lv.dL_dz)

        worst = grad_check(value_and_tape, net, probe_count=probes, seed=[seed, k])
        results.append(CheckResult(name, float(worst), bool(worst <= tolerance)))
    return results


def calibration_threshold(samples: int) -> float:
    return CALIBRATION_TOLERANCE * max(1.0, math.sqrt(CALIBRATION_REFERENCE_SAMPLES / samples))


def calibration_mc(r_s: float, samples: int = 1_000_000, seed: int = 0, bins: int = 20) -> float:
    """Mean absolute error of the debias correction against the true posterior.

    Events get a true posterior, labels are drawn, negatives are kept with
    probability ``1/r_s``. Within each posterior bin the positive rate seen
    in the sampled data is the biased probability; debiasing its logit must
    recover the bin's true mean posterior. The error is averaged over bins,
    weighted by how many sampled events fall in each.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng([seed, int(round(r_s * 1000))])
    p = expit(rng.normal(-2.0, 1.5, samples))
    y = rng.random(samples) < p
    kept = y | (rng.random(samples) < 1.0 / r_s)
    edges = np.quantile(p, np.linspace(0.0, 1.0, bins + 1))
    which = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, bins - 1)
    d = DebiasParams(r_s=r_s, r_plus=1.0, p_x=1.0, b_s=0.0)
    err, weight = 0.0, 0
    for b in range(bins):
        in_bin = which == b
        sampled = in_bin & kept
        m = int(sampled.sum())
        if m == 0:
            continue
        rate = np.clip(y[sampled].mean(), 1e-6, 1 - 1e-6)
        estimate = float(debias(logit(rate), d))
        err += m * abs(estimate - p[in_bin].mean())
        weight += m
    return err / weight


def run_calibration(rs_list: Sequence[float], samples: int = 1_000_000, seed: int = 0) -> list[CheckResult]:
    limit = calibration_threshold(samples)
    return [
        CheckResult(f"r_s={r:g}", float(mae), bool(mae <= limit))
        for r in rs_list
        for mae in [calibration_mc(r, samples, seed)]
    ]
