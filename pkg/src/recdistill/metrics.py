"""AUC, gain decomposition, transferability, calibration and the CSV report."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError
from .signal_store import _atomic_write

ETA_FLOOR = 1e-4

CSV_HEADER = "experiment,arm,seed,step,metric,value"

METRIC_NAMES = (
    "auc_teacher",
    "auc_student_raw",
    "auc_student_distill_main",
    "auc_student_distill_aux",
    "eta",
    "gain_scale",
    "gain_distill",
    "missing_signal_frac",
    "calibration_mae",
)


def auc(labels, scores) -> float:
    """Mann-Whitney AUC; tied scores contribute one half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError("labels and scores must have the same length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def transferability(p_t: float, p_s_raw: float, p_s_distill: float, floor: float = ETA_FLOOR) -> float:
    """Share of the teacher's advantage recovered by distillation; NaN when undefined."""
    denom = p_t - p_s_raw
    if not denom > floor:
        return math.nan
    return (p_s_distill - p_s_raw) / denom


def gain_decomposition(p_t: float, p_s_raw: float, p_s_distill: float, floor: float = ETA_FLOOR):
    """Return ``(gain_scale, eta, gain_distill)``; eta is NaN below the floor."""
    gain_scale = p_t - p_s_raw
    gain_distill = p_s_distill - p_s_raw
    eta = transferability(p_t, p_s_raw, p_s_distill, floor)
    return gain_scale, eta, gain_distill


def calibration_mae(predicted, oracle) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if predicted.shape != oracle.shape:
        raise ValueError("predicted and oracle must have the same length")
    return float(np.mean(np.abs(predicted - oracle)))


@dataclass
class EvalSnapshot:
    step: int
    model_tag: str
    auc: float
    calibration_mae: float
    sample_count: int


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    arm: str
    seed: int
    step: int
    metric: str
    value: float

    def sort_key(self):
        return (self.arm, self.seed, self.step, self.metric)

    def to_csv(self) -> str:
        return f"{self.experiment},{self.arm},{self.seed},{self.step},{self.metric},{format_real(self.value)}"


def format_real(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{float(x):.9g}"


@dataclass
class MetricsReport:
    experiment: str
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, arm: str, seed: int, step: int, metric: str, value: float) -> None:
        self.rows.append(MetricRow(self.experiment, arm, int(seed), int(step), metric, float(value)))

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def sorted_rows(self) -> list[MetricRow]:
        return sorted(self.rows, key=MetricRow.sort_key)

    @property
    def arms(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.arm not in seen:
                seen.append(r.arm)
        return seen

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def steps(self, arm: Optional[str] = None) -> list[int]:
        return sorted({r.step for r in self.rows if arm is None or r.arm == arm})

    def value(self, arm: str, seed: int, metric: str, step: Optional[int] = None) -> float:
        """One value; ``step=None`` means the last eval step."""
        if step is None:
            step = max(self.steps(arm))
        for r in self.rows:
            if r.arm == arm and r.seed == seed and r.step == step and r.metric == metric:
                return r.value
        raise KeyError((arm, seed, step, metric))

    def trace(self, arm: str, seed: int, metric: str) -> tuple[np.ndarray, np.ndarray]:
        pts = sorted(
            (r.step, r.value) for r in self.rows if r.arm == arm and r.seed == seed and r.metric == metric
        )
        return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])

    def per_seed(self, arm: str, metric: str, step: Optional[int] = None) -> np.ndarray:
        return np.array([self.value(arm, s, metric, step) for s in self.seeds])

    def summary(self, metrics: Iterable[str] = METRIC_NAMES, step: Optional[int] = None) -> list[dict]:
        """Mean and standard error over seeds at the final (or given) eval step."""
        out = []
        for arm in self.arms:
            for m in metrics:
                try:
                    vals = self.per_seed(arm, m, step)
                except KeyError:
                    continue
                vals = vals[~np.isnan(vals)]
                mean = float(vals.mean()) if vals.size else math.nan
                stderr = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
                out.append({"arm": arm, "metric": m, "mean": mean, "stderr": stderr, "n": int(vals.size)})
        return out

    def to_csv(self) -> str:
        return "\n".join([CSV_HEADER] + [r.to_csv() for r in self.sorted_rows()]) + "\n"

    def write_csv(self, path) -> Path:
        _atomic_write(Path(path), [self.to_csv()])
        return Path(path)


def summary_table(report: MetricsReport, metrics: Iterable[str] = METRIC_NAMES) -> str:
    lines = ["arm,metric,mean,stderr,n"]
    for row in report.summary(metrics):
        stderr = "" if math.isnan(row["stderr"]) else format_real(row["stderr"])
        lines.append(f"{row['arm']},{row['metric']},{format_real(row['mean'])},{stderr},{row['n']}")
    return "\n".join(lines) + "\n"


def read_csv(path) -> MetricsReport:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected CSV header")
    report = None
    for line in lines[1:]:
        exp, arm, seed, step, metric, value = line.split(",")
        if report is None:
            report = MetricsReport(exp)
        report.add(arm, int(seed), int(step), metric, float(value))
    return report or MetricsReport("")
