"""Seeded synthetic interaction stream with a known click process.

Features are i.i.d. standard normal. The true logit is

    w(step) . x + q(x) + intercept

where ``w(step)`` is the base weight vector rotated (and slightly perturbed)
as drift accumulates, ``q`` is a fixed sum of ridge functions
``+-|u_k . x|`` over many random directions (standardised to unit variance)
that gives wide models something to win on, and the intercept is solved so
the mean posterior hits ``positive_rate_target``. Every event carries its true
posterior so calibration can be checked exactly; models never see it.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, logit

from .errors import ConfigError
from .losses import DebiasParams

STEP_BITS = 28
INDEX_BITS = 24
STREAM_BITS = 63 - STEP_BITS - INDEX_BITS

# stream ids used by the pipeline; the generator itself only needs them distinct
STREAM_TRAIN = 0
STREAM_TEACHER_EXTRA = 1
STREAM_HOLDOUT = 2


@dataclass(frozen=True)
class GeneratorConfig:
    feature_dim: int = 32
    base_weights: Optional[tuple] = None
    drift_rate: float = 0.0
    drift_start_step: int = 0
    noise_std: float = 0.0
    positive_rate_target: float = 0.1
    traffic_sources: tuple = (("organic", 0.7), ("ads", 0.3))
    seed: int = 0
    # when base_weights is None they are drawn from the seed with this norm
    weight_norm: float = 1.5
    nonlinear_scale: float = 0.0
    nonlinear_units: int = 128

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.base_weights is not None:
            object.__setattr__(self, "base_weights", tuple(float(w) for w in self.base_weights))
            if len(self.base_weights) != self.feature_dim:
                raise ConfigError(
                    f"base_weights has length {len(self.base_weights)}, feature_dim is {self.feature_dim}"
                )
        object.__setattr__(
            self, "traffic_sources", tuple((str(t), float(p)) for t, p in self.traffic_sources)
        )
        probs = [p for _, p in self.traffic_sources]
        if not probs or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError("traffic source mixing probabilities must be >= 0 and sum to 1")
        if not 0.0 < self.positive_rate_target < 1.0:
            raise ConfigError("positive_rate_target must be in (0, 1)")
        if self.noise_std < 0 or self.nonlinear_scale < 0:
            raise ConfigError("noise_std and nonlinear_scale must be >= 0")
        if self.nonlinear_units < 0:
            raise ConfigError("nonlinear_units must be >= 0")
        if self.drift_start_step < 0:
            raise ConfigError("drift_start_step must be >= 0")

    @property
    def source_tags(self) -> tuple:
        return tuple(t for t, _ in self.traffic_sources)


@dataclass(frozen=True)
class _Resolved:
    base: np.ndarray
    base_dir: np.ndarray
    rot_dir: np.ndarray
    perturb: np.ndarray
    ridge_dirs: np.ndarray
    ridge_signs: np.ndarray
    ridge_mean: float
    ridge_std: float
    intercept: float


def _ridge_raw(dirs: np.ndarray, signs: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.abs(x @ dirs.T) @ signs


def _nonlinear(resolved: _Resolved, scale: float, x: np.ndarray) -> np.ndarray:
    if scale == 0.0 or resolved.ridge_dirs.size == 0:
        return np.zeros(x.shape[0])
    raw = _ridge_raw(resolved.ridge_dirs, resolved.ridge_signs, x)
    return scale * (raw - resolved.ridge_mean) / resolved.ridge_std


@functools.lru_cache(maxsize=64)
def _resolve(config: GeneratorConfig) -> _Resolved:
    d = config.feature_dim
    rng = np.random.default_rng([config.seed, 7919])
    if config.base_weights is None:
        base = rng.standard_normal(d)
        base *= config.weight_norm / np.linalg.norm(base)
    else:
        base = np.array(config.base_weights, dtype=np.float64)
        rng.standard_normal(d)
    norm = np.linalg.norm(base)
    base_dir = base / norm if norm > 0 else np.zeros(d)
    rot = rng.standard_normal(d)
    if norm > 0:
        rot -= rot.dot(base_dir) * base_dir
    rot_norm = np.linalg.norm(rot)
    rot_dir = rot / rot_norm if rot_norm > 0 else np.zeros(d)
    perturb = rng.standard_normal(d) / np.sqrt(d)

    mc = np.random.default_rng([config.seed, 104729]).standard_normal((50_000, d))
    units = config.nonlinear_units if config.nonlinear_scale > 0 else 0
    if units > 0:
        dirs = rng.standard_normal((units, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        signs = np.where(np.arange(units) % 2 == 0, 1.0, -1.0)
        raw = _ridge_raw(dirs, signs, mc)
        ridge_mean, ridge_std = float(raw.mean()), float(raw.std())
    else:
        dirs, signs, ridge_mean, ridge_std = np.zeros((0, d)), np.zeros(0), 0.0, 1.0

    partial = _Resolved(base, base_dir, rot_dir, perturb, dirs, signs, ridge_mean, ridge_std, 0.0)
    score = mc @ base + _nonlinear(partial, config.nonlinear_scale, mc)
    target = config.positive_rate_target
    if np.ptp(score) == 0.0:
        intercept = float(logit(target) - score[0])
    else:
        f = lambda b: expit(score + b).mean() - target
        intercept = float(brentq(f, -60.0, 60.0, xtol=1e-12))
    return _Resolved(base, base_dir, rot_dir, perturb, dirs, signs, ridge_mean, ridge_std, intercept)


def drift_angle(config: GeneratorConfig, step: int) -> float:
    return config.drift_rate * max(0, step - config.drift_start_step)


def weights_at(config: GeneratorConfig, step: int) -> np.ndarray:
    """Linear weights in force at ``step``: a rotation of the base plus a small perturbation."""
    r = _resolve(config)
    theta = drift_angle(config, step)
    if theta == 0.0:
        return r.base.copy()
    norm = np.linalg.norm(r.base)
    w = norm * (np.cos(theta) * r.base_dir + np.sin(theta) * r.rot_dir)
    return w + config.noise_std * theta * r.perturb


def true_logit(config: GeneratorConfig, step: int, features: np.ndarray) -> np.ndarray:
    r = _resolve(config)
    features = np.atleast_2d(features)
    return features @ weights_at(config, step) + _nonlinear(r, config.nonlinear_scale, features) + r.intercept


@dataclass
class InteractionEvent:
    sample_id: int
    step: int
    features: np.ndarray
    label: int
    traffic_source: str
    true_posterior: float


@dataclass
class EventBatch:
    """Column-oriented batch of events; iterating yields :class:`InteractionEvent`."""

    sample_id: np.ndarray
    step: np.ndarray
    features: np.ndarray
    label: np.ndarray
    source: np.ndarray
    true_posterior: np.ndarray
    source_tags: tuple = field(default=())

    def __len__(self) -> int:
        return int(self.sample_id.shape[0])

    def __getitem__(self, i: int) -> InteractionEvent:
        return InteractionEvent(
            int(self.sample_id[i]),
            int(self.step[i]),
            self.features[i],
            int(self.label[i]),
            self.source_tags[int(self.source[i])],
            float(self.true_posterior[i]),
        )

    def __iter__(self) -> Iterator[InteractionEvent]:
        for i in range(len(self)):
            yield self[i]

    @property
    def traffic_source(self) -> np.ndarray:
        return np.asarray(self.source_tags, dtype=object)[self.source]

    def subset(self, index) -> "EventBatch":
        return EventBatch(
            self.sample_id[index],
            self.step[index],
            self.features[index],
            self.label[index],
            self.source[index],
            self.true_posterior[index],
            self.source_tags,
        )

    @classmethod
    def concat(cls, batches) -> "EventBatch":
        batches = list(batches)
        tags = batches[0].source_tags
        return cls(
            np.concatenate([b.sample_id for b in batches]),
            np.concatenate([b.step for b in batches]),
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.label for b in batches]),
            np.concatenate([b.source for b in batches]),
            np.concatenate([b.true_posterior for b in batches]),
            tags,
        )


def make_sample_ids(stream: int, step: int, n: int) -> np.ndarray:
    if not 0 <= stream < 2**STREAM_BITS:
        raise ValueError(f"stream id {stream} out of range")
    if not 0 <= step < 2**STEP_BITS:
        raise ValueError(f"step {step} out of range")
    if not 0 < n <= 2**INDEX_BITS:
        raise ValueError(f"n must be in [1, {2**INDEX_BITS}]")
    base = (stream << (STEP_BITS + INDEX_BITS)) | (step << INDEX_BITS)
    return np.int64(base) + np.arange(n, dtype=np.int64)


def generate_events(config: GeneratorConfig, step: int, n: int, stream: int = STREAM_TRAIN) -> EventBatch:
    """Draw ``n`` events at logical time ``step``; fully determined by (config, stream, step, n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([config.seed, stream, step])
    x = rng.standard_normal((n, config.feature_dim))
    probs = np.array([p for _, p in config.traffic_sources])
    source = rng.choice(len(probs), size=n, p=probs).astype(np.int16)
    posterior = expit(true_logit(config, step, x))
    label = (rng.random(n) < posterior).astype(np.int8)
    return EventBatch(
        make_sample_ids(stream, step, n),
        np.full(n, step, dtype=np.int64),
        x,
        label,
        source,
        posterior,
        config.source_tags,
    )


def oracle_posterior(event):
    """True P(label=1 | x) at the event's step (array-valued for a batch)."""
    return event.true_posterior


@dataclass
class SamplingConfig:
    """Non-uniform training-data sampling.

    Negatives are kept with probability ``1/r_s``; a positive from traffic
    source ``s`` under ``task`` is kept with probability ``p_x_by_source[(task, s)]``.
    ``r_plus`` and ``b_s`` only enter the debias correction.
    """

    r_s: float = 1.0
    r_plus: float = 1.0
    p_x_by_source: Mapping = field(default_factory=dict)
    b_s: float = 0.0

    def __post_init__(self):
        if not self.r_s >= 1:
            raise ConfigError(f"r_s must be >= 1, got {self.r_s}")
        if not 0 < self.r_plus <= 1:
            raise ConfigError(f"r_plus must be in (0, 1], got {self.r_plus}")
        if self.b_s < 0:
            raise ConfigError(f"b_s must be >= 0, got {self.b_s}")
        for key, p in self.p_x_by_source.items():
            if not 0 < p <= 1:
                raise ConfigError(f"p_x for {key} must be in (0, 1], got {p}")

    @classmethod
    def uniform(cls, r_s: float, sources, task: str = "ctr", p_x: float = 1.0, **kw) -> "SamplingConfig":
        return cls(r_s=r_s, p_x_by_source={(task, s): p_x for s in sources}, **kw)

    def p_x_table(self, task: str, source_tags) -> np.ndarray:
        try:
            return np.array([self.p_x_by_source[(task, s)] for s in source_tags], dtype=np.float64)
        except KeyError as exc:
            raise ConfigError(f"no p_x entry for (task, source) = {exc.args[0]}") from None

    def debias_params(self, task: str, events: EventBatch) -> DebiasParams:
        p_x = self.p_x_table(task, events.source_tags)[events.source]
        return DebiasParams(self.r_s, self.r_plus, p_x, self.b_s)


@dataclass
class SampledBatch:
    kept: EventBatch
    kept_mask: np.ndarray
    kept_negative_count: int
    dropped_negative_count: int
    kept_positive_count: int
    dropped_positive_count: int


def apply_sampling(events: EventBatch, sampling: SamplingConfig, task: str, seed) -> SampledBatch:
    p_pos = sampling.p_x_table(task, events.source_tags)[events.source]
    keep_prob = np.where(events.label == 1, p_pos, 1.0 / sampling.r_s)
    rng = np.random.default_rng(seed)
    kept = rng.random(len(events)) < keep_prob
    pos = events.label == 1
    return SampledBatch(
        events.subset(kept),
        kept,
        int(np.sum(kept & ~pos)),
        int(np.sum(~kept & ~pos)),
        int(np.sum(kept & pos)),
        int(np.sum(~kept & pos)),
    )


def write_events(path, events: EventBatch) -> None:
    """Line-delimited dump: sample_id,step,traffic_source,label,true_posterior,f0..f{d-1}."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        tags = events.source_tags
        for i in range(len(events)):
            writer.writerow(
                [int(events.sample_id[i]), int(events.step[i]), tags[int(events.source[i])],
                 int(events.label[i]), f"{events.true_posterior[i]:.9g}"]
                + [f"{v:.9g}" for v in events.features[i]]
            )


def read_events(path, source_tags) -> EventBatch:
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    index = {t: i for i, t in enumerate(source_tags)}
    n = len(rows)
    d = len(rows[0]) - 5 if rows else 0
    out = EventBatch(
        np.array([int(r[0]) for r in rows], dtype=np.int64),
        np.array([int(r[1]) for r in rows], dtype=np.int64),
        np.array([[float(v) for v in r[5:]] for r in rows], dtype=np.float64).reshape(n, d),
        np.array([int(r[3]) for r in rows], dtype=np.int8),
        np.array([index[r[2]] for r in rows], dtype=np.int16),
        np.array([float(r[4]) for r in rows], dtype=np.float64),
        tuple(source_tags),
    )
    return out
