"""Hybrid batch/streaming distillation runs.

One run = one seed x one teacher variant. The teacher trains on its own
(optionally larger, differently sampled) slice of the stream and writes a raw
logit for every event of the shared student stream into a
:class:`SignalStore` during its forward pass, before updating on that batch.
Every student arm, plus one non-distilled baseline per student architecture,
reads the same student stream, so arms differ only in their flagged factor.

Batch phase: the teacher passes over all batch steps first, then the students
pass over the same steps reading the stored signals. Streaming phase: per
step, the teacher emits then updates, the join releases samples once their
signal is visible (or retries run out), and students train on what was
released.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import tempfile
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .datagen import (
    STREAM_HOLDOUT,
    STREAM_TEACHER_EXTRA,
    STREAM_TRAIN,
    EventBatch,
    GeneratorConfig,
    SamplingConfig,
    apply_sampling,
    generate_events,
)
from .errors import ConfigError, NumericError
from .losses import (
    DebiasParams,
    LossWeights,
    align_alpha,
    binary_entropy,
    debias,
    distill_ce,
    distill_mse,
    kd_debias_loss,
    task_loss,
)
from .metrics import MetricsReport, auc, calibration_mae, gain_decomposition
from .models import (
    StudentModel,
    StudentSpec,
    TeacherModel,
    TeacherSpec,
    build_student,
    build_teacher,
    student_backward,
    student_forward,
    student_optimizers,
)
from .numerics import AdamState, ForwardCache, mlp_backward, mlp_forward, optimizer_step
from .signal_store import JoinConfig, JoinedBatch, SignalStore, join_batch, materialize, quantize_logit

log = logging.getLogger(__name__)

TEACHER_CACHE_ENV = "RECDISTILL_TEACHER_CACHE"

AUX_LOSSES = ("task+distill", "distill")
METRICS = ("ce", "mse")


def default_sampling(r_s: float, task: str = "ctr", sources=("organic", "ads")) -> SamplingConfig:
    """Negative downsampling at rate ``r_s`` with every positive kept."""
    return SamplingConfig.uniform(r_s, sources, task)


@dataclass(frozen=True)
class FaultSchedule:
    """Replace signals emitted in ``[start, end]`` with Gaussian noise for one arm."""

    start: int = -1
    end: int = -1
    scale: float = 3.0
    detect: bool = False

    @property
    def active(self) -> bool:
        return self.start >= 0 and self.end >= self.start


@dataclass(frozen=True)
class ModeFlags:
    distill: bool = True
    decoupled: bool = True
    aux_loss: str = "task+distill"
    debias: bool = True
    teacher_rebias: bool = True
    stream_distill: bool = True
    batch_distill: bool = True
    metric: str = "ce"
    debias_grad: str = "full"

    def __post_init__(self):
        if self.aux_loss not in AUX_LOSSES:
            raise ConfigError(f"aux_loss must be one of {AUX_LOSSES}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.debias_grad not in ("full", "posthoc"):
            raise ConfigError("debias_grad must be full or posthoc")


@dataclass(frozen=True)
class ArmSpec:
    name: str
    student: StudentSpec = field(default_factory=StudentSpec)
    flags: ModeFlags = field(default_factory=ModeFlags)
    fault: FaultSchedule = field(default_factory=FaultSchedule)
    # None -> experiment-level loss.alpha
    alpha: Optional[Union[float, str]] = None

    def __post_init__(self):
        # the tower layout is a mode flag; the student spec follows it
        if self.student.decoupled != self.flags.decoupled:
            object.__setattr__(self, "student", replace(self.student, decoupled=self.flags.decoupled))
        if not isinstance(self.fault, FaultSchedule):
            raise ConfigError(f"arm {self.name}: fault must be a FaultSchedule, got {self.fault!r}")
        if isinstance(self.alpha, str) and self.alpha != "auto":
            raise ConfigError(f"arm {self.name}: alpha must be 'auto', a number or None")
        for bad in ".,=#\n":
            if bad in self.name:
                raise ConfigError(f"arm name {self.name!r} may not contain {bad!r}")


@dataclass(frozen=True)
class TeacherVariant:
    name: str = ""
    data_multiplier: int = 1
    sampling: Optional[SamplingConfig] = None

    def __post_init__(self):
        if self.data_multiplier < 1:
            raise ConfigError(f"variant {self.name}: data multiplier must be >= 1")
        for bad in ".,=#|\n":
            if bad in self.name:
                raise ConfigError(f"variant name {self.name!r} may not contain {bad!r}")


@dataclass(frozen=True)
class LossSettings:
    alpha: Union[float, str] = "auto"
    tau: float = 1.0
    alpha_window: int = 50
    # "kl": distillation magnitude measured as CE minus target entropy
    alpha_basis: str = "kl"

    def __post_init__(self):
        if isinstance(self.alpha, str) and self.alpha != "auto":
            raise ConfigError(f"loss.alpha must be 'auto' or a number, got {self.alpha!r}")
        if not isinstance(self.alpha, str):
            LossWeights(float(self.alpha), self.tau)
        if self.alpha_window < 1:
            raise ConfigError("alpha_window must be >= 1")
        if self.alpha_basis not in ("kl", "ce"):
            raise ConfigError("alpha_basis must be kl or ce")


@dataclass(frozen=True)
class Schedule:
    batch_steps: int = 4000
    batch_size: int = 512
    stream_steps: int = 4000
    stream_batch_size: int = 64
    eval_every: int = 200
    eval_size: int = 20000

    def __post_init__(self):
        for k in ("batch_steps", "stream_steps"):
            if getattr(self, k) < 0:
                raise ConfigError(f"schedule.{k} must be >= 0")
        for k in ("batch_size", "stream_batch_size", "eval_every", "eval_size"):
            if getattr(self, k) < 1:
                raise ConfigError(f"schedule.{k} must be >= 1")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "custom"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    teacher_sampling: SamplingConfig = field(default_factory=lambda: default_sampling(1.0))
    teacher_data_multiplier: int = 1
    teacher_lr: float = 1e-3
    teacher_epoch_steps: int = 100
    teacher_variants: tuple = ()
    student_sampling: SamplingConfig = field(default_factory=lambda: default_sampling(1.0))
    student_lr: float = 1e-3
    arms: tuple = (ArmSpec("distill"),)
    loss: LossSettings = field(default_factory=LossSettings)
    join: JoinConfig = field(default_factory=JoinConfig)
    schedule: Schedule = field(default_factory=Schedule)
    task: str = "ctr"
    seeds: tuple = (0, 1, 2, 3, 4)
    materialize_dir: Optional[str] = None
    teacher_cache_dir: Optional[str] = None

    def __post_init__(self):
        if not self.arms:
            raise ConfigError("an experiment needs at least one student arm")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate arm names {names}")
        if self.teacher_data_multiplier < 1:
            raise ConfigError("teacher data multiplier must be >= 1")
        if self.teacher_epoch_steps < 1:
            raise ConfigError("teacher_epoch_steps must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for arm in self.arms:
            if arm.student.input_dim != self.generator.feature_dim:
                raise ConfigError(f"arm {arm.name}: student input_dim != feature_dim")
        if self.teacher.input_dim != self.generator.feature_dim:
            raise ConfigError("teacher input_dim != feature_dim")
        tags = self.generator.source_tags
        self.teacher_sampling.p_x_table(self.task, tags)
        self.student_sampling.p_x_table(self.task, tags)

    def variants(self) -> list[TeacherVariant]:
        if self.teacher_variants:
            return list(self.teacher_variants)
        return [TeacherVariant("", self.teacher_data_multiplier, None)]

    def arm_label(self, variant: TeacherVariant, arm: ArmSpec) -> str:
        if not variant.name:
            return arm.name
        if len(self.arms) == 1:
            return variant.name
        return f"{variant.name}|{arm.name}"


# -- run state ---------------------------------------------------------------


@dataclass
class ArmState:
    spec: ArmSpec
    label: str
    model: StudentModel
    opt: dict
    baseline_key: tuple
    alpha: Optional[float] = None
    window_task: list = field(default_factory=list)
    window_distill: list = field(default_factory=list)
    seen: int = 0
    missing: int = 0
    main_tapes: Optional[list] = None


@dataclass
class BaselineState:
    model: StudentModel
    opt: dict


@dataclass
class PhaseState:
    phase: str
    step: int
    teacher_version: int
    seed: int
    variant: TeacherVariant
    teacher: TeacherModel
    teacher_opt: AdamState
    teacher_sampling: SamplingConfig
    store: SignalStore
    arms: list
    baselines: dict
    report: MetricsReport
    teacher_auc: dict = field(default_factory=dict)
    pending: deque = field(default_factory=deque)
    record_main_tapes: bool = False
    teacher_updates: int = 0
    generator: Optional[GeneratorConfig] = None
    # signals and teacher AUCs came from the teacher cache; teacher weights stay at init
    teacher_cached: bool = False


def _resolve_generator(spec: ExperimentSpec, seed: int) -> GeneratorConfig:
    return replace(spec.generator, seed=int(seed))


def init_state(spec: ExperimentSpec, seed: int, variant: Optional[TeacherVariant] = None,
               record_main_tapes: bool = False) -> PhaseState:
    variant = variant or spec.variants()[0]
    t_sampling = variant.sampling or spec.teacher_sampling
    teacher = build_teacher(spec.teacher, [int(seed), 200], t_sampling)
    arms, baselines = [], {}
    student_seed = [int(seed), 100]
    for arm in spec.arms:
        model = build_student(arm.student, student_seed, spec.student_sampling)
        key = arm.student.key()
        if key not in baselines:
            base = build_student(replace(arm.student, decoupled=False), student_seed, spec.student_sampling)
            baselines[key] = BaselineState(base, student_optimizers(base, spec.student_lr))
        alpha = None if _arm_alpha(spec, arm) == "auto" else float(_arm_alpha(spec, arm))
        arms.append(
            ArmState(arm, spec.arm_label(variant, arm), model, student_optimizers(model, spec.student_lr),
                     key, alpha, main_tapes=[] if record_main_tapes else None)
        )
    state = PhaseState(
        "batch", 0, 0, int(seed), variant, teacher,
        AdamState.for_params(teacher.net, spec.teacher_lr), t_sampling,
        SignalStore(spec.join.availability_lag), arms, baselines, MetricsReport(spec.name),
        record_main_tapes=record_main_tapes,
    )
    state.generator = _resolve_generator(spec, seed)
    return state


def _arm_alpha(spec: ExperimentSpec, arm: ArmSpec):
    return spec.loss.alpha if arm.alpha is None else arm.alpha


# -- teacher -----------------------------------------------------------------


def _teacher_step(spec: ExperimentSpec, state: PhaseState, step: int, n: int) -> None:
    """Forward on everything, persist signals for the shared stream, then update."""
    gen = state.generator
    shared = generate_events(gen, step, n, STREAM_TRAIN)
    extra_n = (state.variant.data_multiplier - 1) * n
    events = shared if extra_n == 0 else EventBatch.concat(
        [shared, generate_events(gen, step, extra_n, STREAM_TEACHER_EXTRA)]
    )
    logits, cache = mlp_forward(state.teacher.net, events.features)
    state.store.append_batch(shared.sample_id, state.teacher.version, quantize_logit(logits[:n]), step)

    sampled = apply_sampling(events, state.teacher_sampling, spec.task, [state.seed, 11, step])
    idx = np.nonzero(sampled.kept_mask)[0]
    if idx.size:
        loss = task_loss(logits[idx], events.label[idx]).mean()
        if not math.isfinite(loss.value):
            raise NumericError(f"teacher loss diverged at step {step}")
        sub = ForwardCache([a[idx] for a in cache.inputs],
                           [None if m is None else m[idx] for m in cache.masks], False, 1)
        tape = mlp_backward(state.teacher.net, sub, loss.dL_dz)
        optimizer_step(state.teacher.net, tape, state.teacher_opt)
    state.teacher_updates += 1
    if state.teacher_updates % spec.teacher_epoch_steps == 0:
        state.teacher.bump_version()
    state.teacher_version = state.teacher.version


# -- students ----------------------------------------------------------------


def _distill_term(spec: ExperimentSpec, arm: ArmState, t1, z, d_student: DebiasParams,
                  d_teacher: DebiasParams):
    flags = arm.spec.flags
    if flags.debias:
        target_d = None if flags.teacher_rebias else d_teacher
        lv = kd_debias_loss(t1, z, d_student, flags.metric, target_d, flags.debias_grad)
        target = debias(t1, d_student if target_d is None else target_d)
    else:
        target = expit(t1)
        lv = distill_ce(target, z) if flags.metric == "ce" else distill_mse(target, z)
    if spec.loss.alpha_basis == "kl" and flags.metric == "ce":
        magnitude = lv.value - binary_entropy(target)
    else:
        magnitude = lv.value
    return lv, magnitude


def _sub_debias(d: DebiasParams, idx) -> DebiasParams:
    p_x = np.asarray(d.p_x)
    return DebiasParams(d.r_s, d.r_plus, p_x[idx] if p_x.ndim else p_x, d.b_s)


def _train_baseline(spec: ExperimentSpec, base: BaselineState, events: EventBatch) -> None:
    fwd = student_forward(base.model, events.features)
    g = task_loss(fwd.outputs.z_main, events.label).dL_dz / len(events)
    tape = student_backward(base.model, fwd, g)
    for k, block in base.model.blocks().items():
        optimizer_step(block, tape.blocks()[k], base.opt[k])


def _train_arm(spec: ExperimentSpec, state: PhaseState, arm: ArmState, batch: JoinedBatch,
               phase: str, step: int) -> None:
    flags = arm.spec.flags
    events = batch.events
    n = len(events)
    model = arm.model
    fwd = student_forward(model, events.features)
    y = events.label
    z_main = fwd.outputs.z_main
    z_aux = fwd.outputs.z_aux

    distill_phase = flags.batch_distill if phase == "batch" else flags.stream_distill
    distill_on = flags.distill and distill_phase
    has = batch.has_signal.copy()
    t1 = batch.t1_logit.copy()
    fault = arm.spec.fault
    if fault.active and distill_on:
        hit = has & (batch.emit_step >= fault.start) & (batch.emit_step <= fault.end)
        if hit.any():
            if fault.detect:
                has &= ~hit
            else:
                rng = np.random.default_rng([state.seed, 33, step])
                t1[hit] = rng.normal(0.0, fault.scale, size=int(hit.sum()))
    if distill_on:
        arm.seen += n
        arm.missing += int(n - has.sum())

    g_distill = np.zeros(n)
    use = np.nonzero(has)[0] if distill_on else np.zeros(0, dtype=np.int64)
    target_z = z_aux if model.decoupled else z_main
    if use.size:
        d_student = _sub_debias(spec.student_sampling.debias_params(spec.task, events), use)
        d_teacher = _sub_debias(state.teacher_sampling.debias_params(spec.task, events), use)
        lv, magnitude = _distill_term(spec, arm, t1[use], target_z[use], d_student, d_teacher)
        g_distill[use] = lv.dL_dz
        if arm.alpha is None:
            task_vals = task_loss(target_z, y).value
            arm.window_task.append(float(np.mean(task_vals)))
            arm.window_distill.append(float(np.sum(magnitude) / n))
    alpha = 1.0 if arm.alpha is None else arm.alpha

    task_grad_main = task_loss(z_main, y).dL_dz
    if model.decoupled:
        d_main = task_grad_main / n
        if flags.distill:
            d_aux = alpha * g_distill
            if flags.aux_loss == "task+distill":
                d_aux = d_aux + task_loss(z_aux, y).dL_dz
            d_aux = d_aux / n
        else:
            d_aux = np.zeros(n)
    else:
        d_aux = None
        d_main = alpha * g_distill
        if flags.aux_loss == "task+distill" or not flags.distill:
            d_main = d_main + task_grad_main
        d_main = d_main / n

    tape = student_backward(model, fwd, d_main, d_aux)
    if arm.main_tapes is not None:
        arm.main_tapes.append(tape.main.flat())
    try:
        for k, block in model.blocks().items():
            optimizer_step(block, tape.blocks()[k], arm.opt[k])
    except NumericError as exc:
        raise NumericError(f"arm {arm.label!r} diverged at step {step}: {exc}") from None

    if arm.alpha is None and len(arm.window_task) >= spec.loss.alpha_window:
        arm.alpha = align_alpha(arm.window_task, arm.window_distill)
        log.info("arm %s: alpha frozen at %.4g", arm.label, arm.alpha)


def _train_students(spec: ExperimentSpec, state: PhaseState, batch: JoinedBatch, phase: str, step: int) -> None:
    if len(batch) == 0:
        return
    for base in state.baselines.values():
        _train_baseline(spec, base, batch.events)
    for arm in state.arms:
        _train_arm(spec, state, arm, batch, phase, step)


# -- evaluation --------------------------------------------------------------


def _holdout(spec: ExperimentSpec, state: PhaseState, step: int) -> EventBatch:
    return generate_events(state.generator, step, spec.schedule.eval_size, STREAM_HOLDOUT)


def _eval_teacher(spec: ExperimentSpec, state: PhaseState, step: int) -> None:
    ev = _holdout(spec, state, step)
    z, _ = mlp_forward(state.teacher.net, ev.features)
    state.teacher_auc[step] = auc(ev.label, z)


def _eval_students(spec: ExperimentSpec, state: PhaseState, step: int) -> None:
    ev = _holdout(spec, state, step)
    p_t = state.teacher_auc[step]
    base_auc = {}
    for key, base in state.baselines.items():
        out = student_forward(base.model, ev.features).outputs
        base_auc[key] = auc(ev.label, out.z_main)
    d_student = spec.student_sampling.debias_params(spec.task, ev)
    rep = state.report
    for arm in state.arms:
        out = student_forward(arm.model, ev.features).outputs
        main = auc(ev.label, out.z_main)
        aux = auc(ev.label, out.z_aux) if out.z_aux is not None else math.nan
        raw = base_auc[arm.baseline_key]
        gain_scale, eta, gain_distill = gain_decomposition(p_t, raw, main)
        calib = calibration_mae(debias(out.z_main, d_student), ev.true_posterior)
        missing = arm.missing / arm.seen if arm.seen else 0.0
        arm.seen = arm.missing = 0
        for metric, value in (
            ("auc_teacher", p_t),
            ("auc_student_raw", raw),
            ("auc_student_distill_main", main),
            ("auc_student_distill_aux", aux),
            ("eta", eta),
            ("gain_scale", gain_scale),
            ("gain_distill", gain_distill),
            ("missing_signal_frac", missing),
            ("calibration_mae", calib),
        ):
            rep.add(arm.label, state.seed, step, metric, value)


def _is_eval_step(spec: ExperimentSpec, phase_step: int) -> bool:
    return (phase_step + 1) % spec.schedule.eval_every == 0


# -- phases ------------------------------------------------------------------


def run_batch_phase(spec: ExperimentSpec, state: PhaseState) -> PhaseState:
    if state.phase != "batch":
        raise ValueError("run_batch_phase needs a state in the batch phase")
    sched = spec.schedule
    for t in range(sched.batch_steps):
        if state.teacher_cached:
            break
        _teacher_step(spec, state, t, sched.batch_size)
        if _is_eval_step(spec, t):
            _eval_teacher(spec, state, t)
    if spec.materialize_dir and sched.batch_steps:
        label = state.variant.name.replace("/", "_").replace(" ", "_") or "teacher"
        materialize(state.store, (0, sched.batch_steps),
                    Path(spec.materialize_dir) / f"{spec.name}_{label}_seed{state.seed}_batch.signals")

    # signals are read back from the store; everything is visible by now
    batch_join = JoinConfig(availability_lag=0, max_retries=0, retry_delay=1,
                            missing_policy=spec.join.missing_policy)
    for t in range(sched.batch_steps):
        raw = generate_events(state.generator, t, sched.batch_size, STREAM_TRAIN)
        kept = apply_sampling(raw, spec.student_sampling, spec.task, [state.seed, 22, t]).kept
        joined = join_batch(state.store, kept, batch_join, clock=t)
        _train_students(spec, state, joined, "batch", t)
        if _is_eval_step(spec, t):
            _eval_students(spec, state, t)
    state.phase = "streaming"
    state.step = sched.batch_steps
    return state


def run_streaming_phase(spec: ExperimentSpec, state: PhaseState) -> PhaseState:
    if state.phase != "streaming":
        raise ValueError("run_streaming_phase needs a state in the streaming phase")
    sched = spec.schedule
    start = state.step
    for k in range(sched.stream_steps):
        t = start + k
        if not state.teacher_cached:
            _teacher_step(spec, state, t, sched.stream_batch_size)
        raw = generate_events(state.generator, t, sched.stream_batch_size, STREAM_TRAIN)
        kept = apply_sampling(raw, spec.student_sampling, spec.task, [state.seed, 22, t]).kept
        if len(kept):
            state.pending.append(join_batch(state.store, kept, spec.join, clock=t))
        ready = _release(state, t)
        if ready is not None:
            _train_students(spec, state, ready, "streaming", t)
        if _is_eval_step(spec, k):
            if not state.teacher_cached:
                _eval_teacher(spec, state, t)
            _eval_students(spec, state, t)
        state.step = t + 1
    return state


def _release(state: PhaseState, t: int) -> Optional[JoinedBatch]:
    """Pop every pending sample whose join completes at or before ``t``, in event order."""
    parts = []
    keep = deque()
    while state.pending:
        jb = state.pending.popleft()
        due = jb.join_step <= t
        if due.all():
            parts.append(jb)
        elif due.any():
            parts.append(jb.subset(due))
            keep.append(jb.subset(~due))
        else:
            keep.append(jb)
    state.pending = keep
    if not parts:
        return None
    if len(parts) == 1:
        return parts[0]
    return JoinedBatch(
        EventBatch.concat([p.events for p in parts]),
        *(np.concatenate([getattr(p, f) for p in parts])
          for f in ("has_signal", "t1_logit", "teacher_version", "emit_step", "retries_used", "join_step")),
    )


# -- teacher cache -----------------------------------------------------------
#
# The teacher's trajectory depends only on the generator, its own spec,
# sampling and data volume, and the schedule. Presets that share those can
# reuse one teacher run: the cache holds every emitted signal and the
# teacher's eval AUCs. Students read the signals through the same visibility
# rules, so a cached run is bit-identical to a fresh one.

_CACHE_FORMAT = 1


def teacher_cache_path(spec: ExperimentSpec, state: PhaseState) -> Optional[Path]:
    root = spec.teacher_cache_dir or os.environ.get(TEACHER_CACHE_ENV)
    if not root:
        return None
    key = repr((
        _CACHE_FORMAT, state.generator, spec.teacher, state.teacher_sampling,
        state.variant.data_multiplier, spec.teacher_lr, spec.teacher_epoch_steps,
        spec.schedule, spec.task, state.seed,
    ))
    digest = hashlib.sha256(key.encode()).hexdigest()[:24]
    return Path(root) / f"teacher_{digest}.npz"


def _load_teacher_cache(state: PhaseState, path: Path) -> None:
    with np.load(path) as data:
        store = SignalStore(state.store.availability_lag)
        store.append_batch(data["ids"], data["versions"], data["logits"], data["emit"])
        state.store = store
        state.teacher_auc = {int(k): float(v) for k, v in zip(data["auc_steps"], data["auc_values"])}
        state.teacher.version = int(data["version"])
    state.teacher_version = state.teacher.version
    state.teacher_cached = True


def _save_teacher_cache(state: PhaseState, path: Path) -> None:
    ids, versions, logits, emit = state.store.columns()
    steps = sorted(state.teacher_auc)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, ids=ids, versions=versions, logits=logits, emit=emit,
                 auc_steps=np.array(steps, dtype=np.int64),
                 auc_values=np.array([state.teacher_auc[k] for k in steps]),
                 version=np.int64(state.teacher.version))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def run_seed(spec: ExperimentSpec, seed: int, variant: Optional[TeacherVariant] = None,
             record_main_tapes: bool = False) -> PhaseState:
    state = init_state(spec, seed, variant, record_main_tapes)
    cache = teacher_cache_path(spec, state)
    if cache is not None and cache.exists():
        _load_teacher_cache(state, cache)
        log.info("seed %d: teacher signals loaded from %s", seed, cache)
    run_batch_phase(spec, state)
    run_streaming_phase(spec, state)
    if cache is not None and not state.teacher_cached:
        _save_teacher_cache(state, cache)
    return state


def run_experiment(spec: ExperimentSpec, workers: int = 1, seeds: Optional[Sequence[int]] = None) -> MetricsReport:
    """Train teacher, baselines and every arm for each seed and teacher variant."""
    seeds = list(spec.seeds if seeds is None else seeds)
    jobs = [(s, v) for s in seeds for v in spec.variants()]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            states = list(pool.map(lambda job: run_seed(spec, *job), jobs))
    else:
        states = [run_seed(spec, s, v) for s, v in jobs]
    report = MetricsReport(spec.name)
    for st in states:
        report.extend(st.report)
    return report
