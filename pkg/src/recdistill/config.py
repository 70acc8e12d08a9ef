"""Flat ``section.key = value`` config files for :class:`ExperimentSpec`.

Every spec field has a key. Arms and teacher variants are listed by name
(``experiment.arms``, ``experiment.teacher_variants``) and their fields live
under ``arm.<name>.`` and ``variant.<name>.``. Unknown keys are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Mapping, Optional

from .datagen import GeneratorConfig, SamplingConfig
from .errors import ConfigError
from .models import StudentSpec, TeacherSpec
from .pipeline import (
    ArmSpec,
    ExperimentSpec,
    FaultSchedule,
    LossSettings,
    ModeFlags,
    Schedule,
    TeacherVariant,
)
from .signal_store import JoinConfig

# generator.seed is replaced by the run seed; input dims follow feature_dim
_GENERATOR_SKIP = ("seed",)
_SPEC_SKIP = ("input_dim",)
# the student's tower layout is set by flags.decoupled
_ARM_STUDENT_SKIP = ("input_dim", "decoupled")


# -- value formatting --------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str, key: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}", key)


def _parse_like(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            return _parse_bool(text, key)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            value = float(text)
            if math.isnan(value):
                raise ValueError
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}", key) from None
    return text


def _optional_str(text: str) -> Optional[str]:
    return None if text.lower() in ("none", "") else text


def _alpha(text: str, key: str, allow_default: bool = False):
    low = text.lower()
    if low == "auto":
        return "auto"
    if allow_default and low == "default":
        return None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected 'auto' or a number, got {text!r}", key) from None


def _fmt_sources(sources) -> str:
    return ",".join(f"{name}:{_fmt(p)}" for name, p in sources)


def _parse_sources(text: str, key: str) -> tuple:
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, p = part.rpartition(":")
        if not sep or not name:
            raise ConfigError(f"{key}: expected name:probability pairs, got {part!r}", key)
        out.append((name.strip(), _parse_like(p.strip(), 1.0, key)))
    return tuple(out)


def _fmt_p_x(table: Mapping) -> str:
    return ",".join(f"{task}/{source}:{_fmt(p)}" for (task, source), p in table.items())


def _parse_p_x(text: str, key: str) -> dict:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        pair, sep, p = part.rpartition(":")
        task, slash, source = pair.partition("/")
        if not sep or not slash:
            raise ConfigError(f"{key}: expected task/source:p entries, got {part!r}", key)
        out[(task.strip(), source.strip())] = _parse_like(p.strip(), 1.0, key)
    return out


def _names(text: str) -> list[str]:
    return [n.strip() for n in text.split(",") if n.strip()]


# -- spec -> flat ------------------------------------------------------------


def _plain(prefix: str, obj, skip=()) -> dict[str, str]:
    return {
        f"{prefix}.{f.name}": _fmt(getattr(obj, f.name))
        for f in dataclasses.fields(obj)
        if f.name not in skip
    }


def _sampling_flat(prefix: str, s: SamplingConfig) -> dict[str, str]:
    return {
        f"{prefix}.r_s": _fmt(float(s.r_s)),
        f"{prefix}.r_plus": _fmt(float(s.r_plus)),
        f"{prefix}.b_s": _fmt(float(s.b_s)),
        f"{prefix}.p_x": _fmt_p_x(s.p_x_by_source),
    }


def to_flat(spec: ExperimentSpec) -> dict[str, str]:
    """Every field of ``spec`` as ``key -> text``; :func:`from_flat` inverts it."""
    out = {
        "experiment.name": spec.name,
        "experiment.task": spec.task,
        "experiment.seeds": ",".join(str(s) for s in spec.seeds),
        "experiment.arms": ",".join(a.name for a in spec.arms),
        "experiment.teacher_variants": ",".join(v.name for v in spec.teacher_variants),
        "experiment.materialize_dir": _fmt(spec.materialize_dir),
        "experiment.teacher_cache_dir": _fmt(spec.teacher_cache_dir),
    }
    g = spec.generator
    for f in dataclasses.fields(g):
        if f.name in _GENERATOR_SKIP:
            continue
        value = getattr(g, f.name)
        if f.name == "traffic_sources":
            out["generator.traffic_sources"] = _fmt_sources(value)
        elif f.name == "base_weights":
            out["generator.base_weights"] = "none" if value is None else ",".join(_fmt(w) for w in value)
        else:
            out[f"generator.{f.name}"] = _fmt(value)
    out.update(_plain("teacher", spec.teacher, _SPEC_SKIP))
    out["teacher.learning_rate"] = _fmt(float(spec.teacher_lr))
    out["teacher.epoch_steps"] = _fmt(spec.teacher_epoch_steps)
    out["teacher.data_multiplier"] = _fmt(spec.teacher_data_multiplier)
    out.update(_sampling_flat("teacher_sampling", spec.teacher_sampling))
    out.update(_sampling_flat("student_sampling", spec.student_sampling))
    out["student.learning_rate"] = _fmt(float(spec.student_lr))
    loss = spec.loss
    out["loss.alpha"] = _fmt(loss.alpha if isinstance(loss.alpha, str) else float(loss.alpha))
    out["loss.tau"] = _fmt(float(loss.tau))
    out["loss.alpha_window"] = _fmt(loss.alpha_window)
    out["loss.alpha_basis"] = loss.alpha_basis
    out.update(_plain("join", spec.join))
    out.update(_plain("schedule", spec.schedule))
    for arm in spec.arms:
        p = f"arm.{arm.name}"
        out.update(_plain(f"{p}.student", arm.student, _ARM_STUDENT_SKIP))
        out.update(_plain(f"{p}.flags", arm.flags))
        out.update(_plain(f"{p}.fault", arm.fault))
        out[f"{p}.alpha"] = "default" if arm.alpha is None else _fmt(
            arm.alpha if isinstance(arm.alpha, str) else float(arm.alpha)
        )
    for v in spec.teacher_variants:
        p = f"variant.{v.name}"
        out[f"{p}.data_multiplier"] = _fmt(v.data_multiplier)
        out[f"{p}.sampling"] = "inherit" if v.sampling is None else "custom"
        if v.sampling is not None:
            out.update(_sampling_flat(f"{p}.sampling", v.sampling))
    return out


def to_text(spec: ExperimentSpec) -> str:
    """Resolved config snapshot, one ``key = value`` per line."""
    flat = to_flat(spec)
    return "".join(f"{k} = {v}\n" for k, v in flat.items())


# -- flat -> spec ------------------------------------------------------------


class _Reader:
    """Pops keys as they are consumed so leftovers can be reported as unknown."""

    def __init__(self, flat: Mapping[str, str]):
        self.left = dict(flat)

    def take(self, key: str) -> Optional[str]:
        return self.left.pop(key, None)

    def dataclass(self, prefix: str, cls, base, skip=()):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            text = self.take(f"{prefix}.{f.name}")
            if text is None:
                continue
            kwargs[f.name] = _parse_like(text, getattr(base, f.name), f"{prefix}.{f.name}")
        try:
            return dataclasses.replace(base, **kwargs)
        except ConfigError as exc:
            raise ConfigError(f"{prefix}: {exc}", exc.key or prefix) from None

    def sampling(self, prefix: str, base: SamplingConfig) -> SamplingConfig:
        kwargs = {}
        for name in ("r_s", "r_plus", "b_s"):
            text = self.take(f"{prefix}.{name}")
            if text is not None:
                kwargs[name] = _parse_like(text, 1.0, f"{prefix}.{name}")
        text = self.take(f"{prefix}.p_x")
        if text is not None:
            kwargs["p_x_by_source"] = _parse_p_x(text, f"{prefix}.p_x")
        try:
            return dataclasses.replace(base, **kwargs)
        except ConfigError as exc:
            raise ConfigError(f"{prefix}: {exc}", prefix) from None


def from_flat(flat: Mapping[str, str], base: Optional[ExperimentSpec] = None) -> ExperimentSpec:
    """Build a spec from ``key -> text``; keys not given keep ``base``'s values."""
    base = base or ExperimentSpec()
    r = _Reader(flat)

    def text_or(key, default):
        t = r.take(key)
        return default if t is None else t

    name = text_or("experiment.name", base.name)
    task = text_or("experiment.task", base.task)
    seeds_text = r.take("experiment.seeds")
    try:
        seeds = base.seeds if seeds_text is None else tuple(int(s) for s in _names(seeds_text))
    except ValueError:
        raise ConfigError(f"experiment.seeds: expected integers, got {seeds_text!r}", "experiment.seeds") from None
    materialize_dir = _optional_str(text_or("experiment.materialize_dir", _fmt(base.materialize_dir)))
    cache_dir = _optional_str(text_or("experiment.teacher_cache_dir", _fmt(base.teacher_cache_dir)))

    gen_kwargs = {}
    t = r.take("generator.traffic_sources")
    if t is not None:
        gen_kwargs["traffic_sources"] = _parse_sources(t, "generator.traffic_sources")
    t = r.take("generator.base_weights")
    if t is not None:
        try:
            gen_kwargs["base_weights"] = None if t.lower() == "none" else tuple(float(w) for w in _names(t))
        except ValueError:
            raise ConfigError(f"generator.base_weights: cannot parse {t!r}", "generator.base_weights") from None
    gen_base = dataclasses.replace(base.generator, **gen_kwargs) if gen_kwargs else base.generator
    generator = r.dataclass("generator", GeneratorConfig, gen_base,
                            skip=_GENERATOR_SKIP + ("traffic_sources", "base_weights"))
    dim = generator.feature_dim

    teacher = r.dataclass("teacher", TeacherSpec, dataclasses.replace(base.teacher, input_dim=dim), _SPEC_SKIP)
    teacher_lr = _parse_like(text_or("teacher.learning_rate", _fmt(float(base.teacher_lr))), 1.0, "teacher.learning_rate")
    epoch = _parse_like(text_or("teacher.epoch_steps", str(base.teacher_epoch_steps)), 1, "teacher.epoch_steps")
    mult = _parse_like(text_or("teacher.data_multiplier", str(base.teacher_data_multiplier)), 1, "teacher.data_multiplier")
    t_sampling = r.sampling("teacher_sampling", base.teacher_sampling)
    s_sampling = r.sampling("student_sampling", base.student_sampling)
    student_lr = _parse_like(text_or("student.learning_rate", _fmt(float(base.student_lr))), 1.0, "student.learning_rate")

    alpha_text = r.take("loss.alpha")
    loss_kwargs = {}
    if alpha_text is not None:
        loss_kwargs["alpha"] = _alpha(alpha_text, "loss.alpha")
    for k, default in (("tau", 1.0), ("alpha_window", 1), ("alpha_basis", "")):
        t = r.take(f"loss.{k}")
        if t is not None:
            loss_kwargs[k] = _parse_like(t, default, f"loss.{k}")
    try:
        loss = dataclasses.replace(base.loss, **loss_kwargs)
    except ConfigError as exc:
        raise ConfigError(f"loss: {exc}", "loss") from None
    join = r.dataclass("join", JoinConfig, base.join)
    schedule = r.dataclass("schedule", Schedule, base.schedule)

    base_arms = {a.name: a for a in base.arms}
    arm_text = r.take("experiment.arms")
    arm_names = [a.name for a in base.arms] if arm_text is None else _names(arm_text)
    arms = []
    for arm_name in arm_names:
        prev = base_arms.get(arm_name, ArmSpec(arm_name))
        p = f"arm.{arm_name}"
        student = r.dataclass(f"{p}.student", StudentSpec,
                              dataclasses.replace(prev.student, input_dim=dim), _ARM_STUDENT_SKIP)
        flags = r.dataclass(f"{p}.flags", ModeFlags, prev.flags)
        fault = r.dataclass(f"{p}.fault", FaultSchedule, prev.fault)
        t = r.take(f"{p}.alpha")
        alpha = prev.alpha if t is None else _alpha(t, f"{p}.alpha", allow_default=True)
        arms.append(ArmSpec(arm_name, student, flags, fault, alpha))

    base_variants = {v.name: v for v in base.teacher_variants}
    var_text = r.take("experiment.teacher_variants")
    var_names = [v.name for v in base.teacher_variants] if var_text is None else _names(var_text)
    variants = []
    for var_name in var_names:
        prev = base_variants.get(var_name, TeacherVariant(var_name))
        p = f"variant.{var_name}"
        m = r.take(f"{p}.data_multiplier")
        vm = prev.data_multiplier if m is None else _parse_like(m, 1, f"{p}.data_multiplier")
        mode = r.take(f"{p}.sampling")
        sampling = prev.sampling
        if mode is not None:
            if mode not in ("inherit", "custom"):
                raise ConfigError(f"{p}.sampling must be inherit or custom", f"{p}.sampling")
            sampling = None if mode == "inherit" else (sampling or t_sampling)
        if sampling is not None:
            sampling = r.sampling(f"{p}.sampling", sampling)
        variants.append(TeacherVariant(var_name, vm, sampling))

    if r.left:
        key = sorted(r.left)[0]
        raise ConfigError(f"unknown config key {key!r}", key)

    try:
        return ExperimentSpec(
            name=name, generator=generator, teacher=teacher, teacher_sampling=t_sampling,
            teacher_data_multiplier=mult, teacher_lr=teacher_lr, teacher_epoch_steps=epoch,
            teacher_variants=tuple(variants), student_sampling=s_sampling, student_lr=student_lr,
            arms=tuple(arms), loss=loss, join=join, schedule=schedule, task=task, seeds=seeds,
            materialize_dir=materialize_dir, teacher_cache_dir=cache_dir,
        )
    except ConfigError as exc:
        raise ConfigError(str(exc), exc.key or "experiment") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines with ``#`` comments; repeated keys are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'", key or None)
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key)
        out[key] = value.strip()
    return out


def load_config(path, base: Optional[ExperimentSpec] = None) -> ExperimentSpec:
    path = Path(path)
    return from_flat(parse_config_text(path.read_text(encoding="utf-8"), str(path)), base)


def apply_overrides(spec: ExperimentSpec, overrides: Mapping[str, str]) -> ExperimentSpec:
    return from_flat(dict(overrides), spec)
