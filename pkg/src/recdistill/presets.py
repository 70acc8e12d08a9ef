"""Named experiment setups at desk scale.

All presets share one generator (drift switches on when streaming starts), so
teacher runs can be shared through the teacher cache wherever the teacher
side is identical.

The student sees a heavily downsampled stream (negatives kept at 1/20, 5%
positives) while the teacher trains on the full stream. That makes the
student data-limited, which is the regime where distillation has something
to transfer at desk scale: with equal data a 64-unit student matches the
teacher and the gain to distil is within eval noise.
"""

from __future__ import annotations

from dataclasses import replace

from .datagen import GeneratorConfig
from .errors import ConfigError
from .models import StudentSpec, TeacherSpec
from .pipeline import (
    ArmSpec,
    ExperimentSpec,
    ModeFlags,
    Schedule,
    TeacherVariant,
    default_sampling,
)

DESK_SCHEDULE = Schedule(
    batch_steps=4000, batch_size=512, stream_steps=4000, stream_batch_size=64, eval_every=200, eval_size=20000
)

DESK_GENERATOR = GeneratorConfig(
    feature_dim=32,
    nonlinear_scale=1.0,
    nonlinear_units=64,
    weight_norm=2.0,
    positive_rate_target=0.05,
    drift_rate=3e-4,
    drift_start_step=DESK_SCHEDULE.batch_steps,
)

DESK_TEACHER = TeacherSpec(input_dim=32, depth=3, width=256)
DESK_STUDENT = StudentSpec(input_dim=32, backbone_depth=2, backbone_width=64, tower_depth=1, tower_width=32)

TEACHER_RS = 1.0
STUDENT_RS = 20.0

SEEDS = (0, 1, 2, 3, 4)


def _single(student: StudentSpec = DESK_STUDENT) -> StudentSpec:
    return replace(student, decoupled=False)


def _base(name: str, arms, **kw) -> ExperimentSpec:
    fields = dict(
        name=name,
        generator=DESK_GENERATOR,
        teacher=DESK_TEACHER,
        teacher_sampling=default_sampling(TEACHER_RS),
        student_sampling=default_sampling(STUDENT_RS),
        arms=tuple(arms),
        schedule=DESK_SCHEDULE,
        seeds=SEEDS,
    )
    fields.update(kw)
    return ExperimentSpec(**fields)


def _main():
    return _base("main", [ArmSpec("distill", DESK_STUDENT, ModeFlags())])


def _capacity_grid():
    sizes = (("large", 64, 32), ("medium", 32, 16), ("small", 16, 8))
    return _base(
        "capacity_grid",
        [
            ArmSpec(name, replace(DESK_STUDENT, backbone_width=bw, tower_width=tw))
            for name, bw, tw in sizes
        ],
    )


def _arch_grid():
    shapes = ((4, 64), (4, 48), (2, 64), (2, 48))
    return _base(
        "arch_grid",
        [
            ArmSpec(f"depth{d}_width{w}", replace(DESK_STUDENT, backbone_depth=d, backbone_width=w))
            for d, w in shapes
        ],
    )


def _tower_ablation():
    return _base(
        "tower_ablation",
        [
            ArmSpec("single (distill)", _single(), ModeFlags(decoupled=False, aux_loss="distill")),
            ArmSpec("single (task+distill)", _single(), ModeFlags(decoupled=False, aux_loss="task+distill")),
            ArmSpec("decoupled (distill aux)", DESK_STUDENT, ModeFlags(aux_loss="distill")),
            ArmSpec("decoupled (task+distill aux)", DESK_STUDENT, ModeFlags(aux_loss="task+distill")),
        ],
    )


def _debias_ablation():
    return _base(
        "debias_ablation",
        [
            ArmSpec("w/o debias", DESK_STUDENT, ModeFlags(teacher_rebias=False)),
            ArmSpec("with debias", DESK_STUDENT, ModeFlags(teacher_rebias=True)),
        ],
        teacher_sampling=default_sampling(10.0),
        student_sampling=default_sampling(2.0),
    )


def _stream_ablation():
    return _base(
        "stream_ablation",
        [
            ArmSpec("w/o stream", DESK_STUDENT, ModeFlags(stream_distill=False)),
            ArmSpec("with stream", DESK_STUDENT, ModeFlags(stream_distill=True)),
        ],
    )


def _batch_ablation():
    return _base(
        "batch_ablation",
        [
            ArmSpec("stream only", DESK_STUDENT, ModeFlags(batch_distill=False)),
            ArmSpec("batch+stream", DESK_STUDENT, ModeFlags()),
        ],
    )


def _data_scaling():
    return _base(
        "data_scaling",
        [ArmSpec("distill", DESK_STUDENT, ModeFlags())],
        teacher_variants=(
            TeacherVariant("w/o data scaling", 1),
            TeacherVariant("with data scaling", 2),
        ),
    )


def _mse_vs_ce():
    return _base(
        "mse_vs_ce",
        [
            ArmSpec("mse", DESK_STUDENT, ModeFlags(metric="mse")),
            ArmSpec("ce", DESK_STUDENT, ModeFlags(metric="ce")),
        ],
    )


def _alpha_sweep():
    arms = [ArmSpec(f"alpha {a:g}", DESK_STUDENT, ModeFlags(), alpha=float(a)) for a in (1, 3, 10, 30, 100)]
    arms.append(ArmSpec("alpha auto", DESK_STUDENT, ModeFlags(), alpha="auto"))
    return _base("alpha_sweep", arms)


def _fanout():
    return _base(
        "fanout_1toN",
        [
            ArmSpec("student a", DESK_STUDENT),
            ArmSpec("student b", DESK_STUDENT),
            ArmSpec("student c", replace(DESK_STUDENT, backbone_width=32, tower_width=16)),
        ],
    )


_PRESETS = {
    "main": _main,
    "capacity_grid": _capacity_grid,
    "arch_grid": _arch_grid,
    "tower_ablation": _tower_ablation,
    "debias_ablation": _debias_ablation,
    "stream_ablation": _stream_ablation,
    "batch_ablation": _batch_ablation,
    "data_scaling": _data_scaling,
    "mse_vs_ce": _mse_vs_ce,
    "alpha_sweep": _alpha_sweep,
    "fanout_1toN": _fanout,
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> ExperimentSpec:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESET_NAMES)}", "preset") from None
