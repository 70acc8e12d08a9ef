from __future__ import annotations

import numpy as np
import pytest

from recdistill.datagen import GeneratorConfig, generate_events
from recdistill.errors import ConfigError, ShapeError
from recdistill.losses import DebiasParams, kd_debias_loss, task_loss
from recdistill.models import (
    StudentSpec,
    TeacherSpec,
    build_student,
    build_teacher,
    load_checkpoint,
    partition_params,
    quantize_params,
    save_checkpoint,
    student_backward,
    student_forward,
    teacher_forward,
)
from recdistill.presets import preset

SPEC = StudentSpec(input_dim=6, backbone_depth=2, backbone_width=8, tower_depth=1, tower_width=5)


def _x(n=12, d=6, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


def _flat_tape(model, x, d_main, d_aux):
    fwd = student_forward(model, x)
    return student_backward(model, fwd, d_main, d_aux).flat()


def test_teacher_zero_weights_emit_zero_logits():
    teacher = build_teacher(TeacherSpec(input_dim=3, depth=2, width=4), seed=0)
    teacher.net.set_flat(np.zeros(teacher.net.param_count))
    events = generate_events(GeneratorConfig(feature_dim=3), 4, 10)
    logits, signals = teacher_forward(teacher, events, 4)
    np.testing.assert_array_equal(logits, 0.0)
    assert all(s.t1_logit == 0.0 for s in signals)


def test_teacher_emits_one_signal_per_event():
    teacher = build_teacher(TeacherSpec(input_dim=3, depth=2, width=4), seed=1)
    events = generate_events(GeneratorConfig(feature_dim=3), 7, 25)
    before = teacher.net.flat()
    _, signals = teacher_forward(teacher, events, 7)
    assert len(signals) == 25
    np.testing.assert_array_equal(signals.sample_id, events.sample_id)
    assert all(s.emit_step == 7 and s.teacher_version == teacher.version for s in signals)
    np.testing.assert_array_equal(teacher.net.flat(), before)


def test_teacher_forward_replays_identically():
    teacher = build_teacher(TeacherSpec(input_dim=3, depth=2, width=4), seed=2)
    events = generate_events(GeneratorConfig(feature_dim=3), 0, 25)
    a = list(teacher_forward(teacher, events, 0)[1])
    b = list(teacher_forward(teacher, events, 0)[1])
    assert a == b


def test_teacher_version_bumps():
    teacher = build_teacher(TeacherSpec(input_dim=3, depth=1, width=2), seed=0)
    assert teacher.bump_version() == 1 and teacher.bump_version() == 2


def test_teacher_shape_mismatch():
    teacher = build_teacher(TeacherSpec(input_dim=3, depth=1, width=2), seed=0)
    with pytest.raises(ShapeError):
        teacher_forward(teacher, np.zeros((2, 4)), 0)


def test_identical_towers_give_identical_logits():
    model = build_student(SPEC, seed=0)
    model.aux_tower.set_flat(model.main_tower.flat())
    out = student_forward(model, _x()).outputs
    np.testing.assert_array_equal(out.z_main, out.z_aux)


def test_zero_aux_tower_outputs_zero():
    model = build_student(SPEC, seed=0)
    model.aux_tower.set_flat(np.zeros(model.aux_tower.param_count))
    np.testing.assert_array_equal(student_forward(model, _x()).outputs.z_aux, 0.0)


def test_forward_path_isolation():
    model = build_student(SPEC, seed=0)
    x = _x()
    base = student_forward(model, x).outputs
    aux_changed = model.copy()
    aux_changed.aux_tower.layers[0].weight[0, 0] += 1.0
    main_changed = model.copy()
    main_changed.main_tower.layers[-1].bias[0] += 1.0
    np.testing.assert_array_equal(student_forward(aux_changed, x).outputs.z_main, base.z_main)
    np.testing.assert_array_equal(student_forward(main_changed, x).outputs.z_aux, base.z_aux)


def test_partition_is_disjoint_exhaustive_and_stable():
    model = build_student(SPEC, seed=0)
    parts = partition_params(model)
    sizes = sum(len(v) for v in parts.values())
    assert sizes == model.param_count
    union = np.concatenate(list(parts.values()))
    assert len(np.unique(union)) == model.param_count
    again = partition_params(model)
    for k in parts:
        np.testing.assert_array_equal(parts[k], again[k])


def test_distill_gradient_never_reaches_main_tower():
    model = build_student(SPEC, seed=3)
    x = _x(seed=3)
    fwd = student_forward(model, x)
    t1 = np.random.default_rng(4).normal(size=len(x))
    d_aux = kd_debias_loss(t1, fwd.outputs.z_aux, DebiasParams(r_s=3.0)).dL_dz
    flat = student_backward(model, fwd, np.zeros(len(x)), d_aux).flat()
    parts = partition_params(model)
    assert np.all(flat[parts["main"]] == 0.0)
    assert np.any(flat[parts["aux"]] != 0.0)


def test_main_loss_never_reaches_aux_tower():
    model = build_student(SPEC, seed=5)
    x = _x(seed=5)
    fwd = student_forward(model, x)
    y = (np.arange(len(x)) % 2).astype(float)
    d_main = task_loss(fwd.outputs.z_main, y).dL_dz
    flat = student_backward(model, fwd, d_main, None).flat()
    assert np.all(flat[partition_params(model)["aux"]] == 0.0)


def test_backbone_learns_from_both_towers():
    model = build_student(SPEC, seed=6)
    x = _x(seed=6)
    fwd = student_forward(model, x)
    ones = np.ones(len(x))
    zeros = np.zeros(len(x))
    bb = partition_params(model)["backbone"]
    from_main = _flat_tape(model, x, ones, zeros)[bb]
    from_aux = _flat_tape(model, x, zeros, ones)[bb]
    both = _flat_tape(model, x, ones, ones)[bb]
    assert np.any(from_main != 0) and np.any(from_aux != 0)
    np.testing.assert_allclose(both, from_main + from_aux, rtol=1e-12, atol=1e-15)


def test_student_gradient_matches_finite_differences():
    model = build_student(SPEC, seed=8)
    x = _x(seed=8)
    w_main, w_aux = np.random.default_rng(9).normal(size=(2, len(x)))

    def value(m):
        out = student_forward(m, x).outputs
        return float(w_main @ out.z_main + w_aux @ out.z_aux)

    analytic = _flat_tape(model, x, w_main, w_aux)
    flat = model.flat()
    h = 1e-6
    rng = np.random.default_rng(10)
    for idx in rng.choice(flat.size, 30, replace=False):
        up, down = model.copy(), model.copy()
        for m, sign in ((up, 1), (down, -1)):
            vals = flat.copy()
            vals[idx] += sign * h
            pos = 0
            for block in m.blocks().values():
                block.set_flat(vals[pos : pos + block.param_count])
                pos += block.param_count
        numeric = (value(up) - value(down)) / (2 * h)
        assert analytic[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_single_tower_student_has_no_aux():
    model = build_student(StudentSpec(input_dim=6, decoupled=False), seed=0)
    assert model.aux_tower is None
    assert len(partition_params(model)["aux"]) == 0
    assert student_forward(model, _x()).outputs.z_aux is None


def test_single_and_decoupled_share_initialisation():
    a = build_student(SPEC, seed=11)
    b = build_student(StudentSpec(**{**SPEC.__dict__, "decoupled": False}), seed=11)
    np.testing.assert_array_equal(a.backbone.flat(), b.backbone.flat())
    np.testing.assert_array_equal(a.main_tower.flat(), b.main_tower.flat())


def test_build_is_deterministic():
    spec = StudentSpec(backbone_depth=2, backbone_width=32)
    np.testing.assert_array_equal(build_student(spec, 4).flat(), build_student(spec, 4).flat())


def test_wider_student_has_more_parameters():
    narrow = build_student(StudentSpec(backbone_width=32), 0)
    wide = build_student(StudentSpec(backbone_width=64), 0)
    assert wide.param_count > narrow.param_count


def test_capacity_grid_sizes_strictly_decrease():
    counts = [build_student(arm.student, 0).param_count for arm in preset("capacity_grid").arms]
    assert counts[0] > counts[1] > counts[2]


@pytest.mark.parametrize(
    "kwargs", [dict(backbone_width=0), dict(backbone_depth=0), dict(tower_depth=-1), dict(input_dim=0)]
)
def test_invalid_student_spec(kwargs):
    with pytest.raises(ConfigError):
        StudentSpec(**kwargs)


def test_invalid_teacher_spec():
    with pytest.raises(ConfigError):
        TeacherSpec(width=0)


@pytest.mark.parametrize("kind", ["teacher", "student"])
def test_checkpoint_round_trip(tmp_path, kind):
    if kind == "teacher":
        model = build_teacher(TeacherSpec(input_dim=4, depth=2, width=6), seed=3)
        model.version = 7
        flat = lambda m: m.net.flat()
    else:
        model = build_student(SPEC, seed=3)
        flat = lambda m: m.flat()
    quantize_params(model)
    back = load_checkpoint(save_checkpoint(model, tmp_path / "ckpt.txt"))
    np.testing.assert_array_equal(flat(back), flat(model))
    if kind == "teacher":
        assert back.version == 7


def test_checkpoint_refuses_lossy_parameters(tmp_path):
    model = build_student(SPEC, seed=3)
    model.backbone.layers[0].weight[0, 0] = 0.1234567890123
    with pytest.raises(ValueError):
        save_checkpoint(model, tmp_path / "ckpt.txt")


def test_checkpoint_detects_truncation(tmp_path):
    model = build_student(SPEC, seed=3)
    quantize_params(model)
    path = save_checkpoint(model, tmp_path / "ckpt.txt")
    path.write_text("\n".join(path.read_text().splitlines()[:-3]) + "\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)
