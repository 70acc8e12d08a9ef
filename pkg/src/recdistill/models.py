"""Teacher network and the decoupled-tower student."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen import SamplingConfig
from .errors import ConfigError, ShapeError
from .numerics import (
    AdamState,
    ForwardCache,
    GradientTape,
    MlpParams,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .signal_store import quantize_logit


@dataclass(frozen=True)
class TeacherSpec:
    input_dim: int = 32
    depth: int = 3
    width: int = 256

    def __post_init__(self):
        if self.input_dim < 1 or self.depth < 1 or self.width < 1:
            raise ConfigError(f"invalid teacher spec {self}")

    def sizes(self) -> list[int]:
        return [self.input_dim] + [self.width] * self.depth + [1]


@dataclass(frozen=True)
class StudentSpec:
    input_dim: int = 32
    backbone_depth: int = 2
    backbone_width: int = 64
    tower_depth: int = 1
    tower_width: int = 32
    decoupled: bool = True

    def __post_init__(self):
        if min(self.input_dim, self.backbone_depth, self.backbone_width, self.tower_width) < 1:
            raise ConfigError(f"invalid student spec {self}")
        if self.tower_depth < 0:
            raise ConfigError("tower_depth must be >= 0")

    def backbone_sizes(self) -> list[int]:
        return [self.input_dim] + [self.backbone_width] * self.backbone_depth

    def tower_sizes(self) -> list[int]:
        return [self.backbone_width] + [self.tower_width] * self.tower_depth + [1]

    def key(self) -> tuple:
        """Identity of the shared parts (backbone + main tower) for seeding."""
        return (
            self.input_dim,
            self.backbone_depth,
            self.backbone_width,
            self.tower_depth,
            self.tower_width,
        )


@dataclass
class TeacherModel:
    net: MlpParams
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    version: int = 0
    spec: Optional[TeacherSpec] = None
    seed: int = 0

    def bump_version(self) -> int:
        self.version += 1
        return self.version


@dataclass
class SignalBatch:
    sample_id: np.ndarray
    teacher_version: int
    t1_logit: np.ndarray
    emit_step: int

    def __len__(self):
        return int(self.sample_id.shape[0])

    def __iter__(self):
        from .signal_store import DistillSignal

        for i, x in zip(self.sample_id, self.t1_logit):
            yield DistillSignal(int(i), self.teacher_version, float(x), self.emit_step)


def build_teacher(spec: TeacherSpec, seed, sampling: SamplingConfig | None = None) -> TeacherModel:
    net = init_mlp(spec.sizes(), np.random.SeedSequence([_seed_int(seed), 1]))
    return TeacherModel(net, sampling or SamplingConfig(), 0, spec, _seed_int(seed))


def teacher_forward(model: TeacherModel, events, step: int, with_cache: bool = False):
    """Raw logits for a batch plus one signal per event stamped with the current version.

    Logits in the signals are rounded to 9 significant digits so a materialised
    store replays bit-identically.
    """
    features = events.features if hasattr(events, "features") else np.asarray(events)
    logits, cache = mlp_forward(model.net, features)
    logits = np.atleast_1d(logits)
    ids = events.sample_id if hasattr(events, "sample_id") else np.arange(logits.shape[0])
    signals = SignalBatch(np.asarray(ids, dtype=np.int64), model.version, quantize_logit(logits), int(step))
    if with_cache:
        return logits, signals, cache
    return logits, signals


@dataclass
class TowerOutputs:
    z_main: np.ndarray
    z_aux: Optional[np.ndarray]
    backbone_rep: np.ndarray


@dataclass
class StudentForward:
    outputs: TowerOutputs
    backbone_cache: ForwardCache
    main_cache: ForwardCache
    aux_cache: Optional[ForwardCache]


@dataclass
class StudentModel:
    backbone: MlpParams
    main_tower: MlpParams
    aux_tower: Optional[MlpParams]
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    spec: Optional[StudentSpec] = None
    seed: int = 0

    def __post_init__(self):
        rep = self.backbone.out_dim
        if self.main_tower.in_dim != rep:
            raise ShapeError("main tower input width must equal backbone output width")
        if self.aux_tower is not None and self.aux_tower.in_dim != rep:
            raise ShapeError("aux tower input width must equal backbone output width")

    @property
    def decoupled(self) -> bool:
        return self.aux_tower is not None

    def blocks(self) -> dict[str, MlpParams]:
        out = {"backbone": self.backbone, "main": self.main_tower}
        if self.aux_tower is not None:
            out["aux"] = self.aux_tower
        return out

    @property
    def param_count(self) -> int:
        return sum(b.param_count for b in self.blocks().values())

    def flat(self) -> np.ndarray:
        return np.concatenate([b.flat() for b in self.blocks().values()])

    def copy(self) -> "StudentModel":
        return StudentModel(
            self.backbone.copy(),
            self.main_tower.copy(),
            None if self.aux_tower is None else self.aux_tower.copy(),
            self.sampling,
            self.spec,
            self.seed,
        )


def _seed_int(seed) -> int:
    return int(seed) if np.isscalar(seed) else int(np.random.SeedSequence(seed).generate_state(1)[0])


def build_student(spec: StudentSpec, seed, sampling: SamplingConfig | None = None) -> StudentModel:
    """Deterministic construction; backbone, main and aux towers use independent seed streams.

    Because the streams are independent, a single-tower student and a
    decoupled student built from the same seed share their backbone and main
    tower initialisation exactly.
    """
    s = _seed_int(seed)
    backbone = init_mlp(spec.backbone_sizes(), np.random.SeedSequence([s, 2]), final_activation="relu")
    main = init_mlp(spec.tower_sizes(), np.random.SeedSequence([s, 3]))
    aux = init_mlp(spec.tower_sizes(), np.random.SeedSequence([s, 4])) if spec.decoupled else None
    return StudentModel(backbone, main, aux, sampling or SamplingConfig(), spec, s)


def student_forward(model: StudentModel, x) -> StudentForward:
    """Backbone once, both towers on the same representation."""
    x = getattr(x, "features", x)
    rep, bcache = mlp_forward(model.backbone, x)
    z_main, mcache = mlp_forward(model.main_tower, rep)
    z_aux, acache = (None, None)
    if model.aux_tower is not None:
        z_aux, acache = mlp_forward(model.aux_tower, rep)
    return StudentForward(TowerOutputs(z_main, z_aux, rep), bcache, mcache, acache)


@dataclass
class StudentTape:
    backbone: GradientTape
    main: GradientTape
    aux: Optional[GradientTape]

    def blocks(self) -> dict[str, GradientTape]:
        out = {"backbone": self.backbone, "main": self.main}
        if self.aux is not None:
            out["aux"] = self.aux
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([t.flat() for t in self.blocks().values()])


def student_backward(model: StudentModel, fwd: StudentForward, d_main, d_aux=None) -> StudentTape:
    """Gradients for ``dL/dz_main`` and ``dL/dz_aux``; the backbone gets the sum of both towers."""
    main_tape = mlp_backward(model.main_tower, fwd.main_cache, d_main, input_grad=True)
    upstream = main_tape.input_grad
    aux_tape = None
    if model.aux_tower is not None:
        if d_aux is None:
            d_aux = np.zeros_like(np.asarray(fwd.outputs.z_aux, dtype=np.float64))
        aux_tape = mlp_backward(model.aux_tower, fwd.aux_cache, d_aux, input_grad=True)
        upstream = upstream + aux_tape.input_grad
    elif d_aux is not None and np.any(d_aux):
        raise ShapeError("single-tower student has no aux output")
    main_tape.input_grad = None
    if aux_tape is not None:
        aux_tape.input_grad = None
    backbone_tape = mlp_backward(model.backbone, fwd.backbone_cache, upstream)
    return StudentTape(backbone_tape, main_tape, aux_tape)


def partition_params(model: StudentModel) -> dict[str, np.ndarray]:
    """Disjoint index sets over the flat parameter vector (order: backbone, main, aux)."""
    out = {}
    pos = 0
    for name in ("backbone", "main", "aux"):
        block = model.blocks().get(name)
        size = 0 if block is None else block.param_count
        out[name] = np.arange(pos, pos + size)
        pos += size
    return out


def student_optimizers(model: StudentModel, learning_rate: float = 1e-3) -> dict[str, AdamState]:
    return {k: AdamState.for_params(b, learning_rate) for k, b in model.blocks().items()}


# -- checkpoints --------------------------------------------------------------


def _all_arrays(model) -> list[np.ndarray]:
    if isinstance(model, TeacherModel):
        return model.net.arrays()
    return [a for b in model.blocks().values() for a in b.arrays()]


def quantize_params(model) -> None:
    """Round every parameter to 9 significant digits in place."""
    for arr in _all_arrays(model):
        arr[...] = quantize_logit(arr)


def save_checkpoint(model, path) -> Path:
    """Header line (JSON) then one 9-significant-digit parameter per line.

    Refuses to write if any parameter would not survive the decimal round trip;
    call :func:`quantize_params` first for trained weights.
    """
    values = np.concatenate([a.ravel() for a in _all_arrays(model)])
    text = [f"{v:.9g}" for v in values]
    if any(float(t) != v for t, v in zip(text, values)):
        raise ValueError("parameters do not round-trip at 9 significant digits; quantize first")
    if isinstance(model, TeacherModel):
        header = {"kind": "teacher", "spec": asdict(model.spec), "seed": model.seed, "version": model.version}
    else:
        header = {"kind": "student", "spec": asdict(model.spec), "seed": model.seed, "version": 0}
    header["param_count"] = int(values.size)
    path = Path(path)
    path.write_text("# " + json.dumps(header, sort_keys=True) + "\n" + "\n".join(text) + "\n")
    return path


def load_checkpoint(path):
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(lines[0][2:])
    values = np.array([float(v) for v in lines[1:]], dtype=np.float64)
    if values.size != header["param_count"]:
        raise ValueError(f"{path}: expected {header['param_count']} parameters, found {values.size}")
    if header["kind"] == "teacher":
        model = build_teacher(TeacherSpec(**header["spec"]), header["seed"])
        model.version = header["version"]
    elif header["kind"] == "student":
        model = build_student(StudentSpec(**header["spec"]), header["seed"])
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {header['kind']!r}")
    pos = 0
    for arr in _all_arrays(model):
        arr[...] = values[pos : pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return model
