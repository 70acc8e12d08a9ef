"""Dense MLP building blocks with hand-written reverse-mode gradients.

Everything is float64. Weights are stored as ``(out, in)`` matrices so a layer
computes ``x @ W.T + b``. Inputs may be a single feature vector or a batch of
row vectors; gradients of a batch are the sum of the per-row gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    """Ordered stack of dense layers.

    Logit networks end in an ``identity`` layer of width 1. Feature extractors
    (the student backbone) are allowed to end in ``relu``; pass
    ``require_logit=False`` for those.
    """

    layers: list[Layer]
    require_logit: bool = True

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        if self.require_logit and self.layers[-1].activation != "identity":
            raise ShapeError("final activation of a logit network must be identity")
        for arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise NumericError("parameters contain non-finite values")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``W0, b0, W1, b1, ...`` (live views)."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            require_logit=self.require_logit,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.param_count:
            raise ShapeError(f"expected {self.param_count} values, got {values.size}")
        pos = 0
        for arr in self.arrays():
            arr[...] = values[pos : pos + arr.size].reshape(arr.shape)
            pos += arr.size


def init_mlp(
    sizes: Sequence[int],
    seed,
    final_activation: str = "identity",
) -> MlpParams:
    """Glorot-uniform weights, zero biases, relu between layers.

    ``sizes`` lists every width including input and output, e.g. ``[32, 64, 1]``.
    """
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ShapeError(f"invalid layer sizes {list(sizes)}")
    rng = np.random.default_rng(seed)
    layers = []
    n = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = final_activation if i == n - 1 else "relu"
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpParams(layers, require_logit=(final_activation == "identity" and sizes[-1] == 1))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    masks: list[Optional[np.ndarray]]
    single: bool
    out_dim: int

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


def mlp_forward(params: MlpParams, x):
    """Run the network and return ``(output, cache)``.

    For a width-1 output the trailing axis is dropped, so a single vector gives a
    scalar logit and a batch gives one logit per row.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match input width {params.in_dim}")
    inputs, masks = [], []
    for layer in params.layers:
        inputs.append(h)
        a = h @ layer.weight.T
        a += layer.bias
        if layer.activation == "relu":
            mask = a > 0
            a *= mask
            masks.append(mask)
        else:
            masks.append(None)
        h = a
    out = h
    if params.out_dim == 1:
        out = out[:, 0]
    if single:
        out = out[0]
    return out, ForwardCache(inputs, masks, single, params.out_dim)


@dataclass
class GradientTape:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_grad: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "GradientTape":
        return cls(
            [np.zeros_like(l.weight) for l in params.layers],
            [np.zeros_like(l.bias) for l in params.layers],
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def __iadd__(self, other: "GradientTape") -> "GradientTape":
        for a, b in zip(self.arrays(), other.arrays()):
            if a.shape != b.shape:
                raise ShapeError("tape shapes differ")
            a += b
        return self

    def scaled(self, factor: float) -> "GradientTape":
        return GradientTape(
            [w * factor for w in self.weights], [b * factor for b in self.biases]
        )

    def is_zero(self) -> bool:
        return all(not np.any(a) for a in self.arrays())


def mlp_backward(
    params: MlpParams, cache: ForwardCache, upstream, input_grad: bool = False
) -> GradientTape:
    """Back-propagate ``upstream = dL/d(output)`` through the cached forward pass.

    With ``input_grad=True`` the tape also carries ``dL/dx`` (needed to chain a
    tower into the shared backbone).
    """
    if len(cache.inputs) != len(params.layers):
        raise ShapeError("cache was produced by a network with a different depth")
    for layer, inp in zip(params.layers, cache.inputs):
        if inp.shape[1] != layer.in_dim:
            raise ShapeError("cache does not match parameter shapes")
    n = cache.batch_size
    g = np.asarray(upstream, dtype=np.float64)
    if params.out_dim == 1 and g.ndim <= 1:
        g = g.reshape(-1, 1)
    try:
        g = np.broadcast_to(g, (n, params.out_dim))
    except ValueError:
        raise ShapeError(
            f"upstream shape {np.shape(upstream)} incompatible with output ({n}, {params.out_dim})"
        ) from None

    dws: list[np.ndarray] = [None] * len(params.layers)  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        mask = cache.masks[i]
        if mask is not None:
            g = g * mask
        dws[i] = g.T @ cache.inputs[i]
        dbs[i] = g.sum(axis=0)
        if i > 0 or input_grad:
            g = g @ params.layers[i].weight
    tape = GradientTape(dws, dbs)
    if input_grad:
        tape.input_grad = g[0] if cache.single else g
    return tape


def _flat_locate(arrays: list[np.ndarray], index: int) -> tuple[np.ndarray, tuple]:
    for arr in arrays:
        if index < arr.size:
            return arr, np.unravel_index(index, arr.shape)
        index -= arr.size
    raise IndexError(index)


def grad_check(
    loss_fn: Callable[[MlpParams], tuple[float, GradientTape]],
    params: MlpParams,
    probe_count: int = 20,
    h: float = 1e-5,
    seed=0,
    tiny: float = 1e-10,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss_value, tape)``. Probes where both
    gradients are below ``tiny`` in magnitude are skipped. The relative error
    is ``|analytic - numeric| / |numeric|``.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    value, tape = loss_fn(params)
    if not np.isfinite(value):
        raise NumericError(f"loss is not finite: {value}")
    analytic = tape.flat()
    total = params.param_count
    rng = np.random.default_rng(seed)
    probes = rng.choice(total, size=probe_count, replace=probe_count > total)

    worst = 0.0
    arrays = params.arrays()
    for idx in probes:
        arr, pos = _flat_locate(arrays, int(idx))
        orig = arr[pos]
        arr[pos] = orig + h
        up, _ = loss_fn(params)
        arr[pos] = orig - h
        down, _ = loss_fn(params)
        arr[pos] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("loss became non-finite during finite differencing")
        numeric = (up - down) / (2.0 * h)
        a = analytic[idx]
        if abs(a) < tiny and abs(numeric) < tiny:
            continue
        worst = max(worst, abs(a - numeric) / max(abs(numeric), tiny))
    return worst


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates for one MlpParams."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate: float = 1e-3, **kw) -> "AdamState":
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        arrays = params.arrays()
        return cls(
            [np.zeros_like(a) for a in arrays],
            [np.zeros_like(a) for a in arrays],
            learning_rate=learning_rate,
            **kw,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            [a.copy() for a in self.m],
            [a.copy() for a in self.v],
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.step_count,
        )


def optimizer_step(params: MlpParams, tape: GradientTape, state: AdamState):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``.

    Refuses the whole step (nothing mutated) if any gradient is non-finite.
    """
    grads = tape.arrays()
    arrays = params.arrays()
    if len(grads) != len(arrays) or len(state.m) != len(arrays):
        raise ShapeError("tape/state do not mirror the parameters")
    for p, g in zip(arrays, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; optimizer step refused")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    step = state.learning_rate * np.sqrt(c2) / c1
    eps = state.epsilon * np.sqrt(c2)
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step * m / (np.sqrt(v) + eps)
    return params, state
