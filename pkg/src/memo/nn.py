"""Dense MLP engine: parameter stores, forward tapes, reverse-mode gradients, Adam.

Everything is float64. Weights are stored ``(out, in)`` and inputs may be a
single vector or a ``(batch, in)`` matrix; gradients of a batched pass are
summed over the batch.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, StaleTapeError


class Activation(str, enum.Enum):
    TANH = "tanh"
    IDENTITY = "identity"


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def orthogonal_init(rows: int, cols: int, gain: float = 1.0, seed=None) -> np.ndarray:
    """Random (semi-)orthogonal matrix scaled by ``gain``.

    QR of a Gaussian matrix with the signs of R's diagonal folded into Q, so
    the draw is uniform over the orthogonal group.
    """
    if rows < 1 or cols < 1:
        raise DimensionError(f"orthogonal_init needs positive dims, got {rows}x{cols}")
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    rng = as_rng(seed)
    tall = max(rows, cols), min(rows, cols)
    a = rng.standard_normal(tall)
    q, r = np.linalg.qr(a)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d
    if rows < cols:
        q = q.T
    return gain * q


@dataclass(eq=False)
class ParamStore:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[Activation]
    # bumped on every in-place mutation so outstanding tapes can detect staleness
    version: int = 0

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases and activations must have equal length")
        self.activations = [Activation(a) for a in self.activations]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits {self.weights[i - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "ParamStore":
        return ParamStore(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def zeros_like(self) -> "ParamStore":
        return ParamStore(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            list(self.activations),
        )

    def to_bytes(self) -> bytes:
        return b"".join(a.astype("<f8").tobytes() for a in self.named_arrays().values())


def init_mlp(
    widths: Sequence[int],
    activations: Sequence[Activation | str],
    seed=None,
    gains: Sequence[float] | None = None,
) -> ParamStore:
    """Orthogonal weights, zero biases. ``widths`` includes the input width."""
    if len(widths) != len(activations) + 1:
        raise DimensionError("need one activation per layer")
    rng = as_rng(seed)
    gains = list(gains) if gains is not None else [1.0] * len(activations)
    weights = [orthogonal_init(o, i, g, rng) for i, o, g in zip(widths[:-1], widths[1:], gains)]
    biases = [np.zeros(o) for o in widths[1:]]
    return ParamStore(weights, biases, list(activations))


@dataclass(eq=False)
class Tape:
    """Record of one forward pass; enough to replay exact gradients."""

    params: ParamStore
    version: int
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    vector_input: bool


@dataclass(eq=False)
class GradStore:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # gradient w.r.t. the network input (same leading shape as the input)
    input: np.ndarray | None = None

    @classmethod
    def zeros(cls, params: ParamStore) -> "GradStore":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def add_(self, other: "GradStore") -> "GradStore":
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self


def _activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.TANH:
        return np.tanh(z)
    return z


def mlp_forward(params: ParamStore, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    vector = x.ndim == 1
    h = x[None, :] if vector else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise DimensionError(f"input has shape {x.shape}, network expects {params.in_dim} features")
    inputs, outputs = [], []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(h)
        h = _activate(h @ w.T + b, act)
        outputs.append(h)
    y = h[0] if vector else h
    return y, Tape(params, params.version, inputs, outputs, vector)


def backward(tape: Tape, loss_grad: np.ndarray, need_input_grad: bool = True) -> GradStore:
    """Reverse pass. ``loss_grad`` is dL/dy with the shape of the forward output."""
    params = tape.params
    if params.version != tape.version:
        raise StaleTapeError("parameters were modified after this tape was recorded")
    g = np.asarray(loss_grad, dtype=np.float64)
    if tape.vector_input:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise DimensionError(f"loss gradient shape {np.shape(loss_grad)} does not match output")
    n = len(params.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in reversed(range(n)):
        if params.activations[i] is Activation.TANH:
            y = tape.outputs[i]
            g = g * (1.0 - y * y)
        gw[i] = g.T @ tape.inputs[i]
        gb[i] = g.sum(axis=0)
        if i or need_input_grad:
            g = g @ params.weights[i]
    grads = GradStore(gw, gb)
    if need_input_grad:
        grads.input = g[0] if tape.vector_input else g
    return grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _as_named(obj) -> dict[str, np.ndarray]:
    if isinstance(obj, (ParamStore, GradStore)):
        return obj.named_arrays()
    if isinstance(obj, Mapping):
        return dict(obj)
    raise TypeError(f"cannot interpret {type(obj).__name__} as named parameter arrays")


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update, applied in place.

    ``params``/``grads`` are a ParamStore/GradStore pair or two dicts of
    name -> array. Names missing from ``grads`` are left untouched.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    p_named = _as_named(params)
    g_named = _as_named(grads)
    for name, g in g_named.items():
        if name not in p_named or p_named[name].shape != g.shape:
            raise DimensionError(f"gradient {name!r} has no congruent parameter")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in g_named.items():
        p = p_named[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    if isinstance(params, ParamStore):
        params.touch()
    return params, state


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads.values())
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm
