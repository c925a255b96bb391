"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

A :class:`Tape` records every op applied to tensors that belong to it, together
with a pullback closure.  :func:`backward` walks the tape in reverse and returns
gradients keyed by parameter name.  Tensors created without a recording tape are
plain values, which is how inference runs without bookkeeping cost.

Everything is 2-D: vectors are ``1 x d`` rows, scalars are ``1 x 1``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Shape mismatch between op inputs."""


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


class UsageError(RuntimeError):
    """The tape or parameter store was used incorrectly."""


Pullback = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value, tape: "Tape | None" = None, index: int | None = None,
                 name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise DimensionError(f"item: expected 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops; inputs always precede the ops that consume them."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[tuple[tuple, Pullback]] = []
        self.size = 0
        self.params: dict[str, Tensor] = {}

    def _new_index(self) -> int:
        self.size += 1
        return self.size - 1


def constant(x) -> Tensor:
    """Wrap a float, list or array as an untracked 2-D tensor."""
    if type(x) is Tensor:
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"constant: expected at most 2 dims, got {arr.ndim}")
    return Tensor(arr)


def _check_finite(op: str, value: np.ndarray) -> None:
    # NaN and Inf survive a sum, so one reduction screens the whole array
    if not math.isfinite(np.add.reduce(value, axis=None)):
        raise NumericError(f"{op}: non-finite value in output")


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], pullback: Pullback) -> Tensor:
    _check_finite(op, value)
    tape = None
    for t in inputs:
        if t.index is not None and t.tape is not None and t.tape.record:
            tape = t.tape
            break
    if tape is None:
        return Tensor(value)
    out = Tensor(value, tape, tape._new_index())
    tape.nodes.append(((out.index, tuple(t.index if t.tape is tape else None for t in inputs)),
                       pullback))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    if a == b:
        return a
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise DimensionError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


# ---------------------------------------------------------------------------
# primitive ops

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", a.value.T, (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit("relu", a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.value)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _emit("log", out, (a,), lambda g: (g / x,))


def softmax_rows(a: Tensor) -> Tensor:
    if not a.value.size:
        return _emit("softmax_rows", a.value.copy(), (a,), lambda g: (g,))
    x = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=1, keepdims=True)

    def pullback(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", out, (a,), pullback)


def sum_rows(a: Tensor) -> Tensor:
    """Sum across columns, giving an ``r x 1`` column of row totals."""
    r, c = a.shape
    return _emit("sum_rows", a.value.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, (r, c)).copy(),))


def sum_cols(a: Tensor) -> Tensor:
    """Sum down rows, giving a ``1 x c`` row of column totals."""
    r, c = a.shape
    return _emit("sum_cols", a.value.sum(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, (r, c)).copy(),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum_all", np.array([[a.value.sum()]]), (a,),
                 lambda g: (np.full(shape, g[0, 0]),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [constant(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def pullback(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", np.concatenate([p.value for p in parts], axis=1),
                 tuple(parts), pullback)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def pullback(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", a.value[:, start:stop], (a,), pullback)


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape
    if index.size and (index.min() < 0 or index.max() >= shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {shape}")

    def pullback(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("gather_rows", a.value[index], (a,), pullback)


def masked_fill(a: Tensor, mask, fill: float = 0.0) -> Tensor:
    """Replace entries where ``mask`` is true by ``fill``; mask broadcasts like add."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask.reshape(-1, 1)
    _broadcast_shape("masked_fill", a.shape, mask.shape)
    keep = ~np.broadcast_to(mask, a.shape)
    return _emit("masked_fill", np.where(keep, a.value, fill), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# fused ops whose pullbacks are cheaper written by hand

def hinge_similarity(a: Tensor, b: Tensor) -> Tensor:
    """``S[u, v] = -sum_i max(a[u, i] - b[v, i], 0)``."""
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"hinge_similarity: widths differ {a.shape} and {b.shape}")
    diff = a.value[:, None, :] - b.value[None, :, :]
    active = diff > 0
    out = -(diff * active).sum(axis=2)

    def pullback(g):
        w = g[:, :, None] * active
        return (-w.sum(axis=1), w.sum(axis=0))

    return _emit("hinge_similarity", out, (a, b), pullback)


_EXP_SAFE_RANGE = 400.0


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def log_sinkhorn(logits: Tensor, steps: int) -> Tensor:
    """Alternating column-then-row normalization of ``exp(logits)``.

    Returns the normalized matrix itself (not its log).  Runs in log space when
    the logit range could underflow ``exp``, otherwise multiplicatively; both
    compute the same iterates.
    """
    r, c = logits.shape
    if r != c:
        raise DimensionError(f"log_sinkhorn: expected square input, got {logits.shape}")
    trail = []
    x = logits.value
    if not x.size:
        return _emit("log_sinkhorn", x.copy(), (logits,), lambda g: (g,))
    if x.max() - x.min() < _EXP_SAFE_RANGE:
        z = np.exp(x - x.max())
        for _ in range(steps):
            z = z / z.sum(axis=0, keepdims=True)
            trail.append(z)
            z = z / z.sum(axis=1, keepdims=True)
            trail.append(z)
    else:
        for _ in range(steps):
            x = x - _logsumexp(x, axis=0)
            trail.append(np.exp(x))
            x = x - _logsumexp(x, axis=1)
            trail.append(np.exp(x))
    out = trail[-1] if trail else np.exp(x)

    def pullback(g):
        g = g * out
        for i in range(len(trail) - 1, -1, -1):
            axis = 1 if i % 2 else 0
            g = g - trail[i] * g.sum(axis=axis, keepdims=True)
        return (g,)

    return _emit("log_sinkhorn", out, (logits,), pullback)


# ---------------------------------------------------------------------------
# composites

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Linear layers joined by ReLU; no activation after the last one."""
    for i, (w, b) in enumerate(layers):
        if i:
            x = relu(x)
        x = linear(x, w, b)
    return x


def gru_cell(x: Tensor, h: Tensor, p: dict[str, Tensor]) -> Tensor:
    """One GRU step with input ``x`` and hidden state ``h``.

    ``p`` holds ``w_x{z,r,n}``, ``w_h{z,r,n}``, ``b_{z,r}``, ``b_xn`` and ``b_hn``.
    """
    z = sigmoid(x @ p["w_xz"] + h @ p["w_hz"] + p["b_z"])
    r = sigmoid(x @ p["w_xr"] + h @ p["w_hr"] + p["b_r"])
    n = tanh(x @ p["w_xn"] + p["b_xn"] + r * (h @ p["w_hn"] + p["b_hn"]))
    return n + z * (h - n)


# ---------------------------------------------------------------------------
# backward

def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a 1x1 ``output`` w.r.t. every parameter bound on ``tape``."""
    if output.tape is not tape or output.index is None:
        raise UsageError("backward: output was not recorded on this tape")
    if output.shape != (1, 1):
        raise UsageError(f"backward: output must be 1x1, got {output.shape}")
    grads: list[np.ndarray | None] = [None] * tape.size
    grads[output.index] = np.ones((1, 1))
    for (out_idx, in_idx), pullback in reversed(tape.nodes):
        g = grads[out_idx]
        if g is None:
            continue
        for idx, gi in zip(in_idx, pullback(g)):
            if idx is None or gi is None:
                continue
            grads[idx] = gi if grads[idx] is None else grads[idx] + gi
    result = {}
    for name, t in tape.params.items():
        g = grads[t.index]
        result[name] = np.zeros(t.shape) if g is None else g
    return result


# ---------------------------------------------------------------------------
# parameters and optimization

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParameterStore:
    """Named trainable matrices plus their Adam moments."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    adam: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise UsageError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {arr.shape}")
        self.values[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def names(self) -> list[str]:
        return list(self.values)

    def bind(self, tape: Tape | None) -> "BoundParams":
        return BoundParams(self, tape)

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: v.copy() for k, v in self.values.items()},
            {k: AdamState(s.m.copy(), s.v.copy(), s.step) for k, s in self.adam.items()},
        )

    def to_json(self) -> dict:
        return {
            "parameters": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                           for k, v in self.values.items()},
            "adam": {k: {"m": s.m.ravel().tolist(), "v": s.v.ravel().tolist(), "step": s.step}
                     for k, s in self.adam.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ParameterStore":
        store = cls()
        for k, entry in doc["parameters"].items():
            store.add(k, np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
        for k, s in doc.get("adam", {}).items():
            shape = store.values[k].shape
            store.adam[k] = AdamState(np.array(s["m"]).reshape(shape),
                                      np.array(s["v"]).reshape(shape), int(s["step"]))
        return store

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class BoundParams:
    """Read access to a store that registers each parameter as a leaf on a tape."""

    def __init__(self, store: ParameterStore, tape: Tape | None):
        self.store = store
        self.tape = tape
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        t = self._cache.get(name)
        if t is not None:
            return t
        if name not in self.store.values:
            raise UsageError(f"missing parameter {name!r}")
        value = self.store.values[name]
        if self.tape is not None and self.tape.record:
            t = Tensor(value, self.tape, self.tape._new_index(), name)
            self.tape.params[name] = t
        else:
            t = Tensor(value, name=name)
        self._cache[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self.store.values

    def group(self, prefix: str, keys: Iterable[str]) -> dict[str, Tensor]:
        return {k: self[f"{prefix}.{k}"] for k in keys}


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              weight_decay: float = 5e-4, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> ParameterStore:
    """In-place Adam update; ``weight_decay * w`` is added to each raw gradient."""
    unknown = set(grads) - set(store.values)
    if unknown:
        raise UsageError(f"adam_step: unknown parameters {sorted(unknown)}")
    b1, b2 = betas
    for name, g in grads.items():
        w = store.values[name]
        if g.shape != w.shape:
            raise DimensionError(f"adam_step: gradient for {name!r} has shape {g.shape}, "
                                 f"parameter has {w.shape}")
        if weight_decay:
            g = g + weight_decay * w
        st = store.adam.get(name)
        if st is None:
            st = store.adam[name] = AdamState(np.zeros_like(w), np.zeros_like(w))
        st.step += 1
        st.m = b1 * st.m + (1 - b1) * g
        st.v = b2 * st.v + (1 - b2) * g * g
        m_hat = st.m / (1 - b1 ** st.step)
        v_hat = st.v / (1 - b2 ** st.step)
        store.values[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def init_linear(store: ParameterStore, prefix: str, n_in: int, n_out: int,
                rng: np.random.Generator, bias: bool = True) -> None:
    """Uniform(-1/sqrt(n_in), 1/sqrt(n_in)) weights and biases."""
    bound = 1.0 / math.sqrt(n_in)
    store.add(f"{prefix}.w", rng.uniform(-bound, bound, size=(n_in, n_out)))
    if bias:
        store.add(f"{prefix}.b", rng.uniform(-bound, bound, size=(1, n_out)))
