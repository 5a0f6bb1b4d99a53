"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Primitives run eagerly on numpy arrays. When a :class:`Tape` is active and
an input requires gradients, the primitive appends a backward closure to
the tape; ``Tape.backward`` replays the closures in reverse execution order,
which is always a valid reverse topological order.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_local = threading.local()


def _active() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tape:
    """Ordered record of executed primitives; use as a context manager.

    Tapes are per thread; nested tapes record into the innermost one.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _active().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active().pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, root: Tensor, grad=None) -> None:
        if not root.requires_grad:
            raise ValueError("root does not depend on any tensor requiring gradients")
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=DTYPE)
        root.grad = seed if root.grad is None else root.grad + seed
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g


def _emit(data, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    stack = _active()
    if stack and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].records.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and reshaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"bias_add: shapes {x.shape} and {b.shape}")
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _emit(data, (x,), lambda g: (g.reshape(old),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    data = np.concatenate([p.data for p in parts], axis=1)
    return _emit(data, tuple(parts), lambda g: tuple(g[:, s:t] for s, t in zip(bounds[:-1], bounds[1:])))


def _scatter_rows(index: np.ndarray, rows: np.ndarray, n: int, weights=None) -> np.ndarray:
    """``out[index[e]] += weights[e] * rows[e]`` via a sparse product."""
    w = np.ones(len(index)) if weights is None else weights
    m = sparse.csr_matrix((w, (index, np.arange(len(index)))), shape=(n, len(index)))
    return m @ rows


def gather_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {x.shape}")

    def back(g):
        return (_scatter_rows(index, g, n),)

    return _emit(x.data[index], (x,), back)


def pick(x: Tensor, cols) -> Tensor:
    """``out[i] = x[i, cols[i]]``."""
    cols = np.asarray(cols, dtype=np.int64)
    if x.data.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError(f"pick: shapes {x.shape} and {cols.shape}")
    rows = np.arange(len(cols))

    def back(g):
        gx = np.zeros_like(x.data)
        gx[rows, cols] = g
        return (gx,)

    return _emit(x.data[rows, cols], (x,), back)


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.sum(x.data), (x,), lambda g: (np.full_like(x.data, g),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit(np.mean(x.data), (x,), lambda g: (np.full_like(x.data, g / n),))


# ---------------------------------------------------------------------------
# row-wise normalizations


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _emit(s, (x,), lambda g: (s * (g - np.sum(g * s, axis=1, keepdims=True)),))


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit(out, (x,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------------------
# grouped reductions over contiguous row segments


def _check_offsets(name, offsets, nrows):
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.ndim != 1 or offsets[0] != 0 or offsets[-1] != nrows or np.any(np.diff(offsets) < 0):
        raise ShapeError(f"{name}: offsets do not partition {nrows} rows")
    return offsets


def segment_sum(rows: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sum of ``rows[offsets[g]:offsets[g+1]]`` per group; empty groups give 0."""
    counts = np.diff(offsets)
    out = np.zeros((len(counts),) + rows.shape[1:], dtype=rows.dtype)
    nz = counts > 0
    if nz.any():
        out[nz] = np.add.reduceat(rows, offsets[:-1][nz], axis=0)
    return out


def scatter_max_groups(x: Tensor, offsets) -> Tensor:
    """Column-wise max over each contiguous row group.

    The gradient of every output entry flows to the first row (lowest index)
    attaining the max.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"scatter_max_groups: expected a matrix, got {x.shape}")
    offsets = _check_offsets("scatter_max_groups", offsets, x.shape[0])
    counts = np.diff(offsets)
    if np.any(counts == 0):
        raise ValueError("scatter_max_groups: empty group")
    starts = offsets[:-1]
    out = np.maximum.reduceat(x.data, starts, axis=0)
    group = np.repeat(np.arange(len(counts)), counts)
    row_ids = np.where(x.data == out[group], np.arange(x.shape[0])[:, None], x.shape[0])
    argmax = np.minimum.reduceat(row_ids, starts, axis=0)  # (G, C)
    cols = np.broadcast_to(np.arange(x.shape[1]), argmax.shape)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[argmax, cols] = g  # argmax rows are distinct per column across groups
        return (gx,)

    res = _emit(out, (x,), back)
    return res


def group_weighted_sum(values: Tensor, weights, index, offsets) -> Tensor:
    """``out[g] = sum_{e in group g} weights[e] * values[index[e]]``.

    ``weights`` may be a constant array or a tensor of shape (E,) or (E, 1).
    """
    values = as_tensor(values)
    weights = as_tensor(weights)
    index = np.asarray(index, dtype=np.int64)
    offsets = _check_offsets("group_weighted_sum", offsets, len(index))
    w = weights.data.reshape(-1)
    if w.shape != index.shape or values.data.ndim != 2:
        raise ShapeError(
            f"group_weighted_sum: values {values.shape}, weights {weights.shape}, index {index.shape}"
        )
    ngroups = len(offsets) - 1
    group = np.repeat(np.arange(ngroups), np.diff(offsets))
    m = sparse.csr_matrix((w, index, offsets), shape=(ngroups, values.shape[0]))
    out = m @ values.data

    def back(g):
        gv = m.T @ g
        gw = np.einsum("ec,ec->e", g[group], values.data[index]).reshape(weights.shape)
        return (gv, gw)

    return _emit(out, (values, weights), back)


def group_softmax(x: Tensor, offsets) -> Tensor:
    """Softmax of a score column within each contiguous group."""
    shape = x.shape
    v = x.data.reshape(-1)
    offsets = _check_offsets("group_softmax", offsets, len(v))
    counts = np.diff(offsets)
    if np.any(counts == 0):
        raise ValueError("group_softmax: empty group")
    group = np.repeat(np.arange(len(counts)), counts)
    gmax = np.maximum.reduceat(v, offsets[:-1])
    e = np.exp(v - gmax[group])
    s = e / np.add.reduceat(e, offsets[:-1])[group]

    def back(g):
        g = g.reshape(-1)
        dot = np.add.reduceat(g * s, offsets[:-1])
        return ((s * (g - dot[group])).reshape(shape),)

    return _emit(s.reshape(shape), (x,), back)


# ---------------------------------------------------------------------------
# parameters and MLPs


class Params(dict):
    """Ordered name -> Tensor mapping of learnable weights."""

    def slice(self, prefix: str) -> "Params":
        p = prefix + "."
        return Params((k[len(p):], v) for k, v in self.items() if k.startswith(p))

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self.values())


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    final: str = "none"  # none | relu | sigmoid
    bias: bool = True

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if self.final not in ("none", "relu", "sigmoid"):
            raise ValueError(f"unknown final nonlinearity {self.final!r}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str, scheme: str = "he") -> Params:
    """Uniform weights and zero biases.

    ``scheme="he"`` draws from +-sqrt(6 / fan_in), which keeps activation
    scale through ReLU stacks; ``"glorot"`` uses +-sqrt(6 / (fan_in + fan_out)).
    """
    if scheme not in ("he", "glorot"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    out = Params()
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        denom = fan_in if scheme == "he" else fan_in + fan_out
        bound = math.sqrt(6.0 / denom)
        out[f"{prefix}.{i}.weight"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True)
        if spec.bias:
            out[f"{prefix}.{i}.bias"] = Tensor(np.zeros(fan_out), True)
    return out


def mlp_apply(spec: MlpSpec, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Affine layers with ReLU in between; ``params`` holds ``<i>.weight``/``<i>.bias``."""
    if x.data.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise ShapeError(f"mlp_apply: input {x.shape} does not match widths {spec.widths}")
    h = x
    for i in range(spec.depth):
        w = params.get(f"{i}.weight")
        expect = (spec.widths[i], spec.widths[i + 1])
        if w is None or w.shape != expect:
            got = None if w is None else w.shape
            raise ValueError(f"mlp_apply: layer {i} weight has shape {got}, expected {expect}")
        h = matmul(h, w)
        if spec.bias:
            b = params.get(f"{i}.bias")
            if b is None or b.shape != (expect[1],):
                raise ValueError(f"mlp_apply: layer {i} bias missing or mis-sized")
            h = bias_add(h, b)
        last = i == spec.depth - 1
        if not last or spec.final == "relu":
            h = relu(h)
        elif spec.final == "sigmoid":
            h = sigmoid(h)
    return h


# ---------------------------------------------------------------------------
# optimization and checking


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], velocity: dict, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """In-place SGD with momentum: v = m*v + (g + wd*p); p = p - lr*v."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        step = g + weight_decay * p.data
        v = velocity.get(name)
        v = step if v is None else momentum * v + step
        velocity[name] = v
        p.data = p.data - lr * v


class SGD:
    def __init__(self, params: Params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        sgd_step(self.params, grads, self.velocity, self.lr, self.momentum, self.weight_decay)


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    # coordinates that needed a narrower stencil
    kinks: int = 0
    evaluations: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def gradient_errors(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
                    eps: float = 1e-5, floor: float = 1e-6, kink_retries: int = 2) -> GradCheckReport:
    """Compare tape gradients with central differences, coordinate by coordinate.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` makes the comparison absolute for gradients near zero, where
    central differences carry only roundoff. A coordinate whose stencil
    straddles a ReLU or max kink disagrees only while the kink lies inside
    the stencil, so disagreeing coordinates are retried with the stencil
    shrunk tenfold (up to ``kink_retries`` times) and keep their best
    agreement. A wrong gradient disagrees at every width.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": t for i, t in enumerate(params)}
    for t in params.values():
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    report = GradCheckReport({})

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f().data)
        flat[i] = orig - h
        down = float(f().data)
        flat[i] = orig
        report.evaluations += 2
        return up, down

    for name, t in params.items():
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        assert np.shares_memory(flat, t.data)
        worst = 0.0
        for i in range(flat.size):
            a = analytic[i]
            h, err = eps, np.inf
            for attempt in range(kink_retries + 1):
                up, down = central(flat, i, h)
                num = (up - down) / (2 * h)
                err = min(err, abs(a - num) / max(abs(a), abs(num), floor))
                if err < 1e-6:
                    break
                report.kinks += attempt == 0
                h /= 10.0
            worst = max(worst, err)
        report.errors[name] = worst
    for t in params.values():
        t.grad = None
    return report


def gradient_check(f: Callable[[], Tensor], params, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences."""
    return gradient_errors(f, params, eps, floor).max_error
