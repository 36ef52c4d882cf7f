"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives the recurrent translation model needs are provided. There is no
implicit broadcasting: every binary op requires identical shapes, and row-vector
additions go through ``bias_add``. Operations are recorded on the innermost active
``Tape``; with no tape active every op is a plain numpy computation.
"""

import logging
import threading
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from config import Config
from srnmt.errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    InvalidMaskError,
    VocabularyError,
)

logger = logging.getLogger(__name__)

_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _as_array(values, dtype=None) -> np.ndarray:
    if isinstance(values, np.ndarray) and dtype is None and np.issubdtype(values.dtype, np.floating):
        return values
    return np.asarray(values, dtype=dtype or Config.DEFAULT_PRECISION)


class Tensor:
    """Dense array of rank 0-3 with an optional gradient slot"""

    def __init__(self, values, requires_grad: bool = False, name: str = None, dtype=None):
        self.values = _as_array(values, dtype)
        if self.values.ndim > 3:
            raise DimensionError(f"tensor rank must be at most 3, got shape {self.values.shape}")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops executed inside the block are recorded when any of
    their inputs requires a gradient. A tape and its tensors belong to one thread.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.recorded_bytes = 0
        self._touched = {}

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.stack.pop()
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: BackwardFn):
        self.records.append(_Record(out, tuple(inputs), backward))
        self.recorded_bytes += out.values.nbytes
        for tensor in inputs:
            if tensor.requires_grad:
                self._touched[id(tensor)] = tensor
        self._touched[id(out)] = out

    def backward(self, loss: Tensor):
        if loss.values.ndim != 0:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        if not self.records or not any(rec.out is loss for rec in self.records):
            raise ContractError("loss was not produced on this tape")

        grads = {id(loss): np.ones_like(loss.values)}
        for rec in reversed(self.records):
            upstream = grads.pop(id(rec.out), None)
            if upstream is None:
                continue
            _accumulate(rec.out, upstream)
            input_grads = rec.backward(upstream)
            for tensor, grad in zip(rec.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
        # leaves (parameters, inputs) are never outputs of a record
        for key, grad in grads.items():
            tensor = self._touched.get(key)
            if tensor is not None:
                _accumulate(tensor, grad)

    def clear(self):
        for tensor in self._touched.values():
            tensor.grad = None
        self.records = []
        self.recorded_bytes = 0
        self._touched = {}


def _accumulate(tensor: Tensor, grad: np.ndarray):
    if grad.shape != tensor.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match tensor shape {tensor.shape}")
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def current_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def custom_op(values: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap a forward result and its local backward rule as a recorded primitive"""
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs_grad)
    if needs_grad:
        tape.record(out, inputs, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g

    return custom_op(av @ bv, (a, b), backward)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched_matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g

    return custom_op(av @ bv, (a, b), backward)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return custom_op(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return custom_op(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return custom_op(av * bv, (a, b), lambda g: (g * bv, g * av))


def _logistic(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _logistic(x.values)
    return custom_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    return custom_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return custom_op(x.values * c, (x,), lambda g: (g * c,))


def one_minus(x: Tensor) -> Tensor:
    return custom_op(1.0 - x.values, (x,), lambda g: (-g,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "scale": scale,
    "one-minus": one_minus,
}


def elementwise(op: str, *inputs):
    """Dispatch a pointwise op by name (``scale`` takes the constant as second argument)"""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigurationError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    return fn(*inputs)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return custom_op(x.values + b.values, (x, b), lambda g: (g, g.sum(axis=lead)))


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return custom_op(np.asarray(x.values.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.values.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    original = x.shape
    return custom_op(x.values.reshape(shape), (x,), lambda g: (g.reshape(original),))


# ---------------------------------------------------------------------------
# Normalization and attention
# ---------------------------------------------------------------------------

def _layer_norm_param_grads(g: np.ndarray, xhat: np.ndarray):
    lead = tuple(range(g.ndim - 1))
    return (g * xhat).sum(axis=lead), g.sum(axis=lead)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = Config.LN_EPS) -> Tensor:
    k = x.shape[-1]
    if k < 2:
        raise ConfigurationError(f"layer_norm needs rows of width >= 2, got {k}")
    if gain.shape != (k,) or bias.shape != (k,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {k}")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gv = gain.values

    def backward(g):
        dxhat = g * gv
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        dgain, dbias = _layer_norm_param_grads(g, xhat)
        return dx, dgain, dbias

    return custom_op(xhat * gv + bias.values, (x, gain, bias), backward)


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True at positions that may receive mass"""
    xv = x.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask {mask.shape} does not match scores {x.shape}")
        if not mask.any(axis=-1).all():
            raise InvalidMaskError("softmax_rows: a row is fully masked")
        xv = np.where(mask, xv, -np.inf)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op(p, (x,), backward)


def mlp_scores(a: Tensor, b: Tensor, v: Tensor) -> Tensor:
    """scores[n, i, j] = v . tanh(a[n, i] + b[n, j])"""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise DimensionError(f"mlp_scores: incompatible query {a.shape} and memory {b.shape}")
    if v.shape != (a.shape[2],):
        raise DimensionError(f"mlp_scores: vector {v.shape} does not match width {a.shape[2]}")
    u = np.tanh(a.values[:, :, None, :] + b.values[:, None, :, :])
    vv = v.values

    def backward(g):
        dpre = (g[..., None] * vv) * (1.0 - u * u)
        dv = np.einsum("ntsd,nts->d", u, g)
        return dpre.sum(axis=2), dpre.sum(axis=1), dv

    return custom_op(u @ vv, (a, b, v), backward)


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        first = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if t.ndim != ndim or other != first:
            raise DimensionError(f"concat: shapes {[x.shape for x in tensors]} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> List[Tensor]:
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis] or any(s <= 0 for s in sizes):
        raise DimensionError(f"split: sizes {list(sizes)} do not partition axis {axis} of {x.shape}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.values)
            full[index] = g
            return (full,)

        pieces.append(custom_op(x.values[index].copy(), (x,), backward))
        start += size
    return pieces


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)]
        raise VocabularyError(f"token ids {sorted(set(bad.tolist()))[:5]} outside vocabulary of size {vocab}")

    def backward(g):
        full = np.zeros_like(table.values)
        np.add.at(full, ids, g)
        return (full,)

    return custom_op(table.values[ids], (table,), backward)


# ---------------------------------------------------------------------------
# Regularization
# ---------------------------------------------------------------------------

RngLike = Union[np.random.Generator, int, None]


def make_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def dropout(x: Tensor, p: float, training: bool, rng: RngLike = None) -> Tensor:
    """Inverted dropout; identity (the same tensor) at inference or p == 0"""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = make_rng(rng).random(x.shape) >= p
    factor = (keep / (1.0 - p)).astype(x.dtype)
    return custom_op(x.values * factor, (x,), lambda g: (g * factor,))


def parameter(values, name: str = None, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name, dtype=dtype)


def constant(values, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=False, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or Config.DEFAULT_PRECISION))
