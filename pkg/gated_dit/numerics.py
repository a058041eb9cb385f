#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Numerics
Dense float64 tensors with tape-based reverse-mode differentiation.

Provides:
1. Tensor: row-major float64 array plus optional gradient buffer
2. Tape: records operations while active and replays them backwards
3. Differentiable ops (matmul, relu, sigmoid, softmax_rows, layer_norm, elementwise, ...)
4. grad_check: central finite-difference verification of any scalar function
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, NonFiniteFunctionError, NonScalarLossError, TapeError

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense float64 array. Data is never shared with the caller's array."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal constructor for freshly computed arrays (no extra copy)
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise NonScalarLossError(self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self):
        self.grad = None

    def backward(self, wrt: Optional[Iterable["Tensor"]] = None, accumulate: bool = False):
        backward(self, wrt=wrt, accumulate=accumulate)

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{tag}, requires_grad={self.requires_grad})"


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ==================== TAPE ====================

@dataclass
class TapeEntry:
    """One recorded operation"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_rule: BackwardRule


class Tape:
    """
    Ordered record of the operations of one forward pass.

    Usage:
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    _local = threading.local()

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._produced: set = set()

    @classmethod
    def _stack(cls) -> list:
        stack = getattr(cls._local, "stack", None)
        if stack is None:
            stack = []
            cls._local.stack = stack
        return stack

    @classmethod
    def current(cls) -> Optional["Tape"]:
        stack = cls._stack()
        return stack[-1] if stack else None

    def __enter__(self) -> "Tape":
        self._stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        self._stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, rule: BackwardRule):
        self.entries.append(TapeEntry(op, inputs, output, rule))
        self._produced.add(id(output))
        output._tape = self

    def leaves(self) -> List[Tensor]:
        """requires_grad tensors consumed by the tape but produced outside it"""
        seen = set()
        found = []
        for entry in self.entries:
            for t in entry.inputs:
                key = id(t)
                if t.requires_grad and key not in self._produced and key not in seen:
                    seen.add(key)
                    found.append(t)
        return found

    def backward(self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None,
                 accumulate: bool = False) -> Dict[int, np.ndarray]:
        if loss.size != 1:
            raise NonScalarLossError(loss.shape)

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for t, gi in zip(entry.inputs, entry.backward_rule(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi

        targets = list(wrt) if wrt is not None else self.leaves()
        for t in targets:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            if accumulate and t.grad is not None:
                t.grad = t.grad + g
            else:
                t.grad = np.array(g, dtype=np.float64, copy=True)
        return grads


@contextmanager
def no_tape():
    """Suspend recording (used by grad_check and inference)"""
    stack = Tape._stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None, accumulate: bool = False):
    """Assign d(loss)/d(leaf) to every requires_grad leaf on the loss's tape"""
    if loss.size != 1:
        raise NonScalarLossError(loss.shape)
    tape = loss._tape
    if tape is None:
        if wrt is None:
            raise TapeError("loss was not produced under an active Tape")
        for t in wrt:
            g = np.ones_like(t.data) if t is loss else np.zeros_like(t.data)
            t.grad = t.grad + g if (accumulate and t.grad is not None) else g
        return
    tape.backward(loss, wrt=wrt, accumulate=accumulate)


def _record(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, rule: BackwardRule) -> Tensor:
    tape = Tape.current()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, result, rule)
    return result


# ==================== OPERATIONS ====================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape, detail="inner dimensions must agree")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("softmax_rows", x.shape, detail="expects a matrix")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", (x,), s, rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        dxhat = g * gd
        dx = (inv / d) * (d * dxhat - dxhat.sum(axis=1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", (x, gain, bias), xhat * gd + bias.data, rule)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # column broadcast: [n x d] gradient flowing into an [n x 1] operand
    return grad.sum(axis=1, keepdims=True)


def _broadcast_ok(a: Tensor, b: Tensor) -> bool:
    if a.shape == b.shape:
        return True
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        return False
    return a.shape[1] == 1 or b.shape[1] == 1


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """add / sub / mul with optional [n x 1] column broadcast on either side"""
    if not _broadcast_ok(a, b):
        raise DimensionError(f"elementwise[{kind}]", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    if kind == "add":
        out = ad + bd
        rule = lambda g: (_reduce_to(g, sa), _reduce_to(g, sb))
    elif kind == "sub":
        out = ad - bd
        rule = lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb))
    elif kind == "mul":
        out = ad * bd
        rule = lambda g: (_reduce_to(g * bd, sa), _reduce_to(g * ad, sb))
    else:
        raise ValueError(f"unknown elementwise kind: {kind}")
    return _record(kind, (a, b), out, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _record("add_scalar", (x,), x.data + c, lambda g: (g,))


def reciprocal(x: Tensor) -> Tensor:
    r = 1.0 / x.data
    return _record("reciprocal", (x,), r, lambda g: (-g * r * r,))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("transpose", x.shape, detail="expects a matrix")
    return _record("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def _concat(tensors: Sequence[Tensor], axis: int, op: str) -> Tensor:
    if not tensors:
        raise DimensionError(op, detail="nothing to concatenate")
    other = 1 - axis
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 2 or t.shape[other] != ref[other]:
            raise DimensionError(op, *[s.shape for s in tensors])
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def rule(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _record(op, tuple(tensors), out, rule)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, 0, "concat_rows")


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, 1, "concat_cols")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[0]:
        raise DimensionError("slice_rows", x.shape, detail=f"rows [{start}, {stop})")
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record("slice_rows", (x,), x.data[start:stop].copy(), rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError("slice_cols", x.shape, detail=f"cols [{start}, {stop})")
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", (x,), x.data[:, start:stop].copy(), rule)


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or idx.size == 0 or idx.min() < 0 or idx.max() >= x.shape[0]:
        raise DimensionError("gather_rows", x.shape, detail=f"indices {idx.tolist()}")
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("gather_rows", (x,), x.data[idx].copy(), rule)


def gather_flat(x: Tensor, index: np.ndarray) -> Tensor:
    """out[...] = x.flat[index[...]]; used for patch <-> image layout changes"""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.size):
        raise DimensionError("gather_flat", x.shape, index.shape)
    shape = x.shape

    def rule(g):
        full = np.zeros(x.size)
        np.add.at(full, index.reshape(-1), g.reshape(-1))
        return (full.reshape(shape),)

    return _record("gather_flat", (x,), x.data.reshape(-1)[index], rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError("reshape", x.shape, shape)
    src = x.shape
    return _record("reshape", (x,), x.data.reshape(shape).copy(), lambda g: (g.reshape(src),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum_all", (x,), np.array([x.data.sum()]),
                   lambda g: (np.full(shape, g.reshape(-1)[0]),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _record("mean_all", (x,), np.array([x.data.mean()]),
                   lambda g: (np.full(shape, g.reshape(-1)[0] / n),))


# ==================== COMPOSITES ====================

def tile_rows(row: Tensor, n: int) -> Tensor:
    """Repeat a [1 x d] row n times (ones[n x 1] @ row)"""
    if row.ndim != 2 or row.shape[0] != 1:
        raise DimensionError("tile_rows", row.shape, detail="expects a [1 x d] row")
    return matmul(constant(np.ones((n, 1))), row)


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """x + row broadcast over tokens"""
    return add(x, tile_rows(row, x.shape[0]))


def gelu(x: Tensor) -> Tensor:
    """x * sigmoid(1.702 x)"""
    return mul(x, sigmoid(scale(x, 1.702)))


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("mse", a.shape, b.shape)
    d = sub(a, b)
    return mean_all(mul(d, d))


# ==================== GRADIENT CHECK ====================

@dataclass
class GradCheckReport:
    """Result of comparing analytic and central-difference gradients"""
    max_rel_error: float
    max_abs_error: float
    worst_input: int
    worst_index: Tuple[int, ...]
    n_checked: int
    tol: float
    atol: float = 0.0
    n_failed: int = 0

    @property
    def passed(self) -> bool:
        return self.n_failed == 0


def _scalar_value(out: Tensor) -> float:
    if out.size != 1:
        raise NonScalarLossError(out.shape)
    value = float(out.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise NonFiniteFunctionError(f"f evaluated to {value}")
    return value


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-6, atol: float = 1e-9, floor: float = 1e-8,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """
    Compare backward() against central differences for every coordinate.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). A coordinate fails
    when its relative error reaches tol and its absolute error reaches atol; atol sits at
    the round-off level of a central difference, so it only rescues true zeros.
    max_coords limits how many coordinates per input are checked (sampled with rng).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True

    with Tape() as tape:
        out = f(*inputs)
    _scalar_value(out)
    tape.backward(out, wrt=inputs)
    analytic = [t.grad.copy() for t in inputs]

    worst = worst_failed = None
    max_rel = max_abs = 0.0
    n_checked = n_failed = 0
    with no_tape():
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                picker = rng if rng is not None else np.random.default_rng(k)
                coords = np.sort(picker.choice(flat.size, size=max_coords, replace=False))
            a_flat = analytic[k].reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = _scalar_value(f(*inputs))
                flat[i] = orig - eps
                f_minus = _scalar_value(f(*inputs))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                abs_err = abs(a_flat[i] - numeric)
                rel_err = abs_err / max(abs(a_flat[i]), abs(numeric), floor)
                n_checked += 1
                max_rel = max(max_rel, rel_err)
                max_abs = max(max_abs, abs_err)
                where = (rel_err, k, np.unravel_index(i, t.shape))
                if worst is None or rel_err > worst[0]:
                    worst = where
                if rel_err >= tol and abs_err >= atol:
                    n_failed += 1
                    if worst_failed is None or rel_err > worst_failed[0]:
                        worst_failed = where

    # report the worst failing coordinate when there is one
    worst = worst_failed or worst or (0.0, 0, (0,))

    report = GradCheckReport(
        max_rel_error=float(max_rel),
        max_abs_error=float(max_abs),
        worst_input=int(worst[1]),
        worst_index=tuple(int(v) for v in worst[2]),
        n_checked=n_checked,
        tol=tol,
        atol=atol,
        n_failed=int(n_failed),
    )
    if not report.passed:
        logger.debug(f"grad_check failed: {report.n_failed} coord(s), rel={report.max_rel_error:.3e}, "
                     f"worst at input {report.worst_input} index {report.worst_index}")
    return report
