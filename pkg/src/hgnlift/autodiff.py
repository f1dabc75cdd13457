"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records operations in creation order while it is active; backward()
replays the records in exact reverse order and accumulates gradients into
the leaf Variables that require them.  All values are numpy float64 arrays,
so forward results are bit-identical run to run.
"""
from __future__ import annotations

import itertools
import threading

import numpy as np

Tensor = np.ndarray

_ids = itertools.count()
_tls = threading.local()


class ShapeError(ValueError):
    pass


class UnknownOpError(ValueError):
    pass


def tensor(data) -> Tensor:
    """Coerce input to a float64 array (the only dtype the engine uses)."""
    return np.asarray(data, dtype=np.float64)


def _stack():
    s = getattr(_tls, "tapes", None)
    if s is None:
        s = _tls.tapes = []
    return s


def active_tape():
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered record of operations; confined to the thread that opened it."""

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self
        return False


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Variable:
    """A float64 array plus gradient bookkeeping.

    Leaves are constructed directly (parameters with requires_grad=True,
    constants with False).  Ops return intermediate Variables wired to the
    active tape.  Gradients accumulate into .grad on leaves only; call
    zero_grad() between optimisation steps.
    """

    __slots__ = ("value", "requires_grad", "tape_id", "_grad", "_tape", "_idx")

    def __init__(self, value, requires_grad=False):
        self.value = tensor(value)
        self.requires_grad = bool(requires_grad)
        self.tape_id = next(_ids)
        self._grad = None
        self._tape = None
        self._idx = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, g):
        if self._grad is None:
            self._grad = g.copy()
        else:
            self._grad += g

    # operator sugar; non-Variable operands become constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return hadamard(self, _wrap(other))

    def __rmul__(self, other):
        return hadamard(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Variable) else Variable(x)


def _emit(value, inputs, vjp):
    """Create the output Variable and record it if gradients are in play."""
    track = any(v.requires_grad for v in inputs)
    out = Variable(value, requires_grad=track)
    tape = active_tape()
    if track and tape is not None:
        out._tape = tape
        out._idx = len(tape.records)
        tape.records.append(_Record(out, inputs, vjp))
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_elementwise(op, a, b):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} do not broadcast")


def _mT(x):
    return np.swapaxes(x, -1, -2)


def add(a, b):
    _check_elementwise("add", a, b)
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))


def sub(a, b):
    _check_elementwise("sub", a, b)
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)))


def hadamard(a, b):
    _check_elementwise("hadamard", a, b)
    return _emit(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.value.shape),
                            _unbroadcast(g * a.value, b.value.shape)))


def div(a, b):
    _check_elementwise("div", a, b)
    return _emit(a.value / b.value, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.value.shape),
                            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)))


def matmul(a, b):
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: requires rank >= 2 operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, _mT(bv)), av.shape)
        gb = _unbroadcast(np.matmul(_mT(av), g), bv.shape)
        return ga, gb

    return _emit(np.matmul(av, bv), (a, b), vjp)


def relu(a):
    mask = a.value > 0
    return _emit(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def scale(a, alpha):
    alpha = float(alpha)
    return _emit(a.value * alpha, (a,), lambda g: (g * alpha,))


def exp(a):
    out_val = np.exp(a.value)
    return _emit(out_val, (a,), lambda g: (g * out_val,))


def sqrt(a):
    out_val = np.sqrt(a.value)
    return _emit(out_val, (a,), lambda g: (g * 0.5 / out_val,))


def square(a):
    return _emit(a.value * a.value, (a,), lambda g: (g * 2.0 * a.value,))


def vsum(a, axis=None, keepdims=False):
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return _emit(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def vmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.value.shape[ax]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.value.shape).copy(),)

    return _emit(a.value.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def transpose(a):
    """Swap the last two axes (batch axes untouched)."""
    if a.value.ndim < 2:
        raise ShapeError(f"transpose: requires rank >= 2, got {a.value.shape}")
    return _emit(_mT(a.value).copy(), (a,), lambda g: (_mT(g).copy(),))


def concat_channels(parts):
    parts = [_wrap(p) for p in parts]
    lead = parts[0].value.shape[:-1]
    for p in parts[1:]:
        if p.value.shape[:-1] != lead:
            raise ShapeError(
                f"concat_channels: leading shapes differ, {parts[0].value.shape} vs {p.value.shape}")
    sizes = [p.value.shape[-1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=-1))

    return _emit(np.concatenate([p.value for p in parts], axis=-1), tuple(parts), vjp)


def reshape(a, shape):
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),))


def scatter(values, flat_index, shape):
    """Place a vector of values at fixed flat positions of a zero array.

    flat_index must hold unique positions; gradient gathers at the same spots.
    """
    idx = np.asarray(flat_index, dtype=np.intp)
    if values.value.ndim != 1 or idx.shape != values.value.shape:
        raise ShapeError(
            f"scatter: values {values.value.shape} and index {idx.shape} must be matching vectors")
    out_val = np.zeros(shape, dtype=np.float64)
    out_val.reshape(-1)[idx] = values.value

    def vjp(g):
        return (g.reshape(-1)[idx].copy(),)

    return _emit(out_val, (values,), vjp)


_PRIMITIVES = {
    "matmul": lambda ins: matmul(ins[0], ins[1]),
    "add": lambda ins: add(ins[0], ins[1]),
    "sub": lambda ins: sub(ins[0], ins[1]),
    "hadamard": lambda ins: hadamard(ins[0], ins[1]),
    "relu": lambda ins: relu(ins[0]),
    "scale": lambda ins: scale(ins[0], ins[1].value if isinstance(ins[1], Variable) else ins[1]),
    "sum": lambda ins: vsum(ins[0]),
    "mean": lambda ins: vmean(ins[0]),
    "transpose": lambda ins: transpose(ins[0]),
    "concat_channels": lambda ins: concat_channels(ins),
    "square": lambda ins: square(ins[0]),
}


def forward_primitive(kind, inputs):
    """Dispatch one primitive by name; the op set the layer stack is built from."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise UnknownOpError(f"unknown primitive kind: {kind!r}")
    return fn([i if isinstance(i, Variable) else _wrap(i) for i in inputs])


def backward(output):
    """Reverse sweep from a scalar output; returns {leaf tape_id: gradient}.

    Gradients accumulate into leaf .grad across repeated calls; intermediate
    gradients are transient to keep repeated sweeps independent.
    """
    if output.value.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {output.value.shape}")
    leaves = {}
    if output._tape is None:
        if output.requires_grad:
            output._accumulate(np.ones_like(output.value))
            leaves[output.tape_id] = output.grad
        return leaves
    tape = output._tape
    grads = {output.tape_id: np.ones_like(output.value)}
    for rec in reversed(tape.records[: output._idx + 1]):
        g = grads.pop(rec.out.tape_id, None)
        if g is None:
            continue
        for v, dg in zip(rec.inputs, rec.vjp(g)):
            if not v.requires_grad:
                continue
            if v._tape is None:
                v._accumulate(dg)
                leaves[v.tape_id] = v.grad
            elif v.tape_id in grads:
                # non-inplace: vjps may hand back aliased arrays (e.g. add)
                grads[v.tape_id] = grads[v.tape_id] + dg
            else:
                grads[v.tape_id] = dg
    return leaves


def gradient_check(f, wrt, step=1e-5, max_coords=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    f is a no-argument callable returning a scalar Variable built from the
    Variables in wrt.  Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8).  max_coords caps the coordinates checked
    per tensor (seeded choice) for use on large parameter sets.
    """
    for v in wrt:
        v.zero_grad()
    with Tape():
        out = f()
        if out.value.size != 1:
            raise ValueError("gradient_check: f must return a scalar")
        backward(out)
    analytic = [v.grad.copy() for v in wrt]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for v, a in zip(wrt, analytic):
        n = v.value.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        flat = v.value.reshape(-1)
        aflat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().value)
            flat[i] = orig - step
            f_minus = float(f().value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
