"""Dense tensors with tape-based reverse-mode differentiation and Adam.

Tensors wrap numpy arrays. Every op records itself on the innermost active
:class:`GradTape` when at least one input requires a gradient; outside a tape
nothing is recorded, which is how target-network passes stay detached.

Training runs in float32. ``precision(np.float64)`` switches the default
dtype for gradient checks.
"""
from __future__ import annotations

import builtins
import contextlib
import ctypes
import ctypes.util
import platform
import sys
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy import sparse

from .errors import ContractError, DimensionError, DivergenceError

_DTYPE: list[type] = [np.float32]
_TAPES: list["GradTape"] = []


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


# x86-64 MXCSR bits: flush-to-zero (15) and denormals-are-zero (6)
_FTZ_DAZ = 0x8040
_FENV_SIZE, _MXCSR_OFFSET = 32, 28  # glibc's fenv_t layout on x86-64


def _libm():
    if sys.platform != "linux" or platform.machine() not in ("x86_64", "AMD64"):
        return None
    name = ctypes.util.find_library("m")
    return ctypes.CDLL(name) if name else None


@contextlib.contextmanager
def flush_denormals() -> Iterator[bool]:
    """Make the CPU treat subnormal floats as zero while the block runs.

    Deep sigmoid stacks push float32 gradients into the subnormal range, where
    every op is one to two orders of magnitude slower; such values are far too
    small to move a parameter. Yields whether the mode could be enabled (x86-64
    Linux only; elsewhere this is a no-op). Results stay deterministic.
    """
    libm = _libm()
    saved = (ctypes.c_char * _FENV_SIZE)()
    if libm is None or libm.fegetenv(saved) != 0:
        yield False
        return
    env = bytearray(bytes(saved))
    mxcsr = int.from_bytes(env[_MXCSR_OFFSET:_MXCSR_OFFSET + 4], "little") | _FTZ_DAZ
    env[_MXCSR_OFFSET:_MXCSR_OFFSET + 4] = mxcsr.to_bytes(4, "little")
    ok = libm.fesetenv((ctypes.c_char * _FENV_SIZE).from_buffer_copy(bytes(env))) == 0
    try:
        yield ok
    finally:
        libm.fesetenv(saved)


class Tensor:
    """Row-major float array, treated as an immutable value."""

    __slots__ = ("data", "name", "requires_grad")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=default_dtype())
        self.name = name
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.name = None
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str) -> Tensor:
    """A named leaf that gradients are computed for."""
    return Tensor(data, name=name, requires_grad=True)


class GradTape:
    """Ordered record of ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _record(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor._wrap(value)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append((out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- scatter helper


class Segments:
    """A reusable ``index -> segment`` map for gathers and segment sums.

    The one-hot sparse matrix is built once, so repeated scatters over the
    same index array cost a single sparse product each.
    """

    __slots__ = ("index", "n", "_onehot")

    def __init__(self, index, n: int):
        self.index = np.asarray(index, dtype=np.intp)
        self.n = int(n)
        self._onehot = None

    def __len__(self) -> int:
        return self.index.size

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """``out[index[k]] += values[k]``."""
        k = self.index.size
        if k == 0:
            return np.zeros((self.n,) + values.shape[1:], dtype=values.dtype)
        if self._onehot is None:
            self._onehot = {}
        onehot = self._onehot.get(values.dtype)
        if onehot is None:
            order = np.argsort(self.index, kind="stable")
            indptr = np.zeros(self.n + 1, dtype=np.intp)
            np.cumsum(np.bincount(self.index, minlength=self.n), out=indptr[1:])
            onehot = sparse.csr_matrix((np.ones(k, dtype=values.dtype), order, indptr),
                                       shape=(self.n, k))
            self._onehot[values.dtype] = onehot
        flat = np.ascontiguousarray(values).reshape(k, -1)
        return np.asarray(onehot @ flat).reshape((self.n,) + values.shape[1:])


def _segments(index, n: int) -> Segments:
    if isinstance(index, Segments):
        if index.n != n:
            raise DimensionError(f"segments map into {index.n} rows, expected {n}")
        return index
    return Segments(index, n)


def scatter_add(index, values: np.ndarray, n: int) -> np.ndarray:
    return _segments(index, n).scatter(values)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              _unbroadcast(g, sb) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              _unbroadcast(-g, sb) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                              _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                              _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sigmoid(x) -> Tensor:
    """Elementwise logistic function 1 / (1 + exp(-x))."""
    x = as_tensor(x)
    # tanh form cannot overflow for any finite input
    y = 0.5 + 0.5 * np.tanh(0.5 * x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _record(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------- reductions


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _record(np.asarray(x.data.sum(axis=axis)), (x,), vjp)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / max(n, 1))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b),
                   lambda g: (g @ bd.T if a.requires_grad else None,
                              ad.T @ g if b.requires_grad else None))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.T, (x,), lambda g: (g.T,))


def permute(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def batched_matmul(a, b) -> Tensor:
    """``a[k] @ b[k]`` for every k along the leading axis of two 3-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] \
            or a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched_matmul shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b),
                   lambda g: (g @ bd.transpose(0, 2, 1) if a.requires_grad else None,
                              ad.transpose(0, 2, 1) @ g if b.requires_grad else None))


def affine(W, b, x) -> Tensor:
    """``W x + b`` for a vector x, or row-wise ``x W^T + b`` for a matrix x."""
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    if W.data.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],) \
            or x.data.ndim > 2:
        raise DimensionError(
            f"affine: weight {W.shape}, bias {b.shape} and input {x.shape} do not conform")
    Wd, xd = W.data, x.data
    if xd.ndim == 1:
        def vjp(g):
            return np.outer(g, xd), g, Wd.T @ g
        return _record(Wd @ xd + b.data, (W, b, x), vjp)

    def vjp2(g):
        return (g.T @ xd if W.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None,
                g @ Wd if x.requires_grad else None)
    return _record(xd @ Wd.T + b.data, (W, b, x), vjp2)


# ---------------------------------------------------------------- shape / indexing


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(x, index) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate in the gradient.

    ``index`` may be a :class:`Segments` over ``x``'s rows to reuse its
    scatter matrix in the backward pass.
    """
    x = as_tensor(x)
    seg = _segments(index, x.shape[0])
    return _record(x.data[seg.index], (x,), lambda g: (seg.scatter(g),))


def pick(x, rows, cols) -> Tensor:
    """Elements ``x[rows[k], cols[k]]`` as a vector."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record(x.data[rows, cols], (x,), vjp)


def segment_sum(x, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of x that share a segment id; empty segments are zero."""
    x = as_tensor(x)
    seg = _segments(segment_ids, num_segments)
    return _record(seg.scatter(x.data), (x,), lambda g: (g[seg.index],))


def segment_softmax(logits, segment_ids, num_segments: int) -> Tensor:
    """Softmax over rows sharing a segment id, independently per column."""
    logits = as_tensor(logits)
    seg = _segments(segment_ids, num_segments)
    idx = seg.index
    ld = logits.data
    shift = np.full((num_segments,) + ld.shape[1:], -np.inf, dtype=ld.dtype)
    np.maximum.at(shift, idx, ld)
    e = np.exp(ld - shift[idx])
    y = e / seg.scatter(e)[idx]

    def vjp(g):
        gy = g * y
        return (gy - y * seg.scatter(gy)[idx],)

    return _record(y, (logits,), vjp)


# ---------------------------------------------------------------- gradients


def backward(tape: GradTape, loss: Tensor,
             params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` keyed by parameter name.

    ``params`` defaults to every named leaf seen on the tape. Parameters the
    loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is None:
        produced = {id(out) for out, _, _ in tape.nodes}
        params = {}
        for _, inputs, _ in tape.nodes:
            for t in inputs:
                if t.name is not None and t.requires_grad and id(t) not in produced:
                    params[t.name] = t
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gt in zip(inputs, vjp(g)):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gt if prev is None else prev + gt
    result = {}
    for name, t in params.items():
        g = grads.get(id(t))
        result[name] = np.zeros_like(t.data) if g is None else g.reshape(t.shape)
    return result


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor],
                   params: Mapping[str, Tensor]) -> tuple[Tensor, dict[str, np.ndarray]]:
    leaves = {k: Tensor._wrap(v.data) for k, v in params.items()}
    for k, t in leaves.items():
        t.name, t.requires_grad = k, True
    with GradTape() as tape:
        out = fn(leaves)
    return out, backward(tape, out, leaves)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    """First and second moments of all parameters, flattened in name order."""
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step: int = 0
    # reusable scratch space; fresh multi-megabyte temporaries each step cost
    # more in page faults than the arithmetic itself
    work: list[np.ndarray] = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "AdamState":
        size = builtins.sum(p.data.size for p in params.values())
        dtype = np.result_type(*[p.data.dtype for p in params.values()]) if params else np.float64
        return cls(np.zeros(size, dtype), np.zeros(size, dtype), 0)


def adam_update(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                state: AdamState, lr: float, l2_coef: float = 0.0,
                beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam step; ``l2_coef * theta`` is added to each gradient first.

    Returns new parameter tensors and a new state; inputs are left untouched.
    """
    names = list(params)
    flat_p, flat_g = [], []
    for name in names:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        flat_p.append(p.data.ravel())
        flat_g.append(np.asarray(g).ravel())
    theta = np.concatenate(flat_p) if names else np.zeros(0)
    if state.m.shape != theta.shape:
        raise DimensionError(f"optimizer state holds {state.m.size} values, parameters {theta.size}")
    work = state.work
    if len(work) != 2 or work[0].shape != theta.shape or work[0].dtype != theta.dtype:
        work = [np.empty_like(theta), np.empty_like(theta)]
    g, tmp = work
    if names:
        np.concatenate(flat_g, out=g, casting="same_kind")
    if not np.isfinite(g.sum()) and not np.isfinite(g).all():
        bad = next(n for n, fg in zip(names, flat_g) if not np.isfinite(fg).all())
        raise DivergenceError(f"non-finite gradient for parameter {bad!r}")
    if l2_coef:
        g += np.multiply(theta, l2_coef, out=tmp)
    step = state.step + 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    m = np.multiply(state.m, beta1)
    m += np.multiply(g, 1.0 - beta1, out=tmp)
    v = np.multiply(state.v, beta2)
    np.multiply(g, g, out=g)
    g *= 1.0 - beta2
    v += g
    denom = np.multiply(v, 1.0 / c2, out=g)
    np.sqrt(denom, out=denom)
    denom += eps
    upd = np.multiply(m, lr / c1, out=tmp)
    upd /= denom
    theta -= upd
    new_params, offset = {}, 0
    for name in names:
        p = params[name]
        t = Tensor._wrap(theta[offset:offset + p.data.size].reshape(p.shape))
        t.name = p.name
        new_params[name] = t
        offset += p.data.size
    return new_params, AdamState(m, v, step, work)


# ---------------------------------------------------------------- gradient check


def gradient_errors(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, Tensor],
                    *, h: float | None = None, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Per-parameter relative error between tape and finite-difference gradients.

    Numerical derivatives use the five-point stencil, whose truncation error
    is O(h**4), so deep parameters with tiny gradients are not swamped by
    rounding noise. For each parameter the error is ``max|a - n| / max(max|a|, max|n|, 1e-8)``
    over the checked entries. ``max_entries`` caps how many entries (chosen
    at random) are perturbed per parameter.
    """
    if h is None:
        h = 1e-4 if default_dtype() == np.float64 else 1e-2
    rng = rng or np.random.default_rng(0)
    base = {k: Tensor(v.data, name=k) for k, v in params.items()}
    _, analytic = value_and_grad(fn, base)
    floor = 1e-6 * max((float(np.max(np.abs(g), initial=0.0)) for g in analytic.values()),
                       default=0.0)
    floor = max(floor, 1e-12)
    errors = {}
    for name, p in base.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for k, i in enumerate(idx):
            vals = []
            for step in (2.0, 1.0, -1.0, -2.0):
                bumped = flat.copy()
                bumped[i] += step * h
                trial = dict(base)
                trial[name] = Tensor(bumped.reshape(p.shape), name=name)
                vals.append(float(fn(trial).item()))
            num[k] = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * h)
        ana = analytic[name].reshape(-1)[idx].astype(np.float64)
        scale = max(np.max(np.abs(ana), initial=0.0), np.max(np.abs(num), initial=0.0), floor)
        errors[name] = float(np.max(np.abs(ana - num), initial=0.0) / scale)
    return errors


def check_gradients(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, Tensor],
                    inputs=None, **kwargs) -> float:
    """Max over parameters of the relative gradient error (see ``gradient_errors``).

    When ``inputs`` is given, ``fn`` is called as ``fn(params, inputs)``.
    """
    f = fn if inputs is None else (lambda p: fn(p, inputs))
    errs = gradient_errors(f, params, **kwargs)
    return max(errs.values(), default=0.0)
