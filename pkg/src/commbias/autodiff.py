"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to tensors that live on it.
Tensors without a tape are constants: operations on them compute values only,
which is what rollouts use for cheap inference.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    loss = ad.sum(ad.relu(ad.matmul(x, w)))
    backward(tape, loss)
    w.grad
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_CLAMP = 1e-10


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "tape", "node")

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None):
        self.values = np.asarray(values)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        where = f"node={self.node}" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Entry:
    outputs: tuple[int, ...]
    inputs: tuple[int | None, ...]
    rule: Callable[[list], list]


class Tape:
    """Ordered record of primitive applications.

    Node ids are assigned in recording order, so inputs always precede their
    consumers and the backward pass simply walks the entries in reverse.
    """

    def __init__(self) -> None:
        self.entries: list[_Entry] = []
        self.leaves: list[Tensor] = []
        self._next = 0

    def _new_id(self) -> int:
        self._next += 1
        return self._next - 1

    def leaf(self, values, dtype=None) -> Tensor:
        arr = np.array(values, dtype=dtype, copy=True)
        t = Tensor(arr, self, self._new_id())
        self.leaves.append(t)
        return t

    def record(self, inputs: Sequence[Tensor], outputs: Sequence[np.ndarray],
               rule: Callable[[list], list]) -> list[Tensor]:
        outs = [Tensor(v, self, self._new_id()) for v in outputs]
        in_ids = tuple(t.node if t.tape is self else None for t in inputs)
        self.entries.append(_Entry(tuple(o.node for o in outs), in_ids, rule))
        return outs

    def __len__(self) -> int:
        return len(self.entries)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError("inputs belong to different tapes")
    return tape


def _emit(inputs: Sequence[Tensor], outputs: Sequence[np.ndarray], rule) -> list[Tensor]:
    tape = _tape_of(inputs)
    if tape is None:
        return [Tensor(v) for v in outputs]
    return tape.record(inputs, outputs, rule)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars adopt the partner's dtype so float32 graphs stay float32.
    if not isinstance(a, Tensor) and isinstance(b, Tensor) and np.isscalar(a):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor) and isinstance(a, Tensor) and np.isscalar(b):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit([a, b], [a.values + b.values],
                 lambda g: [_unbroadcast(g[0], sa), _unbroadcast(g[0], sb)])[0]


def subtract(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _emit([a, b], [a.values - b.values],
                 lambda g: [_unbroadcast(g[0], sa), _unbroadcast(-g[0], sb)])[0]


def multiply(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("multiply", a, b)
    av, bv = a.values, b.values
    return _emit([a, b], [av * bv],
                 lambda g: [_unbroadcast(g[0] * bv, av.shape),
                            _unbroadcast(g[0] * av, bv.shape)])[0]


def _unary(x, value: np.ndarray, dfn) -> Tensor:
    x = as_tensor(x)
    return _emit([x], [value], lambda g: [dfn(g[0])])[0]


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _unary(x, np.where(mask, x.values, 0).astype(x.dtype), lambda g: g * mask)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.values)
    return _unary(x, y, lambda g: g * (1 - y * y))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.values)
    return _unary(x, y, lambda g: g * y * (1 - y))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    return _unary(x, v * v, lambda g: 2 * g * v)


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    v = x.values
    return _unary(x, np.abs(v), lambda g: g * np.sign(v))


def log(x) -> Tensor:
    """Natural log with the argument clamped at 1e-10; zero gradient below it."""
    x = as_tensor(x)
    v = x.values
    safe = np.maximum(v, LOG_CLAMP)
    live = v >= LOG_CLAMP
    return _unary(x, np.log(safe), lambda g: np.where(live, g / safe, 0).astype(g.dtype))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.values)
    return _unary(x, y, lambda g: g * y)


def stop_gradient(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.values, lambda g: np.zeros_like(g))


# ------------------------------------------------------------------ softmaxes

def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    s = _softmax(x.values)
    return _unary(x, s, lambda g: s * (g - (g * s).sum(axis=-1, keepdims=True)))


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _unary(x, out, lambda g: g - s * g.sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------- reductions

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    axes = _normalize_axis(axis, x.values.ndim)
    out = x.values.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(dtype)

    def rule(g):
        g = g[0]
        if not keepdims:
            g = np.expand_dims(g, axes)
        return [np.broadcast_to(g, shape).astype(dtype)]

    return _emit([x], [out], rule)[0]


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    axes = _normalize_axis(axis, x.values.ndim)
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    out = x.values.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(dtype)

    def rule(g):
        g = g[0]
        if not keepdims:
            g = np.expand_dims(g, axes)
        return [(np.broadcast_to(g, shape) / count).astype(dtype)]

    return _emit([x], [out], rule)[0]


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    """``a[..., K] @ b[K, M]``; leading dims of ``a`` are treated as batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim < 1 or b.values.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        g = g[0]
        ga = g @ bv.T
        a2 = av.reshape(-1, av.shape[-1])
        gb = a2.T @ g.reshape(-1, bv.shape[1])
        return [ga, gb]

    return _emit([a, b], [av @ bv], rule)[0]


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].values.ndim
    ax = axis % nd
    for t in ts:
        if t.values.ndim != nd or any(
                t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.values for t in ts], axis=ax)
    return _emit(ts, [out], lambda g: np.split(g[0], splits, axis=ax))[0]


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _unary(x, out, lambda g: g.reshape(old))


def gather(x, index) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather: index shape {idx.shape} does not match {x.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise ShapeError(f"gather: index out of range for last axis of {x.shape}")
    out = np.take_along_axis(x.values, idx[..., None], axis=-1)[..., 0]
    shape, dtype = x.shape, x.dtype

    def rule(g):
        gx = np.zeros(shape, dtype=dtype)
        np.put_along_axis(gx, idx[..., None], g[0][..., None], axis=-1)
        return [gx]

    return _emit([x], [out], rule)[0]


# ----------------------------------------------------------------- conv/pool

def conv2d(x, w) -> Tensor:
    """Valid, stride-1 convolution. ``x``: [N, H, W, C]; ``w``: [kh, kw, C, O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.values.ndim != 4 or w.values.ndim != 4 or x.shape[3] != w.shape[2] \
            or x.shape[1] < w.shape[0] or x.shape[2] < w.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    xv, wv = x.values, w.values
    n, h, wd, c = xv.shape
    kh, kw, _, o = wv.shape
    ho, wo = h - kh + 1, wd - kw + 1
    # [N, Ho, Wo, C, kh, kw] -> [N*Ho*Wo, kh*kw*C]
    cols = sliding_window_view(xv, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = wv.reshape(kh * kw * c, o)
    out = (cols @ wmat).reshape(n, ho, wo, o)

    def rule(g):
        g2 = g[0].reshape(n * ho * wo, o)
        gw = (cols.T @ g2).reshape(wv.shape)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, c)
        gx = np.zeros_like(xv)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
        return [gx, gw]

    return _emit([x, w], [out], rule)[0]


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2 over [N, H, W, C]; ties route to the first max."""
    x = as_tensor(x)
    if x.values.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"maxpool2d: expected [N, H>=2, W>=2, C], got {x.shape}")
    xv = x.values
    n, h, w, c = xv.shape
    h2, w2 = h // 2, w // 2
    win = xv[:, :h2 * 2, :w2 * 2, :].reshape(n, h2, 2, w2, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros((n, h2, w2, c, 4), dtype=xv.dtype)
        np.put_along_axis(gw, arg[..., None], g[0][..., None], axis=-1)
        gw = gw.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros_like(xv)
        gx[:, :h2 * 2, :w2 * 2, :] = gw.reshape(n, h2 * 2, w2 * 2, c)
        return [gx]

    return _emit([x], [out], rule)[0]


# ----------------------------------------------------------------------- lstm

def lstm_cell(x, h, c, w, b) -> tuple[Tensor, Tensor]:
    """One LSTM step; gates packed as [input, forget, cell, output] in ``w``/``b``.

    ``x``: [N, D], ``h``/``c``: [N, H], ``w``: [D + H, 4H], ``b``: [4H].
    Returns the new ``(h, c)``.
    """
    x, h, c, w, b = (as_tensor(t) for t in (x, h, c, w, b))
    n, d = x.shape
    hs = h.shape[-1]
    if h.shape != (n, hs) or c.shape != (n, hs) or w.shape != (d + hs, 4 * hs) \
            or b.shape != (4 * hs,):
        raise ShapeError(
            f"lstm-cell: incompatible x {x.shape}, h {h.shape}, c {c.shape}, "
            f"w {w.shape}, b {b.shape}")
    xh = np.concatenate([x.values, h.values], axis=1)
    z = xh @ w.values + b.values
    i = _sigmoid(z[:, :hs])
    f = _sigmoid(z[:, hs:2 * hs])
    gg = np.tanh(z[:, 2 * hs:3 * hs])
    o = _sigmoid(z[:, 3 * hs:])
    cv = c.values
    c_new = f * cv + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    wv = w.values

    def rule(grads):
        gh, gc = grads
        if gh is None:
            gh = np.zeros_like(h_new)
        gc = np.zeros_like(c_new) if gc is None else gc.copy()
        gc += gh * o * (1 - tc * tc)
        dz = np.concatenate([
            gc * gg * i * (1 - i),
            gc * cv * f * (1 - f),
            gc * i * (1 - gg * gg),
            gh * tc * o * (1 - o),
        ], axis=1)
        gxh = dz @ wv.T
        return [gxh[:, :d], gxh[:, d:], gc * f, xh.T @ dz, dz.sum(axis=0)]

    outs = _emit([x, h, c, w, b], [h_new, c_new], rule)
    return outs[0], outs[1]


# ------------------------------------------------------------------- dispatch

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "reshape": reshape,
    "sum": sum,
    "mean": mean,
    "square": square,
    "abs": abs,
    "log": log,
    "exp": exp,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "gather": gather,
    "stop-gradient": stop_gradient,
    "lstm-cell": lstm_cell,
}


def apply_primitive(kind: str, inputs: Sequence, **attrs):
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# ------------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor) -> list[np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad``; returns them in leaf order."""
    if loss.tape is not tape:
        raise TapeError("loss is not on this tape")
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.values)}
    for entry in reversed(tape.entries):
        gouts = [grads.pop(o, None) for o in entry.outputs]
        if all(g is None for g in gouts):
            continue
        gins = entry.rule(gouts)
        for node, g in zip(entry.inputs, gins):
            if node is None or g is None:
                continue
            prev = grads.get(node)
            grads[node] = g if prev is None else prev + g
    out = []
    for leaf in tape.leaves:
        g = grads.get(leaf.node)
        leaf.grad = np.zeros_like(leaf.values) if g is None else g.astype(leaf.dtype, copy=False)
        out.append(leaf.grad)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def check_gradient(fn: Callable[[Tensor], Tensor], x, h: float = 1e-3,
                   tol: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn`` at ``x`` with central differences.

    The error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
    i.e. relative to the gradient's scale so near-zero coordinates do not blow up.
    Evaluation happens in float64.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x0)
    out = fn(leaf)
    if not np.all(np.isfinite(out.values)):
        raise FloatingPointError("function value is not finite")
    backward(tape, out)
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(Tensor(x0)).values)
        flat[i] = orig - h
        fm = float(fn(Tensor(x0)).values)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise FloatingPointError("non-finite gradient")
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    err = diff / scale if scale > 1e-12 else diff
    return GradCheckReport(float(err), bool(err < tol), analytic, numeric)
