"""Reverse-mode automatic differentiation on an append-only tape.

Every primitive takes and returns :class:`Tensor` objects.  When a tape is
active and at least one input is a tracked node of that tape, the primitive
appends a node holding its input ids and a vector-Jacobian closure.  Backward
walks the tape once in strictly decreasing node order.

All arrays are float64.  Broadcasting is limited to "array op 0-d scalar".
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape", "Tensor", "TapeNode", "NonFiniteError", "ShapeError", "as_tensor",
    "backward", "vjp", "grad_check", "adjoint_test", "value_and_grad",
    "add", "sub", "mul", "div", "neg", "scale", "power", "sqrt", "exp", "log",
    "absolute", "tanh", "transpose", "leaky_relu", "tsum", "mean", "dot", "matmul", "conv2d",
    "upsample2x", "dense", "dropout", "gather", "scatter_add", "shift2d",
    "staggered_diff", "hilbert", "softmin3", "clamp", "reshape", "stack",
    "concat", "index", "custom_op", "fd_coefficients", "finite_checks",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class TapeNode:
    """One recorded primitive: its inputs (None for constants) and backward rule."""

    __slots__ = ("op_kind", "input_ids", "vjp", "output_shape")

    def __init__(self, op_kind: str, input_ids: tuple, vjp: Callable | None, output_shape: tuple):
        self.op_kind = op_kind
        self.input_ids = input_ids
        self.vjp = vjp
        self.output_shape = output_shape


_ACTIVE: list["Tape"] = []
CHECK_FINITE = True


class Tape:
    """Append-only list of nodes; usable as a context manager.

    >>> with Tape() as tape:
    ...     x = tape.variable(3.0)
    ...     y = x * x
    >>> backward(tape, y, [x])[x.node]
    array(6.)
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.recording = True

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    @contextlib.contextmanager
    def paused(self):
        prev = self.recording
        self.recording = False
        try:
            yield self
        finally:
            self.recording = prev

    def variable(self, value) -> "Tensor":
        """Register `value` as a differentiable leaf."""
        data = np.array(value, dtype=np.float64)
        _check_finite(data, "leaf")
        nid = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), None, data.shape))
        return Tensor(data, nid, self)

    def _append(self, op_kind, input_ids, vjp_fn, shape) -> int:
        nid = len(self.nodes)
        self.nodes.append(TapeNode(op_kind, tuple(input_ids), vjp_fn, shape))
        return nid


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    """Dense float64 array, optionally tracked by a tape node."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100.0

    def __init__(self, data, node: int | None = None, tape: Tape | None = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 \
            else np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor({tag}, shape={self.shape})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __pow__ = lambda a, p: power(a, p)
    __matmul__ = lambda a, b: matmul(a, b)
    __getitem__ = lambda a, key: index(a, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-primitive NaN/Inf check (callers then own detection)."""
    global CHECK_FINITE
    prev = CHECK_FINITE
    CHECK_FINITE = enabled
    try:
        yield
    finally:
        CHECK_FINITE = prev


def _check_finite(data, op):
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from {op}")


def _tracked(tape, t: Tensor) -> bool:
    return t.tape is tape and t.node is not None


def custom_op(op_kind: str, inputs: Sequence[Tensor], out: np.ndarray, make_vjp):
    """Record a primitive.

    `make_vjp` is called only when recording and must return a function
    mapping the output cotangent to a tuple of input cotangents (None for
    inputs that need none).
    """
    _check_finite(out, op_kind)
    tape = active_tape()
    if tape is None or not tape.recording:
        return Tensor(out)
    ids = []
    any_tracked = False
    for t in inputs:
        if _tracked(tape, t):
            ids.append(t.node)
            any_tracked = True
        else:
            ids.append(None)
    if not any_tracked:
        return Tensor(out)
    nid = tape._append(op_kind, ids, make_vjp(), out.shape)
    return Tensor(out, nid, tape)


# ---------------------------------------------------------------- elementwise

def _binary_shapes(a: Tensor, b: Tensor, op):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return custom_op("add", (a, b), a.data + b.data,
                     lambda: lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return custom_op("sub", (a, b), a.data - b.data,
                     lambda: lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def make():
        ta, tb = active_tape(), active_tape()
        need_a, need_b = _tracked(ta, a), _tracked(tb, b)
        return lambda g: (_unbroadcast(g * bd, ad.shape) if need_a else None,
                          _unbroadcast(g * ad, bd.shape) if need_b else None)
    return custom_op("mul", (a, b), ad * bd, make)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def make():
        tape = active_tape()
        need_a, need_b = _tracked(tape, a), _tracked(tape, b)
        return lambda g: (_unbroadcast(g / bd, ad.shape) if need_a else None,
                          _unbroadcast(-g * out / bd, bd.shape) if need_b else None)
    return custom_op("div", (a, b), out, make)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op("neg", (a,), -a.data, lambda: lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return custom_op("scale", (a,), a.data * c, lambda: lambda g: (g * c,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    out = ad ** p
    return custom_op("power", (a,), out, lambda: lambda g: (g * p * ad ** (p - 1.0),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return custom_op("sqrt", (a,), out, lambda: lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op("exp", (a,), out, lambda: lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return custom_op("log", (a,), out, lambda: lambda g: (g / ad,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)  # subgradient 0 at 0
    return custom_op("abs", (a,), np.abs(a.data), lambda: lambda g: (g * sgn,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return custom_op("tanh", (a,), out, lambda: lambda g: (g * (1.0 - out * out),))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    fac = np.where(a.data > 0, 1.0, slope)
    return custom_op(f"leaky_relu({slope})", (a,), a.data * fac, lambda: lambda g: (g * fac,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return custom_op("clamp", (a,), np.clip(a.data, lo, hi), lambda: lambda g: (g * inside,))


def softmin3(a, b, c, gamma: float) -> Tensor:
    """Smoothed minimum -gamma*log(sum exp(-x/gamma)) of three arrays; gamma=0 is the hard min."""
    if gamma < 0:
        raise ValueError("softmin3 requires gamma >= 0")
    a, b, c = as_tensor(a), as_tensor(b), as_tensor(c)
    _binary_shapes(a, b, "softmin3")
    _binary_shapes(a, c, "softmin3")
    x = np.stack(np.broadcast_arrays(a.data, b.data, c.data))
    if gamma == 0:
        k = np.argmin(x, axis=0)
        out = np.take_along_axis(x, k[None], 0)[0]
        w = np.stack([(k == i).astype(np.float64) for i in range(3)])
    else:
        z = -x / gamma
        zmax = z.max(axis=0)
        e = np.exp(z - zmax)
        s = e.sum(axis=0)
        out = -gamma * (np.log(s) + zmax)
        w = e / s
    shapes = (a.shape, b.shape, c.shape)
    return custom_op("softmin3", (a, b, c), out,
                     lambda: lambda g: tuple(_unbroadcast(g * w[i], shapes[i]) for i in range(3)))


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis)
    if axis is None:
        return custom_op("sum", (a,), np.asarray(out), lambda: lambda g: (np.full(shape, float(g)),))
    ax = axis

    def make():
        return lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)
    return custom_op("sum", (a,), np.asarray(out), make)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return scale(tsum(a), 1.0 / n)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = np.asarray(np.dot(ad.ravel(), bd.ravel()))
    return custom_op("dot", (a, b), out, lambda: lambda g: (g * bd, g * ad))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def make():
        def f(g):
            ga = g @ bd.T if ad.ndim > 1 or bd.ndim > 1 else g * bd
            if ad.ndim == 1 and bd.ndim == 2:
                gb = np.outer(ad, g)
            elif ad.ndim == 2 and bd.ndim == 1:
                ga, gb = np.outer(g, bd), ad.T @ g
            else:
                gb = ad.T @ g
            return ga, gb
        return f
    return custom_op("matmul", (a, b), out, make)


# ---------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return custom_op("reshape", (a,), a.data.reshape(shape), lambda: lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")
    return custom_op("transpose", (a,), np.ascontiguousarray(a.data.T), lambda: lambda g: (g.T,))


def index(a, key) -> Tensor:
    """Basic slicing / integer indexing."""
    a = as_tensor(a)
    shape = a.shape

    def make():
        def f(g):
            out = np.zeros(shape)
            out[key] += g
            return (out,)
        return f
    return custom_op("index", (a,), np.array(a.data[key]), make)


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    out = np.stack([t.data for t in items], axis=axis)
    n = len(items)
    return custom_op("stack", items, out,
                     lambda: lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    out = np.concatenate([t.data for t in items], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in items])[:-1]
    return custom_op("concat", items, out, lambda: lambda g: tuple(np.split(g, splits, axis=axis)))


def gather(a, indices) -> Tensor:
    """out = a.ravel()[indices]; the output has the shape of `indices`."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    size, shape = a.size, a.shape

    def make():
        flat = idx.ravel()
        return lambda g: (np.bincount(flat, weights=g.ravel(), minlength=size).reshape(shape),)
    return custom_op("gather", (a,), a.data.ravel()[idx], make)


def scatter_add(a, indices, values) -> Tensor:
    """Copy of `a` with `values` added at flat `indices` (repeats accumulate)."""
    a, values = as_tensor(a), as_tensor(values)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != values.shape:
        raise ShapeError(f"scatter_add: indices {idx.shape} vs values {values.shape}")
    out = a.data.copy()
    np.add.at(out.reshape(-1), idx.ravel(), values.data.ravel())
    return custom_op("scatter_add", (a, values), out,
                     lambda: lambda g: (g, g.ravel()[idx.ravel()].reshape(idx.shape)))


def _shift(x, axis, offset):
    """y[..., i, ...] = x[..., i + offset, ...] along one of the last two axes, zero fill."""
    ax = x.ndim - 2 + axis
    n = x.shape[ax]
    y = np.zeros_like(x)
    if abs(offset) >= n:
        return y
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    if offset >= 0:
        dst[ax], src[ax] = slice(0, n - offset), slice(offset, n)
    else:
        dst[ax], src[ax] = slice(-offset, n), slice(0, n + offset)
    y[tuple(dst)] = x[tuple(src)]
    return y


def shift2d(a, axis: int, offset: int) -> Tensor:
    """Zero-padded shift; axis 0 is z (rows), axis 1 is x (columns)."""
    a = as_tensor(a)
    if a.ndim < 2 or axis not in (0, 1):
        raise ShapeError("shift2d needs a >=2-d array and axis in {0, 1}")
    return custom_op(f"shift2d({axis},{offset})", (a,), _shift(a.data, axis, offset),
                     lambda: lambda g: (_shift(g, axis, -offset),))


def fd_coefficients(order: int) -> np.ndarray:
    """Taylor coefficients of the staggered first derivative of even `order`."""
    if order % 2 or order < 2:
        raise ValueError(f"invalid FD order {order}")
    m = order // 2
    odd = 2 * np.arange(1, m + 1) - 1
    A = np.array([[float(o) ** (2 * i + 1) for o in odd] for i in range(m)])
    rhs = np.zeros(m)
    rhs[0] = 1.0
    return np.linalg.solve(A, rhs)


def _stagger(x, axis, coeffs, forward):
    ax = x.ndim - 2 + axis
    n = x.shape[ax]
    y = np.zeros_like(x)
    sl = [slice(None)] * x.ndim

    def view(arr, lo, hi):
        s = list(sl)
        s[ax] = slice(lo, hi)
        return arr[tuple(s)]

    for k, c in enumerate(coeffs):
        # forward: y[i] += c (x[i+k+1] - x[i-k]);  backward: y[i] += c (x[i+k] - x[i-k-1])
        plus, minus = (k + 1, -k) if forward else (k, -k - 1)
        for off, sgn in ((plus, 1.0), (minus, -1.0)):
            if abs(off) >= n:
                continue
            if off >= 0:
                view(y, 0, n - off)[...] += (sgn * c) * view(x, off, n)
            else:
                view(y, -off, n)[...] += (sgn * c) * view(x, 0, n + off)
    return y


def staggered_diff(a, axis: int, coeffs, forward: bool, inv_h: float = 1.0) -> Tensor:
    """Staggered-grid first derivative along axis 0 (z) or 1 (x).

    forward=True evaluates at i+1/2 from nodes i-k..i+k+1, forward=False at
    i-1/2.  Values outside the array are zero.  The adjoint of the forward
    stencil is minus the backward stencil.
    """
    a = as_tensor(a)
    coeffs = tuple(float(c) * inv_h for c in coeffs)
    out = _stagger(a.data, axis, coeffs, forward)
    return custom_op("staggered_diff", (a,), out,
                     lambda: lambda g: (-_stagger(g, axis, coeffs, not forward),))


def _hilbert_np(x):
    n = x.shape[-1]
    X = np.fft.fft(x, axis=-1)
    h = np.zeros(n)
    if n % 2 == 0:
        h[0] = h[n // 2] = 1.0
        h[1:n // 2] = 2.0
    else:
        h[0] = 1.0
        h[1:(n + 1) // 2] = 2.0
    return np.fft.ifft(X * h, axis=-1).imag


def hilbert(a) -> Tensor:
    """Discrete Hilbert transform along the last axis (imaginary part of the analytic signal)."""
    a = as_tensor(a)
    return custom_op("hilbert", (a,), _hilbert_np(a.data), lambda: lambda g: (-_hilbert_np(g),))


# ---------------------------------------------------------------- network layers

def dense(x, w, b) -> Tensor:
    """Affine map w @ x + b for a 1-d input."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data
    return custom_op("dense", (x, w, b), wd @ xd + b.data,
                     lambda: lambda g: (wd.T @ g, np.outer(g, xd), g))


def _pad_same(x, k):
    lo = (k - 1) // 2
    hi = k - 1 - lo
    return np.pad(x, ((0, 0), (lo, hi), (lo, hi))), lo, hi


def conv2d(x, w, b) -> Tensor:
    """Stride-1 cross-correlation with 'same' zero padding (1 before, 2 after for k=4).

    x: (C_in, H, W); w: (C_out, C_in, k, k); b: (C_out,)
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    cout, cin, k, k2 = w.shape
    if x.ndim != 3 or x.shape[0] != cin or k != k2 or b.shape != (cout,):
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}, b {b.shape}")
    H, W = x.shape[1:]
    xp, lo, hi = _pad_same(x.data, k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # (cin, H, W, k, k)
    wd = w.data
    out = np.tensordot(wd, win, axes=([1, 2, 3], [0, 3, 4])) + b.data[:, None, None]

    def make():
        def f(g):
            gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))  # (cout, cin, k, k)
            gb = g.sum(axis=(1, 2))
            # full correlation with flipped kernel maps output grads back to padded input
            gp = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            gwin = np.lib.stride_tricks.sliding_window_view(gp, (k, k), axis=(1, 2))
            gxp = np.tensordot(wd[:, :, ::-1, ::-1], gwin, axes=([0, 2, 3], [0, 3, 4]))
            gx = gxp[:, lo:lo + H, lo:lo + W]
            return gx, gw, gb
        return f
    return custom_op("conv2d", (x, w, b), out, make)


def upsample2x(a) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes; adjoint is 2x2 block sum."""
    a = as_tensor(a)
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def make():
        def f(g):
            s = g.shape
            return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)
        return f
    return custom_op("upsample2x", (a,), out, make)


def dropout(a, mask, p: float) -> Tensor:
    """Inverted dropout with a precomputed 0/1 mask (a constant)."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeError("dropout mask shape mismatch")
    fac = m / (1.0 - p)
    return custom_op("dropout", (a,), a.data * fac, lambda: lambda g: (g * fac,))


# ---------------------------------------------------------------- backward

def vjp(tape: Tape, outputs: Sequence[Tensor], cotangents: Sequence, leaves: Iterable,
        initial: dict | None = None) -> dict:
    """Pull `cotangents` back from `outputs` to `leaves`.

    `initial` maps leaf node ids to arrays that the leaf gradient starts from;
    contributions are then added in the same order as if the caller's
    upstream computation lived on this tape.
    """
    leaf_ids = [t.node if isinstance(t, Tensor) else int(t) for t in leaves]
    n = len(tape.nodes)
    for lid in leaf_ids:
        if lid is None or not 0 <= lid < n:
            raise KeyError(f"leaf {lid} is not on the tape")
    grads: list = [None] * n
    top = -1
    for out, cot in zip(outputs, cotangents):
        if out.tape is not tape or out.node is None:
            continue
        c = np.asarray(cot, dtype=np.float64)
        if c.shape != out.shape:
            raise ShapeError(f"cotangent shape {c.shape} vs output {out.shape}")
        grads[out.node] = c.copy() if grads[out.node] is None else grads[out.node] + c
        top = max(top, out.node)
    if initial:
        for lid, g0 in initial.items():
            if g0 is not None:
                grads[lid] = np.array(g0, dtype=np.float64) if grads[lid] is None else grads[lid] + g0
    nodes = tape.nodes
    keep = set(leaf_ids)
    for i in range(top, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        contribs = node.vjp(g)
        for inp, c in zip(node.input_ids, contribs):
            if inp is None or c is None:
                continue
            prev = grads[inp]
            grads[inp] = c if prev is None else prev + c
        if i not in keep:
            grads[i] = None  # free memory early
    result = {}
    for lid in leaf_ids:
        g = grads[lid]
        result[lid] = np.zeros(nodes[lid].output_shape) if g is None else g
    return result


def backward(tape: Tape, root: Tensor, leaves: Iterable) -> dict:
    """Gradient of a scalar root with respect to each leaf, keyed by node id."""
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    leaves = list(leaves)
    for t in leaves:
        lid = t.node if isinstance(t, Tensor) else int(t)
        if root.node is not None and lid is not None and lid > root.node:
            raise KeyError(f"leaf {lid} does not precede root {root.node}")
    return vjp(tape, [root], [np.ones(root.shape)], leaves)


def value_and_grad(f: Callable, *arrays):
    """Evaluate f(*leaf tensors) on a fresh tape; return (value, [grads])."""
    with Tape() as tape:
        xs = [tape.variable(a) for a in arrays]
        y = f(*xs)
    g = backward(tape, y, xs)
    return float(y.data), [g[x.node] for x in xs]


def grad_check(f: Callable, x, h: float = 1e-6, floor: float = 1e-12, indices=None) -> float:
    """Max relative difference between the AD gradient and central differences.

    `indices` restricts the probe to a subset of flat components.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    _, (g_ad,) = value_and_grad(f, x)
    g_ad = g_ad.ravel()
    probe = range(x.size) if indices is None else indices
    worst = 0.0
    for i in probe:
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        fp, fm = float(f(Tensor(xp)).data), float(f(Tensor(xm)).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f not finite at probe {i}")
        g_fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(g_ad[i] - g_fd) / (abs(g_fd) + floor))
    return worst


def adjoint_test(op: Callable, in_shape, seed: int = 0, floor: float = 1e-30) -> float:
    """Dot-product test |<Lx, y> - <x, L^T y>| / (|<Lx, y>| + floor).

    L^T y is obtained from the op's recorded backward rule.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(in_shape)
    with Tape() as tape:
        xt = tape.variable(x)
        yt = op(xt)
    y = rng.standard_normal(yt.shape)
    lty = vjp(tape, [yt], [y], [xt])[xt.node]
    lhs = float(np.sum(yt.data * y))
    rhs = float(np.sum(x * lty))
    return abs(lhs - rhs) / (abs(lhs) + floor)
