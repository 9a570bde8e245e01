"""Small reverse-mode automatic differentiation over numpy arrays.

Values live in :class:`Tensor`. While a :class:`Tape` is active, every op whose
inputs require gradients appends a record ``(output, inputs, backward_fn)``;
``Tape.backward`` replays the records in reverse, which is a valid reverse
topological order because records are appended as ops execute.

Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import contextlib
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "TapeError",
    "forward_op", "record_op", "grad_check", "default_dtype", "get_default_dtype",
    "as_tensor", "matmul", "add", "sub", "mul", "div", "neg", "concat", "slice_",
    "mean_over_axis", "sum_over_axis", "max_over_axis", "conv1d_depthwise",
    "sigmoid", "tanh", "relu", "softplus", "silu", "exp", "elementwise_scale",
    "softmax", "reshape", "transpose",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_DTYPE: list[type] = [np.float32]
_TAPES: list["Tape"] = []

# flip off only for profiling; the finiteness check is part of every op contract
CHECK_FINITE = True


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (float64 for grad checks)."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def get_default_dtype():
    return _DTYPE[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE[-1])
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_over_axis(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over_axis(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_over_axis(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside are recorded. ``backward`` may
    run once per recording; call :meth:`reset` before reusing the tape.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self._leaves: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        self.records.clear()
        self._consumed = False
        for p in self._leaves:
            if p.grad is not None:
                p.grad = np.zeros_like(p.data)

    def backward(self, loss: Tensor, params=None) -> dict[str, np.ndarray]:
        """Reverse pass from a scalar ``loss``.

        ``params`` is a mapping ``name -> Tensor`` (or an iterable of named
        tensors). Returns ``name -> gradient``; each tensor's ``.grad`` is set.
        """
        if self._consumed:
            raise TapeError("backward() called twice on the same recording; call reset() first")
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if params is None:
            params = {}
        elif not isinstance(params, dict):
            params = {p.name: p for p in params}

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                prev = grads.get(k)
                grads[k] = gi if prev is None else prev + gi
        self._consumed = True

        result = {}
        missing = []
        for name, p in params.items():
            g = grads.get(id(p))
            if g is None:
                missing.append(name)
                g = np.zeros_like(p.data)
            p.grad = g.astype(p.data.dtype, copy=False)
            result[name] = p.grad
        if missing:
            warnings.warn(f"parameters not connected to loss (zero gradient): {missing}", stacklevel=2)
        self._leaves = list(params.values())
        return result


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{kind}: non-finite values in output of shape {data.shape}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].records.append((out, tuple(inputs), backward_fn))
    return out


def record_op(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register a fused op: ``backward_fn(grad_out)`` returns one grad (or None) per input."""
    return _emit(kind, data, [as_tensor(t) for t in inputs], backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _emit("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _emit("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def elementwise_scale(a, scale) -> Tensor:
    """Multiply by a constant (scalar or array, never differentiated)."""
    a = as_tensor(a)
    c = np.asarray(scale.data if isinstance(scale, Tensor) else scale, dtype=a.data.dtype)
    try:
        out = a.data * c
    except ValueError:
        raise ShapeError(f"elementwise_scale: cannot broadcast {a.shape} with {c.shape}") from None
    sa = a.shape
    return _emit("elementwise_scale", out, (a,), lambda g: (_unbroadcast(g * c, sa),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: contraction mismatch {a.shape} @ {b.shape} "
                         f"({a.shape[-1]} != {b.shape[-2]})")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: batch dims do not broadcast {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb
    return _emit("matmul", out, (a, b), bw)


# ---------------------------------------------------------------- structural

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in ts]} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


def _is_advanced(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in key)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    if isinstance(key, Tensor):
        raise TypeError("slice: index must be a constant, not a Tensor")
    try:
        out = a.data[key]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {a.shape}") from None
    advanced = _is_advanced(key)
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)
    if not advanced:
        out = np.ascontiguousarray(out) if out.ndim else np.array(out)
    return _emit("slice", out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    sa = a.shape
    return _emit("reshape", out, (a,), lambda g: (g.reshape(sa),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, nd):
    if axis is None:
        return tuple(range(nd))
    if isinstance(axis, int):
        axis = (axis,)
    for ax in axis:
        if not -nd <= ax < nd:
            raise ShapeError(f"reduction axis {ax} out of range for ndim {nd}")
    return tuple(ax % nd for ax in axis)


def _expand_like(g, axes, keepdims, shape):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_over_axis(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    sa = a.shape
    return _emit("sum_over_axis", out, (a,), lambda g: (_expand_like(g, axes, keepdims, sa),))


def mean_over_axis(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    sa, dt = a.shape, a.data.dtype
    return _emit("mean_over_axis", out, (a,),
                 lambda g: (_expand_like(g, axes, keepdims, sa) / dt.type(n),))


def max_over_axis(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; tied maxima share the gradient equally."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    ad = a.data
    m = ad.max(axis=axes, keepdims=True)
    out = m if keepdims else np.asarray(np.squeeze(m, axis=axes))

    def bw(g):
        hit = (ad == m).astype(ad.dtype)
        hit /= hit.sum(axis=axes, keepdims=True)
        gk = g if keepdims else np.expand_dims(g, axes)
        return (hit * gk,)
    return _emit("max_over_axis", out, (a,), bw)


# ---------------------------------------------------------------- convolution

def conv1d_depthwise(x, kernel, axis: int = -2, padding: str = "same") -> Tensor:
    """Per-channel 1-D convolution (cross-correlation) along ``axis``.

    ``x`` has channels on the last axis; ``kernel`` is ``(width, channels)``.
    ``padding="same"`` centres the kernel, ``"causal"`` pads only on the left.
    Padding is with zeros.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError(f"conv1d_depthwise: kernel {kernel.shape} does not match channels of {x.shape}")
    ax = axis % x.ndim
    if ax == x.ndim - 1:
        raise ShapeError("conv1d_depthwise: convolution axis must differ from the channel axis")
    width = kernel.shape[0]
    if padding == "same":
        left = (width - 1) // 2
    elif padding == "causal":
        left = width - 1
    else:
        raise ValueError(f"unknown padding {padding!r}")
    right = width - 1 - left
    L = x.shape[ax]
    xd = np.moveaxis(x.data, ax, -2)
    pad = [(0, 0)] * xd.ndim
    pad[-2] = (left, right)
    xp = np.pad(xd, pad)
    w = kernel.data
    out = np.zeros_like(xd)
    for j in range(width):
        out += xp[..., j:j + L, :] * w[j]

    def bw(g):
        gm = np.moveaxis(g, ax, -2)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for j in range(width):
            gxp[..., j:j + L, :] += gm * w[j]
            gw[j] = (gm * xp[..., j:j + L, :]).reshape(-1, w.shape[1]).sum(axis=0)
        gx = gxp[..., left:left + L, :]
        return np.moveaxis(gx, -2, ax), gw
    return _emit("conv1d_depthwise", np.moveaxis(out, -2, ax), (x, kernel), bw)


# ---------------------------------------------------------------- elementwise

def _sigmoid(x):
    # tanh form: overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit("tanh", t, (a,), lambda g: (g * (1 - t * t),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _emit("relu", a.data * pos, (a,), lambda g: (g * pos,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _emit("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _emit("silu", x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _emit("exp", e, (a,), lambda g: (g * e,))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", p, (a,),
                 lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


_OPS = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "concat": concat, "slice": slice_, "mean_over_axis": mean_over_axis,
    "sum_over_axis": sum_over_axis, "max_over_axis": max_over_axis,
    "conv1d_depthwise": conv1d_depthwise, "sigmoid": sigmoid, "tanh": tanh,
    "relu": relu, "softplus": softplus, "silu": silu, "exp": exp,
    "elementwise_scale": elementwise_scale, "softmax": softmax,
    "reshape": reshape, "transpose": transpose,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("mean_over_axis", [x], axis=1)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- checking

def grad_check(function: Callable, point, perturbation: float = 1e-3,
               coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``point`` is either an array (``function`` then takes one Tensor) or a
    ``name -> Tensor`` mapping (``function`` takes no arguments and closes over
    those tensors). Relative error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``. ``coords`` limits the check to a seeded
    random subset of coordinates per tensor.
    """
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    if isinstance(point, dict):
        params = point
        call = function
    else:
        x = Tensor(np.array(point, dtype=get_default_dtype()), requires_grad=True, name="x")
        params = {"x": x}
        call = lambda: function(x)  # noqa: E731

    with Tape() as tape:
        loss = call()
    analytic = tape.backward(loss, params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = rng.choice(flat.size, size=coords, replace=False)
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + perturbation
            fp = float(call().data)
            flat[i] = orig - perturbation
            fm = float(call().data)
            flat[i] = orig
            num = (fp - fm) / (2 * perturbation)
            a = float(ga[i])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
