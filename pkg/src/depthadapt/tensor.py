"""Rank-4 tensor arithmetic with reverse-mode differentiation on a tape.

Every tensor is dense (batch, channels, height, width); scalars live in
shape (1, 1, 1, 1).  Primitives record a backward closure on the active
Tape when gradients are enabled; Tape.backward replays the record in
reverse execution order, which is a valid reverse topological order, so
each node runs exactly once and fan-out accumulates by summation.

Two element precisions are supported: float32 ("standard", training
default) and float64 ("wide", required for finite-difference checking).
All randomness goes through make_rng (PCG64 seeded by SeedSequence) so
runs are reproducible across platforms.
"""

from __future__ import annotations

import threading
import zlib

import numpy as np

STANDARD = np.float32
WIDE = np.float64

LEAKY_SLOPE = 0.2


class TensorError(Exception):
    """Shape, dtype, or domain violation in a primitive."""


class NonFiniteError(TensorError):
    """A primitive produced NaN or Inf."""


class GraphConsumedError(TensorError):
    """backward() called on a tape that was already replayed."""


def make_rng(*parts) -> np.random.Generator:
    """Deterministic PCG64 generator derived from integer/string parts."""
    ints = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(ints)))


class Tensor:
    """Dense rank-4 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise TensorError(f"tensor must be rank 4, got shape {arr.shape}")
        if arr.dtype not in (STANDARD, WIDE):
            arr = arr.astype(STANDARD)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars use the cheaper scale/shift forms.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(other))

    def __neg__(self):
        return neg(self)


def scalar(value, dtype=STANDARD) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def zeros(shape, dtype=STANDARD, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value, dtype=STANDARD) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


class Tape:
    """Ordered record of executed primitives for one backward replay."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def record(self, backward_fn):
        self._nodes.append(backward_fn)

    def backward(self, loss: Tensor):
        if loss.shape != (1, 1, 1, 1):
            raise TensorError(f"loss must be scalar (1,1,1,1), got {loss.shape}")
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward()")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._nodes):
            fn()

    def clear(self):
        """Release all recorded intermediates and allow a fresh forward."""
        self._nodes.clear()
        self._consumed = False


_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "tape"):
        _STATE.tape = Tape()
        _STATE.grad_enabled = True
    return _STATE


def active_tape() -> Tape:
    return _state().tape


def backward(loss: Tensor):
    """Populate grad on every reachable leaf with d(loss)/d(leaf)."""
    active_tape().backward(loss)


def clear_graph():
    active_tape().clear()


class no_grad:
    """Context manager that suspends recording (forward-only evaluation)."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


class fresh_graph:
    """Swap in an empty tape for the duration of the block."""

    def __enter__(self):
        st = _state()
        self._prev = st.tape
        st.tape = Tape()
        return st.tape

    def __exit__(self, *exc):
        _state().tape = self._prev
        return False


def grad_enabled() -> bool:
    return _state().grad_enabled


def _check_finite(arr, kind):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"primitive '{kind}' produced non-finite elements")


def _apply(kind, inputs, out_data, vjp):
    """Wrap a primitive result; record its backward closure if needed.

    vjp(out_grad) returns one gradient array (or None) per input, in order.
    """
    _check_finite(out_data, kind)
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        def _backward():
            g = out.grad
            if g is None:
                return
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                # first write may alias the upstream buffer (it is dead by
                # now); accumulation allocates fresh so aliases stay safe
                t.grad = gi if t.grad is None else t.grad + gi
        active_tape().record(_backward)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the operand shape."""
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_dtypes(kind, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TensorError(f"{kind}: mixed dtypes {dt} and {t.dtype}")
    return dt


def _check_broadcast(kind, a, b):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise TensorError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    _check_broadcast("add", a, b)
    return _apply("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("subtract", a, b)
    _check_broadcast("subtract", a, b)
    return _apply("subtract", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("multiply", a, b)
    _check_broadcast("multiply", a, b)
    return _apply("multiply", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _apply("scalar_multiply", (a,), a.data * s, lambda g: (g * s,))


def shift(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _apply("scalar_add", (a,), a.data + c, lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def mean(a: Tensor, axis=None) -> Tensor:
    """Mean over all elements (to a scalar) or over the given axes, keepdims."""
    if axis is None:
        axes = (0, 1, 2, 3)
    else:
        axes = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=True)
    inv = a.dtype.type(1.0 / n)

    def vjp(g):
        return (np.broadcast_to(g * inv, a.shape).copy(),)

    return _apply("mean", (a,), out_data, vjp)


def abs_(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    sign = np.sign(a.data)
    return _apply("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    return _apply("square", (a,), a.data * a.data, lambda g: (g * 2 * a.data,))


def sqrt_(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise TensorError("sqrt: negative input element")
    root = np.sqrt(a.data)
    return _apply("sqrt", (a,), root, lambda g: (g * 0.5 / root,))


def log_(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise TensorError("log: nonpositive input element")
    return _apply("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def exp_(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes a NonFiniteError
        out_data = np.exp(a.data)
    return _apply("exp", (a,), out_data, lambda g: (g * out_data,))


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable split over sign
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, None, 0) - np.abs(x))),
                        np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
    return _apply("sigmoid", (a,), out_data.astype(a.dtype),
                  lambda g: (g * out_data * (1.0 - out_data),))


def tanh_(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _apply("tanh", (a,), out_data, lambda g: (g * (1.0 - out_data * out_data),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(a.data > 0, a.dtype.type(1.0), a.dtype.type(slope))
    return _apply("leaky_relu", (a,), a.data * factor, lambda g: (g * factor,))


def reciprocal(a: Tensor) -> Tensor:
    if (a.data == 0).any():
        raise TensorError("reciprocal: zero input element")
    out_data = 1.0 / a.data
    return _apply("reciprocal", (a,), out_data, lambda g: (-g * out_data * out_data,))


# ---------------------------------------------------------------------------
# structural primitives


def concat_channels(tensors) -> Tensor:
    tensors = tuple(tensors)
    _check_dtypes("concat", *tensors)
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise TensorError("concat: non-channel dims differ")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return _apply("concat", tensors, out_data, vjp)


def slice2d(a: Tensor, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    _, _, h, w = a.shape
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise TensorError(f"slice: window ({y0}:{y1},{x0}:{x1}) outside {a.shape}")
    out_data = a.data[:, :, y0:y1, x0:x1].copy()

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[:, :, y0:y1, x0:x1] = g
        return (gx,)

    return _apply("slice", (a,), out_data, vjp)


def pad2d(a: Tensor, pads, mode: str = "zero") -> Tensor:
    """Spatial padding. pads = (top, bottom, left, right); mode zero|edge."""
    pt, pb, pl, pr = pads
    if min(pads) < 0:
        raise TensorError("pad: negative pad width")
    n, c, h, w = a.shape
    if mode == "zero":
        out_data = np.pad(a.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))

        def vjp(g):
            return (g[:, :, pt:pt + h, pl:pl + w],)
    elif mode == "edge":
        out_data = np.pad(a.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode="edge")

        def vjp(g):
            gx = g[:, :, pt:pt + h, pl:pl + w].copy()
            mid = g[:, :, pt:pt + h, :]
            if pt:
                gx[:, :, 0, :] += g[:, :, :pt, pl:pl + w].sum(axis=2)
            if pb:
                gx[:, :, h - 1, :] += g[:, :, pt + h:, pl:pl + w].sum(axis=2)
            if pl:
                gx[:, :, :, 0] += mid[:, :, :, :pl].sum(axis=3)
            if pr:
                gx[:, :, :, w - 1] += mid[:, :, :, pl + w:].sum(axis=3)
            # corner blocks replicate the corner pixel
            if pt and pl:
                gx[:, :, 0, 0] += g[:, :, :pt, :pl].sum(axis=(2, 3))
            if pt and pr:
                gx[:, :, 0, w - 1] += g[:, :, :pt, pl + w:].sum(axis=(2, 3))
            if pb and pl:
                gx[:, :, h - 1, 0] += g[:, :, pt + h:, :pl].sum(axis=(2, 3))
            if pb and pr:
                gx[:, :, h - 1, w - 1] += g[:, :, pt + h:, pl + w:].sum(axis=(2, 3))
            return (gx,)
    else:
        raise TensorError(f"pad: unknown mode '{mode}'")
    return _apply("pad", (a,), out_data, vjp)


def gather_x(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along width: out[n,c,y,j] = a[n,c,y, idx[n,0,y,j]].

    idx is a plain integer array of shape (N,1,H,W) with values in
    [0, W-1]; it is an attribute, not a differentiable input.
    """
    n, c, h, w = a.shape
    if idx.shape != (n, 1, h, w):
        raise TensorError(f"gather: index shape {idx.shape} != {(n, 1, h, w)}")
    if idx.min() < 0 or idx.max() >= w:
        raise TensorError("gather: index out of range")
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    yi = np.arange(h)[None, None, :, None]
    out_data = a.data[ni, ci, yi, idx]

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (ni, ci, yi, idx), g)
        return (gx,)

    return _apply("gather_x", (a,), out_data, vjp)


# ---------------------------------------------------------------------------
# windowed primitives


def _conv_out_dim(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _im2col(xp, kh, kw, oh, ow, stride):
    """Channel-major patch matrix (c*kh*kw, n*oh*ow) from a padded input,
    laid out so the convolution is a single GEMM."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (c, kh, kw, n, oh, ow), (sc, sh, sw, sn, sh * stride, sw * stride))
    return patches.reshape(c * kh * kw, n * oh * ow)


def _col2im(gcol, shape, kh, kw, oh, ow, stride):
    """Scatter-add a channel-major patch gradient back onto the padded input."""
    n, c, _, _ = shape
    g = gcol.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros(shape, dtype=gcol.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + (oh - 1) * stride + 1:stride,
                j:j + (ow - 1) * stride + 1:stride] += g[:, i, j].transpose(1, 0, 2, 3)
    return out


def _fold_batch(arr):
    """(n, c, h, w) -> (c, n*h*w) with a contiguous copy."""
    n, c, h, w = arr.shape
    return np.ascontiguousarray(arr.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def _unfold_batch(mat, n, c, h, w):
    """(c, n*h*w) -> contiguous (n, c, h, w)."""
    return np.ascontiguousarray(mat.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution; w is (out_ch, in_ch, kh, kw), bias (1,out_ch,1,1)."""
    inputs = (x, w) if bias is None else (x, w, bias)
    _check_dtypes("conv2d", *inputs)
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise TensorError(f"conv2d: in_ch {c} != kernel in_ch {ic}")
    oh, ow = _conv_out_dim(h, kh, stride, pad), _conv_out_dim(wd, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise TensorError(f"conv2d: input {x.shape} smaller than receptive field")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w_flat = w.data.reshape(oc, c * kh * kw)
    col = _im2col(xp, kh, kw, oh, ow, stride)
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow/inf propagation becomes a NonFiniteError just below
        out_data = _unfold_batch(np.matmul(w_flat, col), n, oc, oh, ow)
    if bias is not None:
        if bias.shape != (1, oc, 1, 1):
            raise TensorError(f"conv2d: bias shape {bias.shape} != {(1, oc, 1, 1)}")
        out_data += bias.data

    def vjp(g):
        # the forward patch matrix is retained by this closure; trading that
        # memory (cleared with the tape) for a second gather pass.  Frozen
        # operands skip their (large) matmuls entirely.
        gf = _fold_batch(g)
        gw = np.matmul(gf, col.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcol = np.matmul(w_flat.T, gf)
            gxp = _col2im(gcol, xp.shape, kh, kw, oh, ow, stride)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1)
                         if bias.requires_grad else None)
        return tuple(grads)

    return _apply("conv2d", inputs, out_data, vjp)


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed 2-D convolution; w is (in_ch, out_ch, kh, kw)."""
    inputs = (x, w) if bias is None else (x, w, bias)
    _check_dtypes("conv2d_transpose", *inputs)
    n, c, h, wd = x.shape
    ic, oc, kh, kw = w.shape
    if ic != c:
        raise TensorError(f"conv2d_transpose: in_ch {c} != kernel in_ch {ic}")
    fh, fw = (h - 1) * stride + kh, (wd - 1) * stride + kw
    oh, ow = fh - 2 * pad, fw - 2 * pad
    if oh <= 0 or ow <= 0:
        raise TensorError("conv2d_transpose: padding exceeds output extent")
    x_flat = _fold_batch(x.data)
    w_flat = w.data.reshape(c, oc * kh * kw)
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow/inf propagation becomes a NonFiniteError just below
        col = np.matmul(w_flat.T, x_flat)  # (oc*kh*kw, n*h*w)
    out_full = _col2im(col, (n, oc, fh, fw), kh, kw, h, wd, stride)
    out_data = out_full[:, :, pad:pad + oh, pad:pad + ow].copy() if pad else out_full
    if bias is not None:
        if bias.shape != (1, oc, 1, 1):
            raise TensorError(f"conv2d_transpose: bias shape {bias.shape} != {(1, oc, 1, 1)}")
        out_data += bias.data

    def vjp(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcol = _im2col(gfull, kh, kw, h, wd, stride)
        gx = _unfold_batch(np.matmul(w_flat, gcol), n, c, h, wd) \
            if x.requires_grad else None
        gw = np.matmul(x_flat, gcol.T).reshape(w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1)
                         if bias.requires_grad else None)
        return tuple(grads)

    return _apply("conv2d_transpose", inputs, out_data, vjp)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    oh, ow = _conv_out_dim(h, k, stride, 0), _conv_out_dim(w, k, stride, 0)
    if oh <= 0 or ow <= 0:
        raise TensorError(f"avg_pool: window {k} larger than input {x.shape}")
    inv = x.dtype.type(1.0 / (k * k))
    out_data = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out_data += x.data[:, :, i:i + (oh - 1) * stride + 1:stride,
                               j:j + (ow - 1) * stride + 1:stride]
    out_data *= inv

    def vjp(g):
        gx = np.zeros_like(x.data)
        gs = g * inv
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + (oh - 1) * stride + 1:stride,
                   j:j + (ow - 1) * stride + 1:stride] += gs
        return (gx,)

    return _apply("avg_pool", (x,), out_data, vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _apply("upsample_nearest", (x,), out_data, vjp)


# ---------------------------------------------------------------------------
# generic dispatch (used by the gradient-check suite and the CLI)

PRIMITIVES = {
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "scalar_multiply": scale,
    "mean": mean,
    "abs": abs_,
    "square": square,
    "sqrt": sqrt_,
    "log": log_,
    "exp": exp_,
    "sigmoid": sigmoid,
    "tanh": tanh_,
    "leaky_relu": leaky_relu,
    "reciprocal": reciprocal,
    "concat": concat_channels,
    "slice": slice2d,
    "pad": pad2d,
    "gather_x": gather_x,
    "conv2d": conv2d,
    "conv2d_transpose": conv2d_transpose,
    "avg_pool": avg_pool2d,
    "upsample_nearest": upsample_nearest,
}


def primitive(kind: str, inputs, **attrs) -> Tensor:
    """Apply a primitive by name. inputs is a list of Tensors; attrs are
    the kind-specific non-differentiable parameters."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise TensorError(f"unknown primitive kind '{kind}'") from None
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)
