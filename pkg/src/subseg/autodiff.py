"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Values live in :class:`Tensor`; every differentiable op appends a record to
the innermost active :class:`Tape`, and :func:`backward` replays the records
in exact reverse execution order. The op catalog is deliberately small: it is
what the segmentation training graph needs, nothing more. No broadcasting
beyond "one operand is a scalar", no graph rewriting, no dtype other than
float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "backward",
    "grad_check",
    "set_debug_checks",
    "add",
    "sub",
    "mul",
    "div",
    "scalar_mul",
    "matmul",
    "dot",
    "conv2d",
    "conv2d_transpose",
    "relu",
    "leaky_relu",
    "softmax",
    "log",
    "exp",
    "l2_normalize",
    "tsum",
    "tmean",
    "concat",
    "gather",
    "reshape",
    "stack_scalars",
]


class ShapeMismatch(ValueError):
    """Incompatible operand shapes; carries the op name and both shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        msg = "{}: incompatible shapes {}".format(
            op, " vs ".join(str(s) for s in self.shapes))
        super().__init__(msg)


_DEBUG_CHECKS = False


def set_debug_checks(enabled):
    """Toggle per-op finiteness checks (slow; for tests and debugging)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Data is treated as immutable once the tensor has entered the graph;
    in-place mutation is reserved for leaf parameters between steps
    (optimizer updates, EMA).
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """A grad-free tensor sharing nothing with the tape."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return "Tensor(shape={}, requires_grad={})".format(
            self.shape, self.requires_grad)

    # Arithmetic sugar; python scalars are lifted to constant tensors.
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
        return scalar_mul(self, -1.0)


class Tape:
    """Ordered record of executed ops, replayed backwards for adjoints.

    Use as a context manager; ops executed inside record themselves when any
    input requires grad. Records are (output, parents, adjoint_fn) where
    adjoint_fn maps the output gradient to one gradient per parent.

    Records are consumed: `backward` drops them after its sweep and leaving
    the `with` block drops whatever remains. Recorded tensors and the tape
    reference each other, so without this the graph of every step would be
    cyclic garbage that only the generational collector reclaims, and training
    would carry many steps' worth of activation buffers at once.
    """

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        self._release()
        return False

    def _release(self):
        for out, _, _ in self._records:
            out._tape = None
        self._records.clear()


_TAPES = []


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(op, data, parents, adjoint):
    """Wrap an op result, recording it when grad is required and a tape is active."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("{}: non-finite value in output".format(op))
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        tape = _TAPES[-1]
        out.requires_grad = True
        out._tape = tape
        tape._records.append((out, parents, adjoint))
    return out


def backward(loss):
    """Populate .grad on every requires-grad tensor reachable from `loss`.

    Gradients accumulate; callers clear leaf .grad between uses. The sweep
    consumes the tape: one backward per recorded graph.
    """
    if loss.data.size != 1:
        raise ValueError(
            "backward requires a scalar loss, got shape {}".format(loss.shape))
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not recorded on a tape; nothing to differentiate")
    loss.grad = np.ones_like(loss.data)
    for out, parents, adjoint in reversed(tape._records):
        if out.grad is None:
            continue
        grads = adjoint(out.grad)
        for parent, g in zip(parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
    tape._release()


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor using catalog ops only and must be
    deterministic. Error is |analytic - fd| / max(1, |fd|), maxed over
    coordinates of `x`.
    """
    x.grad = None
    x.requires_grad = True
    with Tape():
        out = f(x)
        if out.data.size != 1:
            raise ValueError("grad_check requires a scalar-valued function")
        if not np.isfinite(out.data):
            raise FloatingPointError("grad_check: f(x) is non-finite")
        if out.requires_grad:
            backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = analytic.copy()

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(
                "grad_check: non-finite evaluation at coordinate {}".format(i))
        fd = (hi - lo) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary_data(op, a, b):
    """Validate shapes for elementwise binary ops (equal, or one side scalar)."""
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeMismatch(op, a.data.shape, b.data.shape)


def _shrink(g, shape):
    """Reduce an output gradient onto a (possibly scalar) operand shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b):
    a, b = _lift(a), _lift(b)
    _binary_data("add", a, b)

    def adjoint(g):
        return _shrink(g, a.data.shape), _shrink(g, b.data.shape)

    return _make("add", a.data + b.data, (a, b), adjoint)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _binary_data("sub", a, b)

    def adjoint(g):
        return _shrink(g, a.data.shape), _shrink(-g, b.data.shape)

    return _make("sub", a.data - b.data, (a, b), adjoint)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _binary_data("mul", a, b)

    def adjoint(g):
        return _shrink(g * b.data, a.data.shape), _shrink(g * a.data, b.data.shape)

    return _make("mul", a.data * b.data, (a, b), adjoint)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _binary_data("div", a, b)

    def adjoint(g):
        da = _shrink(g / b.data, a.data.shape)
        db = _shrink(-g * a.data / (b.data * b.data), b.data.shape)
        return da, db

    return _make("div", a.data / b.data, (a, b), adjoint)


def scalar_mul(a, c):
    c = float(c)

    def adjoint(g):
        return (g * c,)

    return _make("scalar_mul", a.data * c, (a,), adjoint)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """2-d @ 2-d or 2-d @ 1-d matrix product."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)

    def adjoint(g):
        if b.data.ndim == 1:
            da = np.outer(g, b.data)
            db = a.data.T @ g
        else:
            da = g @ b.data.T
            db = a.data.T @ g
        return da, db

    return _make("matmul", a.data @ b.data, (a, b), adjoint)


def dot(a, b):
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeMismatch("dot", a.data.shape, b.data.shape)

    def adjoint(g):
        return g * b.data, g * a.data

    return _make("dot", np.dot(a.data, b.data), (a, b), adjoint)


# ---------------------------------------------------------------------------
# activations and pointwise functions


def relu(a):
    def adjoint(g):
        return (g * (a.data > 0),)

    return _make("relu", np.maximum(a.data, 0.0), (a,), adjoint)


def leaky_relu(a, slope=0.01):
    slope = float(slope)

    def adjoint(g):
        return (g * np.where(a.data > 0, 1.0, slope),)

    return _make("leaky_relu", np.where(a.data > 0, a.data, slope * a.data),
                 (a,), adjoint)


def log(a):
    def adjoint(g):
        return (g / a.data,)

    return _make("log", np.log(a.data), (a,), adjoint)


def exp(a):
    out_data = np.exp(a.data)

    def adjoint(g):
        return (g * out_data,)

    return _make("exp", out_data, (a,), adjoint)


def softmax(a, axis):
    """Numerically stable softmax along `axis`."""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def adjoint(g):
        inner = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _make("softmax", s, (a,), adjoint)


def l2_normalize(a, axis):
    """x / ||x|| along `axis`; zero slices stay zero and pass zero gradient."""
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    safe = np.where(norm > 0.0, norm, 1.0)
    y = a.data / safe

    def adjoint(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        dx = (g - y * inner) / safe
        return (np.where(norm > 0.0, dx, 0.0),)

    return _make("l2_normalize", y, (a,), adjoint)


# ---------------------------------------------------------------------------
# reductions and reshaping


def tsum(a):
    def adjoint(g):
        return (np.full_like(a.data, float(g)),)

    return _make("sum", np.asarray(np.sum(a.data)), (a,), adjoint)


def tmean(a):
    if a.data.size == 0:
        raise ShapeMismatch("mean", a.data.shape)
    n = a.data.size

    def adjoint(g):
        return (np.full_like(a.data, float(g) / n),)

    return _make("mean", np.asarray(np.mean(a.data)), (a,), adjoint)


def reshape(a, shape):
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeMismatch("reshape", a.data.shape, shape)

    def adjoint(g):
        return (g.reshape(a.data.shape),)

    return _make("reshape", a.data.reshape(shape), (a,), adjoint)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    ndim = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ShapeMismatch("concat", tensors[0].data.shape, t.data.shape)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def adjoint(g):
        gm = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(gm[offsets[i]:offsets[i + 1]], 0, axis)
            for i in range(len(tensors)))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), adjoint)


def stack_scalars(tensors):
    """Concatenate scalar tensors into a 1-d vector."""
    return concat([reshape(t, (1,)) for t in tensors], axis=0)


def gather(a, axis, indices):
    """Select slices along `axis` by an integer index list (np.take semantics)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather expects a flat index list")
    n = a.data.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(
            "gather: index out of range for axis {} of size {}".format(axis, n))

    def adjoint(g):
        dx = np.zeros_like(a.data)
        np.add.at(np.moveaxis(dx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (dx,)

    return _make("gather", np.take(a.data, idx, axis=axis), (a,), adjoint)


# ---------------------------------------------------------------------------
# convolutions


def _im2col(xp, kh, kw, stride, out_h, out_w):
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * out_h:stride,
                                  j:j + stride * out_w:stride]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(dcols, xp_shape, kh, kw, stride, out_h, out_w):
    n, c, _, _ = xp_shape
    dc = dcols.reshape(n, c, kh, kw, out_h, out_w)
    dxp = np.zeros(xp_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * out_h:stride,
                j:j + stride * out_w:stride] += dc[:, :, i, j]
    return dxp


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d convolution, x [N,Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout]."""
    if stride not in (1, 2):
        raise ValueError("conv2d supports stride 1 or 2, got {}".format(stride))
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch("conv2d", x.data.shape, w.data.shape)
    n, cin, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    if b is not None and b.data.shape != (cout,):
        raise ShapeMismatch("conv2d bias", b.data.shape, (cout,))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (wd + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch("conv2d", x.data.shape, w.data.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, out_h, out_w)
    if b is not None:
        out = out + b.data[:, None, None]

    def adjoint(g):
        gm = g.reshape(n, cout, out_h * out_w)
        dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        dcols = np.matmul(wmat.T, gm)
        dxp = _col2im(dcols, xp.shape, kh, kw, stride, out_h, out_w)
        if padding:
            dx = dxp[:, :, padding:padding + h, padding:padding + wd]
        else:
            dx = dxp
        if b is not None:
            db = g.sum(axis=(0, 2, 3))
            return dx, dw, db
        return dx, dw

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, parents, adjoint)


def conv2d_transpose(x, w, b=None, stride=2):
    """Transposed 2-d convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).

    x [N,Cin,H,W], w [Cin,Cout,2,2] -> [N,Cout,2H,2W].
    """
    if stride != 2:
        raise ValueError("conv2d_transpose supports stride 2 only")
    if (x.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[2:] != (2, 2)
            or x.data.shape[1] != w.data.shape[0]):
        raise ShapeMismatch("conv2d_transpose", x.data.shape, w.data.shape)
    n, cin, h, wd = x.data.shape
    cout = w.data.shape[1]
    if b is not None and b.data.shape != (cout,):
        raise ShapeMismatch("conv2d_transpose bias", b.data.shape, (cout,))

    out = np.zeros((n, cout, 2 * h, 2 * wd), dtype=np.float64)
    for i in range(2):
        for j in range(2):
            # kernel 2x2 with stride 2: each output pixel has exactly one source
            contrib = np.tensordot(x.data, w.data[:, :, i, j], axes=([1], [0]))
            out[:, :, i::2, j::2] = contrib.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[:, None, None]

    def adjoint(g):
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        for i in range(2):
            for j in range(2):
                gs = g[:, :, i::2, j::2]
                dx += np.tensordot(gs, w.data[:, :, i, j],
                                   axes=([1], [1])).transpose(0, 3, 1, 2)
                dw[:, :, i, j] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None:
            db = g.sum(axis=(0, 2, 3))
            return dx, dw, db
        return dx, dw

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv2d_transpose", out, parents, adjoint)
