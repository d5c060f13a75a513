"""Dense double-precision tensors with a tape-based reverse-mode gradient engine.

The operation set is exactly what the attention/pyramid code needs: matmul,
softmax, conv2d, global average pooling, elementwise arithmetic, reshaping,
concatenation, slicing and a zero-filled position gather. Every operation
records its gradient rule on the output tensor when any input requires
gradients; ``backward`` replays the tape in reverse topological order.

All values are float64. Non-finite values are rejected at construction time
(fail fast instead of silently propagating NaN/Inf). Tensor data is frozen
(read-only numpy arrays), so tensors are safe to share.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

_GRAD_ENABLED = True
_F64 = np.dtype(np.float64)


class no_grad:
    """Context manager disabling tape recording (used by finite differences)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Node:
    """One tape entry: the inputs of an operation and its gradient rule."""

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op, inputs, grad_fn):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """Immutable float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @classmethod
    def _wrap(cls, arr, node=None):
        """Wrap an op output without copying; the array must be freshly built."""
        t = cls.__new__(cls)
        if type(arr) is not np.ndarray or not (arr.flags.c_contiguous and arr.dtype == _F64):
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.size and not np.isfinite(arr.sum()):
            raise NumericsError(
                f"non-finite value in {node.op if node is not None else 'Tensor'}"
            )
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = node is not None
        t.grad = None
        t.node = node
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t.node = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr, where):
    # a single reduction: any NaN/Inf makes the sum non-finite
    if arr.size and not np.isfinite(arr.sum()):
        raise NumericsError(f"non-finite value in {where}")


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(arr, op, inputs, grad_fn):
    """Build the output tensor, attaching a tape node if gradients are needed."""
    node = None
    if _GRAD_ENABLED and any(t.requires_grad or t.node is not None for t in inputs):
        node = Node(op, inputs, grad_fn)
    return Tensor._wrap(arr, node)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the shape of the original operand."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcast


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)]

    return _make(out, "add", [a, b], grad_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)]

    return _make(out, "sub", [a, b], grad_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        return [
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ]

    return _make(out, "mul", [a, b], grad_fn)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, "neg", [a], lambda g: [-g])


def scale(a, s):
    """Multiply by a python scalar treated as a constant."""
    a = _as_tensor(a)
    s = float(s)
    return _make(a.data * s, "scale", [a], lambda g: [g * s])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires at least 2-D operands")
    if a.ndim != b.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(
            f"matmul leading dims differ: {a.data.shape} vs {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return [ga, gb]

    return _make(out, "matmul", [a, b], grad_fn)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        "transpose",
        [a],
        lambda g: [g.transpose(inv)],
    )


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    orig = a.data.shape
    return _make(a.data.reshape(shape), "reshape", [a], lambda g: [g.reshape(orig)])


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return list(np.split(g, splits, axis=axis))

    return _make(out, "concat", tensors, grad_fn)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis; gradient zero-pads back."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError("narrow out of range")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = a.data.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[idx] = g
        return [full]

    return _make(np.ascontiguousarray(a.data[idx]), "narrow", [a], grad_fn)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, shape).copy()]

    return _make(np.asarray(out), "sum", [a], grad_fn)


def mean(a, axis, keepdims=False):
    a = _as_tensor(a)
    if isinstance(axis, int):
        n = a.data.shape[axis]
    else:
        n = int(np.prod([a.data.shape[i] for i in axis]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# softmax


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    a = _as_tensor(a)
    if a.data.size == 0 or a.data.shape[axis] == 0:
        raise ShapeError("softmax over empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [y * (g - dot)]

    return _make(y, "softmax", [a], grad_fn)


# ---------------------------------------------------------------------------
# convolution and pooling


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp, kh, kw, sh, sw, hout, wout):
    b, cin = xp.shape[0], xp.shape[1]
    cols = np.empty((b, cin, kh, kw, hout, wout))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * hout : sh, j : j + sw * wout : sw]
    return cols.reshape(b, cin * kh * kw, hout * wout)


def conv2d(x, w, b=None, stride=1, pad=0, allow_floor=False):
    """2-D cross-correlation (no kernel flip) with zero padding.

    The output size (H + 2*pad - kh) must divide the stride exactly unless
    ``allow_floor`` is set, in which case the trailing remainder is dropped
    (needed by stride-r down-sampling convolutions with pad 1).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    bs, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError("conv2d bias shape mismatch")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if sh < 1 or sw < 1:
        raise ShapeError("conv2d stride must be >= 1")
    num_h, num_w = h + 2 * ph - kh, wd + 2 * pw - kw
    if num_h < 0 or num_w < 0:
        raise ShapeError("conv2d kernel larger than padded input")
    if not allow_floor and (num_h % sh or num_w % sw):
        raise ShapeError("conv2d output size is not integral for this stride")
    hout, wout = num_h // sh + 1, num_w // sw + 1
    inputs = [x, w] if b is None else [x, w, b]

    if (kh, kw, sh, sw, ph, pw) == (1, 1, 1, 1, 0, 0):
        # 1x1 projection fast path: plain channel matmul
        w2 = w.data.reshape(cout, cin)
        x2 = x.data.reshape(bs, cin, h * wd)
        out = np.matmul(w2, x2)
        if b is not None:
            out = out + b.data[:, None]
        out = out.reshape(bs, cout, h, wd)

        def grad_fn_1x1(g):
            g2 = g.reshape(bs, cout, h * wd)
            gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
            gx = np.matmul(w2.T, g2).reshape(x.data.shape)
            grads = [gx, gw]
            if b is not None:
                grads.append(g2.sum(axis=(0, 2)))
            return grads

        return _make(out, "conv2d", inputs, grad_fn_1x1)

    if ph or pw:
        xp = np.zeros((bs, cin, h + 2 * ph, wd + 2 * pw))
        xp[:, :, ph : ph + h, pw : pw + wd] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, sh, sw, hout, wout)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols)
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(bs, cout, hout, wout)

    def grad_fn(g):
        g2 = g.reshape(bs, cout, hout * wout)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(w2.T, g2).reshape(bs, cin, kh, kw, hout, wout)
        gxp = np.zeros((bs, cin, h + 2 * ph, wd + 2 * pw))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * hout : sh, j : j + sw * wout : sw] += gcols[
                    :, :, i, j
                ]
        gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    return _make(out, "conv2d", inputs, grad_fn)


def global_avg_pool(x):
    """Mean over each H*W plane -> shape (B, C, 1, 1)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-D tensor")
    h, w = x.data.shape[2], x.data.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def grad_fn(g):
        return [np.broadcast_to(g / (h * w), x.data.shape).copy()]

    return _make(out, "global_avg_pool", [x], grad_fn)


# ---------------------------------------------------------------------------
# position gather (zero fill for out-of-bounds indices)


def gather_positions(x, idx):
    """Gather rows of a (B, P, D) tensor into (B, Q, S, D).

    ``idx`` is an integer array of shape (Q, S); entries equal to -1 select a
    zero vector. Gradients scatter-add back into the source rows.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2:
        raise ShapeError("gather_positions expects (B,P,D) data and (Q,S) indices")
    p = x.data.shape[1]
    if idx.size and (idx.max() >= p or idx.min() < -1):
        raise ShapeError("gather index out of range")
    safe = np.clip(idx, 0, None)
    out = x.data[:, safe, :].copy()
    mask = idx < 0
    if mask.any():
        out[:, mask, :] = 0.0

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        valid = ~mask
        np.add.at(gx, (slice(None), idx[valid]), g[:, valid, :])
        return [gx]

    return _make(out, "gather_positions", [x], grad_fn)


# ---------------------------------------------------------------------------
# feature-map <-> position-list views


def map_to_positions(x):
    """(B, C, H, W) -> (B, H*W, C), positions in row-major order."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("map_to_positions expects a 4-D tensor")
    b, c, h, w = x.data.shape
    return reshape(transpose(reshape(x, (b, c, h * w)), (0, 2, 1)), (b, h * w, c))


def positions_to_map(x, h, w):
    """(B, H*W, C) -> (B, C, H, W), inverse of map_to_positions."""
    x = _as_tensor(x)
    if x.ndim != 3 or x.data.shape[1] != h * w:
        raise ShapeError("positions_to_map shape mismatch")
    b, _, c = x.data.shape
    return reshape(transpose(x, (0, 2, 1)), (b, c, h, w))


# ---------------------------------------------------------------------------
# backward pass and finite differences


def backward(loss, params=None):
    """Reverse-topological gradient sweep from a scalar loss.

    Returns a dict mapping each tensor in ``params`` (default: every
    requires_grad leaf reachable from the loss) to its gradient array.
    Listed parameters not on the loss path receive zero gradients.
    Accumulation order is fixed by tape order, so results are deterministic.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            topo.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            stack.append((inp, False))

    grads = {id(loss): np.ones_like(loss.data)}
    store = {}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.grad_fn(g)):
            if inp.node is None and not inp.requires_grad:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi
            if inp.requires_grad and inp.node is None:
                store[inp] = grads[id(inp)]
                inp.grad = grads[id(inp)]

    if loss.requires_grad and loss.node is None:
        store[loss] = np.ones_like(loss.data)
        loss.grad = store[loss]

    if params is None:
        return store
    out = {}
    for p in params:
        g = store.get(p)
        if g is None:
            g = np.zeros_like(p.data)
            p.grad = g
        out[p] = g
    return out


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function at x.

    ``f`` takes a Tensor and returns a scalar Tensor; it must be deterministic.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad requires h > 0")
    base = np.array(x.data)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(base)).item()
            flat[i] = orig - h
            fm = f(Tensor(base)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad
