"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds a new :class:`Tensor` holding references to its parents and a
closure that pushes the output gradient back to them.  ``backward`` walks the
graph in reverse topological order, so each node is visited once and gradients
from multiple uses accumulate additively.

Layouts follow the usual deep-learning conventions: 1D convolutions take
``(batch, channels, time)`` inputs and ``(out, in, kernel)`` weights.
"""

import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACOS_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when op inputs do not conform to the op's shape rule."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Tensor:
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, parents=(), op=""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = None
        self.op = op

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # -- operator sugar ----------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, backward_fn):
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward_fn
    if not np.all(np.isfinite(out.data)):
        bad = [p.shape for p in parents]
        raise FloatingPointError(f"{op}: non-finite output from inputs of shapes {bad}")
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(out_data, (a, b), "add", bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", bw)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

    return _result(out_data, (a, b), "div", bw)


def power(a, exponent):
    exponent = float(exponent)

    def bw(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _result(a.data ** exponent, (a,), "pow", bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_data)

    return _result(out_data, (a,), "exp", bw)


def log(a):
    def bw(g):
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), "log", bw)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / out_data)

    return _result(out_data, (a,), "sqrt", bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        a._accumulate(g * mask)

    return _result(a.data * mask, (a,), "relu", bw)


def absolute(a):
    sign = np.sign(a.data)

    def bw(g):
        a._accumulate(g * sign)

    return _result(np.abs(a.data), (a,), "abs", bw)


def clamp(a, lo=None, hi=None):
    """Clip values; gradient passes only where the input was inside the range."""
    out_data = np.clip(a.data, lo, hi)
    mask = out_data == a.data

    def bw(g):
        a._accumulate(g * mask)

    return _result(out_data, (a,), "clamp", bw)


def acos(a, eps=ACOS_EPS):
    """Arc-cosine with the argument clamped to ``[-1 + eps, 1 - eps]``.

    The clamp keeps the derivative finite; clamped entries see the derivative
    at the clamp boundary, so the backward pass never produces inf.
    """
    x = np.clip(a.data, -1.0 + eps, 1.0 - eps)

    def bw(g):
        a._accumulate(-g / np.sqrt(1.0 - x * x))

    return _result(np.arccos(x), (a,), "acos", bw)


# ---------------------------------------------------------------------------
# Shape ops and reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(out_data, (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _result(out_data, (a,), "reshape", bw)


def transpose(a, axes=None):
    out_data = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def bw(g):
        a._accumulate(np.transpose(g, inverse))

    return _result(out_data, (a,), "transpose", bw)


def getitem(a, index):
    out_data = a.data[index]

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    return _result(out_data, (a,), "slice", bw)


def concat(tensors, axis=1):
    tensors = [_wrap(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis % len(ref) and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return _result(out_data, tensors, "concat", bw)


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def broadcast_to(a, shape):
    out_data = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _result(out_data, (a,), "broadcast", bw)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions do not match for {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(out_data, (a, b), "matmul", bw)


def conv_output_length(length, kernel, stride=1, dilation=1):
    """Length of a "same"-padded convolution output: ``ceil(length / stride)``."""
    return -(-length // stride)


def _same_padding(length, kernel, stride, dilation):
    out_len = conv_output_length(length, kernel, stride, dilation)
    span = dilation * (kernel - 1) + 1
    total = max((out_len - 1) * stride + span - length, 0)
    return out_len, total // 2, total - total // 2


def conv1d(x, weight, bias=None, stride=1, dilation=1):
    """Zero-padded symmetric ("same") 1D convolution (cross-correlation).

    x: (B, C_in, T), weight: (C_out, C_in, K), bias: (C_out,).
    Output length is ``ceil(T / stride)``; stride 1 preserves length.
    """
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d: expected 3D input and weight, got {x.shape} and {weight.shape}")
    B, c_in, T = x.shape
    c_out, w_in, K = weight.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d: input has {c_in} channels but weight expects {w_in}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} does not match {c_out} output channels")
    out_len, pad_l, pad_r = _same_padding(T, K, stride, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_l, pad_r)))
    span = dilation * (K - 1) + 1
    # (B, C_in, out_len, K) view of the receptive windows
    windows = sliding_window_view(xp, span, axis=2)[:, :, ::stride, ::dilation][:, :, :out_len]
    cols = windows.transpose(0, 2, 1, 3).reshape(B * out_len, c_in * K)
    w2 = weight.data.reshape(c_out, c_in * K)
    out = (cols @ w2.T).reshape(B, out_len, c_out).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * out_len, c_out)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, out_len, c_in, K)
            gxp = np.zeros_like(xp)
            last = (out_len - 1) * stride + 1
            for k in range(K):
                start = k * dilation
                gxp[:, :, start:start + last:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            x._accumulate(gxp[:, :, pad_l:pad_l + T])

    return _result(np.ascontiguousarray(out), parents, "conv1d", bw)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def topological_order(root):
    """Nodes reachable from ``root`` that need gradients, parents before children."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    order = topological_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, x, eps=1e-5, seed=None, max_coords=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.  ``max_coords`` limits the
    check to a random subset of coordinates for large inputs.
    """
    x0 = _as_array(x.data if isinstance(x, Tensor) else x).copy()
    leaf = Tensor(x0.copy(), requires_grad=True)
    f(leaf).backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    coords = np.arange(x0.size)
    if max_coords is not None and x0.size > max_coords:
        coords = np.random.default_rng(seed).choice(x0.size, size=max_coords, replace=False)
    flat = x0.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(Tensor(x0)).item()
        flat[i] = orig - eps
        f_minus = f(Tensor(x0)).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------
#
# Container layout (all little-endian):
#   8 bytes   magic b"GLCKPT01"
#   8 bytes   uint64 length N of the JSON index
#   N bytes   UTF-8 JSON: {"format": "gesturelab-checkpoint", "version": 1,
#                          "meta": {...},
#                          "tensors": [{"name", "shape", "offset", "count"}, ...]}
#   rest      float64 payload; offsets are in bytes from the payload start

CHECKPOINT_MAGIC = b"GLCKPT01"


def save_checkpoint(path, params, meta=None):
    """Write ``{name: array or Tensor}`` as a flat list of float64 records."""
    records, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = params[name]
        arr = _as_array(arr.data if isinstance(arr, Tensor) else arr)
        buf = arr.astype("<f8").tobytes()
        records.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(buf)
        offset += len(buf)
    index = json.dumps(
        {"format": "gesturelab-checkpoint", "version": 1, "meta": meta or {}, "tensors": records},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(index)))
        fh.write(index)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    """Return ``(params, meta)`` where params maps names to float64 arrays."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a gesturelab checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    index = json.loads(raw[16:16 + n].decode("utf-8"))
    payload = memoryview(raw)[16 + n:]
    params = {}
    for rec in index["tensors"]:
        arr = np.frombuffer(payload, dtype="<f8", count=rec["count"], offset=rec["offset"])
        params[rec["name"]] = arr.astype(np.float64).reshape(rec["shape"])
    return params, index.get("meta", {})
