"""Reverse-mode autodiff on dense numpy arrays.

Strict-shape (no broadcasting at the op surface), float32 by default with
float64 accepted for high-precision gradient checks.  Graphs are built by the
op functions below and consumed exactly once by :func:`backward`.  Linear
layers can be tapped to capture per-token (input, output-gradient) pairs
during the backward pass; see :class:`TapRegistry`.

A graph and its tensors belong to one execution context; independent graphs
may run in parallel contexts but tensors are never shared mutably.
"""

from contextlib import contextmanager

import numpy as np

from . import _kernels as K

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


class EngineError(Exception):
    """Engine contract violation (bad shapes, reused graphs, ...)."""


class ShapeMismatch(EngineError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording (decoding, evaluation-only passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense real array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._done = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _acc(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(op, a.data.shape, b.data.shape)
    if a.data.dtype != b.data.dtype:
        raise EngineError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


def backward(loss):
    """Run reverse mode from a scalar loss, populating .grad on every
    requires_grad tensor reachable from it.  A graph can be consumed once."""
    if loss.data.shape != ():
        raise EngineError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise EngineError("loss does not require grad (built under no_grad or from constants)")
    if loss._done:
        raise EngineError("backward was already run on this graph")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is None:
            continue
        if node._done:
            raise EngineError("graph node already consumed by a previous backward")
        node._done = True
        node._backward()
        node._backward = None


# ---------------------------------------------------------------------------
# Linear-layer taps


class LinearTap:
    """Per-token (u, delta) capture for one linear layer.

    ``inputs`` is [T, d_in] (the layer input rows u_t) and ``output_grads``
    is [T, d_out] (the loss gradient w.r.t. the layer output rows delta_t),
    both filled during the backward pass of the most recent tapped graph.
    """

    def __init__(self, layer_id):
        self.layer_id = layer_id
        self.inputs = None
        self.output_grads = None

    @property
    def count(self):
        return 0 if self.inputs is None else self.inputs.shape[0]

    def _capture(self, u, delta):
        self.inputs = u
        self.output_grads = delta

    def reconstruct(self):
        """Sum of per-token outer products delta_t u_t^T (equals the tape
        gradient of the layer weight up to float rounding)."""
        if self.inputs is None:
            raise EngineError(f"tap {self.layer_id!r} holds no captured pairs")
        return self.output_grads.T @ self.inputs


class TapRegistry:
    """Registration and capture of linear-layer taps.

    When built with a set of valid layer ids, registering an unknown id is
    an error.  ``clear`` empties captured pairs but keeps registrations.
    """

    def __init__(self, valid_ids=None):
        self._valid = None if valid_ids is None else set(valid_ids)
        self._taps = {}

    def register(self, layer_id):
        if self._valid is not None and layer_id not in self._valid:
            raise EngineError(f"unknown linear layer id {layer_id!r}")
        tap = self._taps.get(layer_id)
        if tap is None:
            tap = LinearTap(layer_id)
            self._taps[layer_id] = tap
        return tap

    def clear(self):
        for tap in self._taps.values():
            tap.inputs = None
            tap.output_grads = None

    def __contains__(self, layer_id):
        return layer_id in self._taps

    def __getitem__(self, layer_id):
        return self._taps[layer_id]

    def items(self):
        return self._taps.items()


# ---------------------------------------------------------------------------
# Ops


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def matmul(a, b, transpose_a=False, transpose_b=False):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    if a.data.dtype != b.data.dtype:
        raise EngineError(f"matmul: mixed dtypes {a.data.dtype} vs {b.data.dtype}")
    ka = a.data.shape[0] if transpose_a else a.data.shape[1]
    kb = b.data.shape[1] if transpose_b else b.data.shape[0]
    if ka != kb:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    A = a.data.T if transpose_a else a.data
    B = b.data.T if transpose_b else b.data
    out_data = A @ B

    def bw():
        dy = out.grad
        if a.requires_grad:
            _acc(a, B @ dy.T if transpose_a else dy @ B.T)
        if b.requires_grad:
            _acc(b, dy.T @ A if transpose_b else A.T @ dy)

    out = _result(out_data, (a, b), bw)
    return out


def linear(x, w, layer_id=None, taps=None):
    """y = x @ w.T for x [T, d_in], w [d_out, d_in].

    When ``taps`` holds a registration for ``layer_id``, the backward pass
    stores the per-token input rows and output-gradient rows on the tap.
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch("linear", x.data.shape, w.data.shape)
    if x.data.dtype != w.data.dtype:
        raise EngineError(f"linear: mixed dtypes {x.data.dtype} vs {w.data.dtype}")
    out_data = x.data @ w.data.T

    def bw():
        dy = out.grad
        if taps is not None and layer_id is not None and layer_id in taps:
            taps[layer_id]._capture(x.data, dy)
        if x.requires_grad:
            _acc(x, dy @ w.data)
        if w.requires_grad:
            _acc(w, dy.T @ x.data)

    out = _result(out_data, (x, w), bw)
    return out


def add(a, b):
    _check_same("add", a, b)
    out_data = a.data + b.data

    def bw():
        if a.requires_grad:
            _acc(a, out.grad)
        if b.requires_grad:
            _acc(b, out.grad)

    out = _result(out_data, (a, b), bw)
    return out


def mul(a, b):
    _check_same("mul", a, b)
    out_data = a.data * b.data

    def bw():
        if a.requires_grad:
            _acc(a, out.grad * b.data)
        if b.requires_grad:
            _acc(b, out.grad * a.data)

    out = _result(out_data, (a, b), bw)
    return out


def smul(a, s):
    s = float(s)
    out_data = a.data * s

    def bw():
        if a.requires_grad:
            _acc(a, out.grad * s)

    out = _result(out_data, (a,), bw)
    return out


def add_const(a, arr):
    """Add a non-differentiable constant array of the same shape (masks)."""
    arr = np.asarray(arr, dtype=a.data.dtype)
    if arr.shape != a.data.shape:
        raise ShapeMismatch("add_const", a.data.shape, arr.shape)
    out_data = a.data + arr

    def bw():
        if a.requires_grad:
            _acc(a, out.grad)

    out = _result(out_data, (a,), bw)
    return out


def softmax(a):
    """Row-wise softmax of a 1-D or 2-D tensor."""
    if a.data.ndim not in (1, 2):
        raise ShapeMismatch("softmax", a.data.shape)
    x2 = a.data.reshape(1, -1) if a.data.ndim == 1 else a.data
    y2 = K.softmax_rows(x2)
    out_data = y2.reshape(a.data.shape)

    def bw():
        dy2 = out.grad.reshape(y2.shape)
        _acc(a, K.softmax_rows_backward(y2, dy2).reshape(a.data.shape))

    out = _result(out_data, (a,), bw)
    return out


def standardize(a, eps=1e-6):
    """Per-row zero-mean unit-variance transform of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeMismatch("standardize", a.data.shape)
    y, inv_std = K.standardize_rows(a.data, eps)

    def bw():
        _acc(a, K.standardize_rows_backward(y, inv_std, out.grad))

    out = _result(y, (a,), bw)
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row layer normalization with scale and offset vectors."""
    if x.data.ndim != 2 or gamma.data.shape != (x.data.shape[1],) or beta.data.shape != (x.data.shape[1],):
        raise ShapeMismatch("layer_norm", x.data.shape, gamma.data.shape, beta.data.shape)
    xhat, inv_std = K.standardize_rows(x.data, eps)
    out_data = xhat * gamma.data + beta.data

    def bw():
        dy = out.grad
        if gamma.requires_grad:
            _acc(gamma, (dy * xhat).sum(axis=0))
        if beta.requires_grad:
            _acc(beta, dy.sum(axis=0))
        if x.requires_grad:
            _acc(x, K.standardize_rows_backward(xhat, inv_std, dy * gamma.data))

    out = _result(out_data, (x, gamma, beta), bw)
    return out


def embedding(table, ids):
    """Row gather from a 2-D table by integer ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeMismatch("embedding", table.data.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise EngineError(f"embedding: id out of range for table with {table.data.shape[0]} rows")
    out_data = table.data[ids]

    def bw():
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            K.embedding_backward(table.grad, ids, out.grad)

    out = _result(out_data, (table,), bw)
    return out


def cross_entropy_with_logits(logits, targets):
    """Per-row cross entropy; returns a 1-D tensor of losses."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeMismatch("cross_entropy_with_logits", logits.data.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.data.shape[1]):
        raise EngineError("cross_entropy_with_logits: target id out of range")
    loss, probs = K.cross_entropy_rows(logits.data, targets)

    def bw():
        _acc(logits, K.cross_entropy_rows_backward(probs, targets, out.grad))

    out = _result(loss, (logits,), bw)
    return out


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise EngineError("concat: empty tensor list")
    nd = tensors[0].data.ndim
    if axis not in (0, 1) or axis >= nd:
        raise ShapeMismatch("concat", *(t.data.shape for t in tensors))
    other = 1 - axis
    for t in tensors[1:]:
        if t.data.ndim != nd or (nd == 2 and t.data.shape[other] != tensors[0].data.shape[other]):
            raise ShapeMismatch("concat", *(t.data.shape for t in tensors))
        if t.data.dtype != tensors[0].data.dtype:
            raise EngineError("concat: mixed dtypes")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bw():
        off = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = (slice(off, off + size),) if axis == 0 else (slice(None), slice(off, off + size))
                _acc(t, out.grad[sl])
            off += size

    out = _result(out_data, tuple(tensors), bw)
    return out


def narrow(a, axis, start, stop):
    """Contiguous slice [start, stop) along axis 0 or 1."""
    nd = a.data.ndim
    if axis not in (0, 1) or axis >= nd:
        raise ShapeMismatch("narrow", a.data.shape)
    size = a.data.shape[axis]
    if not (0 <= start < stop <= size):
        raise EngineError(f"narrow: bad range [{start}, {stop}) for axis of size {size}")
    sl = (slice(start, stop),) if axis == 0 else (slice(None), slice(start, stop))
    out_data = a.data[sl].copy()

    def bw():
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[sl] += out.grad

    out = _result(out_data, (a,), bw)
    return out


def mean(a):
    """Mean over all entries, yielding a scalar tensor."""
    if a.data.size == 0:
        raise EngineError("mean: empty tensor")
    out_data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bw():
        if a.requires_grad:
            _acc(a, np.full(a.data.shape, out.grad / a.data.size, dtype=a.data.dtype))

    out = _result(out_data, (a,), bw)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    """tanh-approximated GELU (smooth, finite-difference friendly)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out_data = (0.5 * x * (1.0 + t)).astype(x.dtype, copy=False)

    def bw():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _acc(a, (out.grad * dydx).astype(x.dtype, copy=False))

    out = _result(out_data, (a,), bw)
    return out


def dropout(a, p, rng):
    """Inverted dropout; call only in training forwards."""
    if not (0.0 <= p < 1.0):
        raise EngineError(f"dropout: rate {p} outside [0, 1)")
    if p == 0.0:
        return a
    mask = ((rng.random(size=a.data.shape) >= p).astype(a.data.dtype)) / (1.0 - p)
    out_data = a.data * mask

    def bw():
        if a.requires_grad:
            _acc(a, out.grad * mask)

    out = _result(out_data, (a,), bw)
    return out
