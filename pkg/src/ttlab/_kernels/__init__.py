"""Kernel backend selection.

Prefers the compiled extension (``_speedups``) and falls back to the pure
numpy implementation when it is missing or when ``TTLAB_PURE_PY=1`` is set.
Both backends expose the same nine functions; ``BACKEND`` names the one in
use.  Arrays are normalized (contiguity, index dtype, 2-D views for the
in-place kernels) here so callers never care which backend is live.
"""

import os

import numpy as np

from . import _numpy_impl

if os.environ.get("TTLAB_PURE_PY", "") != "1":
    try:
        from . import _speedups
    except ImportError:
        _speedups = None
else:
    _speedups = None

BACKEND = "cython" if _speedups is not None else "numpy"
_impl = _speedups if _speedups is not None else _numpy_impl


def _c(a):
    return np.ascontiguousarray(a)


def _ids(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def softmax_rows(x):
    return _impl.softmax_rows(_c(x))


def softmax_rows_backward(y, dy):
    return _impl.softmax_rows_backward(_c(y), _c(dy))


def standardize_rows(x, eps):
    return _impl.standardize_rows(_c(x), eps)


def standardize_rows_backward(y, inv_std, dy):
    return _impl.standardize_rows_backward(_c(y), _c(inv_std), _c(dy))


def cross_entropy_rows(logits, targets):
    return _impl.cross_entropy_rows(_c(logits), _ids(targets))


def cross_entropy_rows_backward(probs, targets, dloss):
    return _impl.cross_entropy_rows_backward(_c(probs), _ids(targets), _c(dloss))


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
    # 2-D views so one compiled kernel covers vectors and matrices; param,
    # m and v are updated in place through the views.
    p2 = param.reshape(1, -1) if param.ndim == 1 else param
    g2 = grad.reshape(1, -1) if grad.ndim == 1 else grad
    m2 = m.reshape(1, -1) if m.ndim == 1 else m
    v2 = v.reshape(1, -1) if v.ndim == 1 else v
    _impl.adam_update(p2, _c(g2), m2, v2, lr, beta1, beta2, eps, t)


def embedding_backward(dtable, ids, dy):
    _impl.embedding_backward(dtable, _ids(ids), _c(dy))
