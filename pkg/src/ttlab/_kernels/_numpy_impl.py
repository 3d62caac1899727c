"""Pure-numpy implementations of the hot row-wise kernels.

Reference semantics for the compiled extension in ``_speedups.pyx``; the two
backends must agree to float rounding (see tests/test_kernels.py).  All
functions accept float32 or float64 arrays and preserve the input dtype.
"""

import numpy as np


def softmax_rows(x):
    """Row-wise softmax of a 2-D array (max-subtracted for stability)."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, dy):
    """dx for y = softmax_rows(x): dx = y * (dy - sum(dy * y, row))."""
    s = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - s)


def standardize_rows(x, eps):
    """Per-row zero-mean unit-variance transform.

    Returns (y, inv_std) where inv_std is per row, 1/sqrt(var + eps) with
    population variance.
    """
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (xc * inv_std).astype(x.dtype, copy=False), inv_std.reshape(-1).astype(x.dtype, copy=False)


def standardize_rows_backward(y, inv_std, dy):
    """dx for (y, inv_std) = standardize_rows(x)."""
    mean_dy = dy.mean(axis=1, keepdims=True)
    mean_dyy = (dy * y).mean(axis=1, keepdims=True)
    return inv_std.reshape(-1, 1) * (dy - mean_dy - y * mean_dyy)


def cross_entropy_rows(logits, targets):
    """Per-row cross entropy from raw logits.

    Returns (loss, probs): loss[t] = logsumexp(logits[t]) - logits[t, targets[t]],
    probs the row softmax (cached for the backward pass).
    """
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    lse = (m + np.log(z)).reshape(-1)
    rows = np.arange(logits.shape[0])
    loss = lse - logits[rows, targets]
    return loss.astype(logits.dtype, copy=False), probs


def cross_entropy_rows_backward(probs, targets, dloss):
    """dlogits for cross_entropy_rows: dloss[t] * (probs[t] - onehot(targets[t]))."""
    dx = probs * dloss.reshape(-1, 1)
    rows = np.arange(probs.shape[0])
    dx[rows, targets] -= dloss
    return dx


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
    """One bias-corrected Adam step, in place on param, m and v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def embedding_backward(dtable, ids, dy):
    """Scatter-add dy rows into dtable at ids, in place."""
    np.add.at(dtable, ids, dy)
