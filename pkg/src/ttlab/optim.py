"""Bias-corrected Adam over named parameter tensors."""

import numpy as np

from . import _kernels as K


class Adam:
    """Standard Adam; moments live with the optimizer, updates are in place.

    Parameters with a missing gradient are treated as zero-gradient (moments
    still decay, the step counter still advances).
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ValueError(f"adam: gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
            K.adam_update(p.data, g, self.m[name], self.v[name],
                          self.lr, self.beta1, self.beta2, self.eps, self.t)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self):
        """Moment arrays keyed for checkpointing."""
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out
