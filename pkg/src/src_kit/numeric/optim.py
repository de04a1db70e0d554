from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .params import ParamStore


class RMSProp:
    """Momentum-free adaptive step: ``p -= lr * g / (sqrt(v_hat) + eps)``.

    ``v_hat`` is the bias-corrected running mean of squared gradients, so the
    first steps are not inflated by the zero-initialised accumulator.
    """

    def __init__(self, params: ParamStore, lr: float = 1e-3, rho: float = 0.99,
                 eps: float = 1e-8, clip_norm: float | None = None, names=None):
        self.params = params
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.clip_norm = clip_norm
        self.names = list(names) if names is not None else params.names()
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}
        self.t = 0

    def step(self) -> float:
        grads = {n: self.params[n].grad for n in self.names if self.params[n].grad is not None}
        sq = sum(float((g * g).sum()) for g in grads.values())
        gnorm = float(np.sqrt(sq))
        if not np.isfinite(gnorm):
            raise NumericError("non-finite gradient norm")
        scale = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm:
            scale = self.clip_norm / gnorm
        self.t += 1
        if self.lr == 0.0:
            return gnorm
        corr = 1.0 - self.rho**self.t
        for n, g in grads.items():
            g = g * scale
            v = self.v[n]
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            p = self.params[n]
            p.data = p.data - self.lr * g / (np.sqrt(v / corr) + self.eps)
        return gnorm


class Adam(RMSProp):
    """RMSProp plus a bias-corrected first moment (beta1)."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9, rho: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = None, names=None):
        super().__init__(params, lr, rho, eps, clip_norm, names)
        self.beta1 = beta1
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> float:
        grads = {n: self.params[n].grad for n in self.names if self.params[n].grad is not None}
        gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if not np.isfinite(gnorm):
            raise NumericError("non-finite gradient norm")
        scale = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm:
            scale = self.clip_norm / gnorm
        self.t += 1
        if self.lr == 0.0:
            return gnorm
        c1, c2 = 1.0 - self.beta1**self.t, 1.0 - self.rho**self.t
        for n, g in grads.items():
            g = g * scale
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            p = self.params[n]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return gnorm
