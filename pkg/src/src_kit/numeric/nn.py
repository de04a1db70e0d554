"""Fused differentiable kernels: layer norm, GELU, masked attention, losses, rotary."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor, _node, _unbroadcast, add, as_tensor, matmul

# Additive bias for blocked attention entries; exp() of it underflows to exactly 0.
MASK_NEG = -1e30


@dataclass(frozen=True)
class AttnMask:
    """Square boolean attention mask, ``allowed[i, j]`` means token i may attend to j."""

    allowed: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"attention mask must be square, got {a.shape}")
        if not np.all(np.diag(a)):
            raise ConfigError("attention mask must allow every token to attend to itself")
        a.setflags(write=False)
        object.__setattr__(self, "allowed", a)

    @property
    def size(self) -> int:
        return self.allowed.shape[0]

    @classmethod
    def full(cls, size: int) -> "AttnMask":
        return cls(np.ones((size, size), dtype=bool))

    @classmethod
    def causal(cls, size: int) -> "AttnMask":
        return cls(np.tril(np.ones((size, size), dtype=bool)))

    def bias(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, MASK_NEG)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def gelu(x: Tensor) -> Tensor:
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x2)
        x.accumulate(g * (0.5 * (1.0 + t) + 0.5 * xd * dt))

    return _node(out, (x,), backward, "gelu")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError("gain/bias length must equal the feature dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias.accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            x.accumulate(dx)

    return _node(out, (x, gain, bias), backward, "layer_norm")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: AttnMask | np.ndarray | None = None,
              return_weights: bool = False):
    """Scaled dot-product attention over the last two axes.

    ``mask`` is an :class:`AttnMask` or a boolean array broadcastable to the
    score shape ``(..., Nq, Nk)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        allowed = mask.allowed if isinstance(mask, AttnMask) else np.asarray(mask, dtype=bool)
        if allowed.shape[-2:] != scores.shape[-2:]:
            raise ShapeError(f"mask shape {allowed.shape} does not match scores {scores.shape}")
        if not np.all(allowed.any(axis=-1)):
            raise ConfigError("attention mask has a row with no allowed entries")
        scores = scores + np.where(allowed, 0.0, MASK_NEG)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = w @ v.data

    def backward(g):
        if v.requires_grad:
            v.accumulate(_unbroadcast(np.swapaxes(w, -1, -2) @ g, v.shape))
        gw = g @ np.swapaxes(v.data, -1, -2)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            q.accumulate(_unbroadcast(gs @ k.data, q.shape))
        if k.requires_grad:
            k.accumulate(_unbroadcast(np.swapaxes(gs, -1, -2) @ q.data, k.shape))

    res = _node(out, (q, k, v), backward, "attention")
    return (res, w) if return_weights else res


def masked_attention(q, k, v, mask: AttnMask, return_weights: bool = False):
    """Single-head attention on 2-D token matrices restricted by ``mask``."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.ndim == k.ndim == v.ndim == 2):
        raise ShapeError("masked_attention expects 2-D inputs")
    if not (q.shape[0] == k.shape[0] == v.shape[0] == mask.size):
        raise ShapeError(f"row counts {q.shape[0]}, {k.shape[0]}, {v.shape[0]} vs mask size {mask.size}")
    if not (q.shape[1] == k.shape[1] == v.shape[1]):
        raise ShapeError("q, k, v must have equal column counts")
    return attention(q, k, v, mask, return_weights=return_weights)


def softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits.data)
    flat = lp.reshape(-1, lp.shape[-1])
    t = targets.reshape(-1)
    count = t.size
    loss = -flat[np.arange(count), t].mean()

    def backward(g):
        p = np.exp(flat)
        p[np.arange(count), t] -= 1.0
        logits.accumulate((g * p / count).reshape(logits.shape))

    return _node(loss, (logits,), backward, "cross_entropy")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise NumericError("cannot normalize a zero vector")
    y = x.data / norm

    def backward(g):
        x.accumulate((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm)

    return _node(y, (x,), backward, "l2_normalize")


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved feature pairs ``(x[2i], x[2i+1])`` by the given angles.

    ``cos``/``sin`` broadcast against ``x[..., ::2]``.
    """
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        x.accumulate(gx)

    return _node(out, (x,), backward, "rotate")
