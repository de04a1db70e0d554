"""Pre-norm transformer block shared by the encoder and the toy decoder."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .numeric import ParamStore, Tensor, attention, gelu, layer_norm, linear, reshape, rotate_pairs, transpose


def init_block(params: ParamStore, prefix: str, d: int, rng: np.random.Generator, mlp_ratio: int = 4):
    h = d * mlp_ratio
    params.add(f"{prefix}.ln1.g", np.ones(d))
    params.add(f"{prefix}.ln1.b", np.zeros(d))
    for name in ("wq", "wk", "wv"):
        params.add(f"{prefix}.attn.{name}", rng.normal(0, d**-0.5, (d, d)))
    params.add(f"{prefix}.attn.wo", rng.normal(0, d**-0.5, (d, d)) * 0.5)
    params.add(f"{prefix}.ln2.g", np.ones(d))
    params.add(f"{prefix}.ln2.b", np.zeros(d))
    params.add(f"{prefix}.mlp.w1", rng.normal(0, d**-0.5, (d, h)))
    params.add(f"{prefix}.mlp.b1", np.zeros(h))
    params.add(f"{prefix}.mlp.w2", rng.normal(0, h**-0.5, (h, d)) * 0.5)
    params.add(f"{prefix}.mlp.b2", np.zeros(d))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return transpose(reshape(x, (*lead, n, heads, d // heads)), (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, hd = x.shape
    nl = len(lead)
    return reshape(transpose(x, (*range(nl), nl + 1, nl, nl + 2)), (*lead, n, h * hd))


def block_forward(x: Tensor, params: ParamStore, prefix: str, heads: int, allowed: np.ndarray,
                  rope: tuple[np.ndarray, np.ndarray] | None = None, record: list | None = None) -> Tensor:
    """x: (..., N, d). ``allowed`` is an (N, N) boolean mask; ``rope`` holds
    per-token cos/sin tables applied to queries and keys of every head."""
    d = x.shape[-1]
    if d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    p = lambda n: params[f"{prefix}.{n}"]
    h = layer_norm(x, p("ln1.g"), p("ln1.b"))
    q = _split_heads(linear(h, p("attn.wq")), heads)
    k = _split_heads(linear(h, p("attn.wk")), heads)
    v = _split_heads(linear(h, p("attn.wv")), heads)
    if rope is not None:
        q = rotate_pairs(q, *rope)
        k = rotate_pairs(k, *rope)
    att, w = attention(q, k, v, allowed, return_weights=True)
    if record is not None:
        record.append(w)
    x = x + linear(_merge_heads(att), p("attn.wo"))
    h = layer_norm(x, p("ln2.g"), p("ln2.b"))
    return x + linear(gelu(linear(h, p("mlp.w1"), p("mlp.b1"))), p("mlp.w2"), p("mlp.b2"))
