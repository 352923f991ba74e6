"""Parameter initialisation and transformer building blocks shared by the
encoders and the language model.  Parameters live in flat ``dict[str, Tensor]``
maps keyed by dotted names."""
from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor, concat, gelu, layer_norm, softmax

Params = dict[str, Tensor]

INIT_STD = 0.02


def normal(rng: np.random.Generator, shape, dtype, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def add_linear(params: Params, rng, name: str, din: int, dout: int, dtype) -> None:
    params[f"{name}.w"] = normal(rng, (din, dout), dtype)
    params[f"{name}.b"] = zeros((dout,), dtype)


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def add_norm(params: Params, name: str, dim: int, dtype) -> None:
    params[f"{name}.g"] = ones((dim,), dtype)
    params[f"{name}.b"] = zeros((dim,), dtype)


def norm(x: Tensor, params: Params, name: str) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def add_block(params: Params, rng, name: str, dim: int, dtype, mlp_ratio: int = 4) -> None:
    add_norm(params, f"{name}.ln1", dim, dtype)
    add_linear(params, rng, f"{name}.qkv", dim, 3 * dim, dtype)
    add_linear(params, rng, f"{name}.proj", dim, dim, dtype)
    add_norm(params, f"{name}.ln2", dim, dtype)
    add_linear(params, rng, f"{name}.fc1", dim, mlp_ratio * dim, dtype)
    add_linear(params, rng, f"{name}.fc2", mlp_ratio * dim, dim, dtype)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def self_attention(x: Tensor, params: Params, name: str, heads: int,
                   mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention on a (batch, seq, dim) tensor."""
    b, t, d = x.shape
    qkv = linear(x, params, name)
    q = _split_heads(qkv[:, :, :d], heads)
    k = _split_heads(qkv[:, :, d:2 * d], heads)
    v = _split_heads(qkv[:, :, 2 * d:], heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // heads))
    attn = softmax(scores, axis=-1, mask=mask)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return out


def block(x: Tensor, params: Params, name: str, heads: int, mask: np.ndarray | None = None) -> Tensor:
    h = norm(x, params, f"{name}.ln1")
    x = x + linear(self_attention(h, params, f"{name}.qkv", heads, mask), params, f"{name}.proj")
    h = norm(x, params, f"{name}.ln2")
    return x + linear(gelu(linear(h, params, f"{name}.fc1")), params, f"{name}.fc2")


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def cat(tensors, axis):
    return tensors[0] if len(tensors) == 1 else concat(tensors, axis)
