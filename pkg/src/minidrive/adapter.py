"""Instruction-conditioned cross-attention over visual tokens, fused residually."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import DimensionError, Tensor


@dataclass
class AdapterConfig:
    heads: int = 1
    zero_init_output: bool = True
    seed: int = 2


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., l, dim] -> [..., heads, l, dim/heads]``."""
    *lead, length, dim = x.shape
    x = T.reshape(x, tuple(lead) + (length, heads, dim // heads))
    n = len(lead)
    return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    n = len(lead)
    x = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(x, tuple(lead) + (length, heads * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None,
              causal: bool = False) -> Tensor:
    """Scaled dot-product attention on ``[..., l, d]`` operands.

    ``key_mask`` is true for keys that may be attended, broadcast as ``[..., 1, lk]``.
    """
    scores = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(q.shape[-1]))
    blocked = None
    if key_mask is not None:
        blocked = ~np.asarray(key_mask, dtype=bool)[..., None, :]
    if causal:
        lq, lk = scores.shape[-2:]
        future = np.triu(np.ones((lq, lk), dtype=bool), k=1)
        blocked = future if blocked is None else (blocked | future)
    if blocked is not None:
        scores = T.masked_fill(scores, blocked)
    return T.matmul(T.softmax(scores), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


class DIAdapter(Module):
    def __init__(self, cfg: AdapterConfig, dim: int):
        if dim % cfg.heads:
            raise ValueError("heads must divide dim")
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.dim = dim
        self.w_q = Linear(rng, dim, dim, bias=False)
        self.w_k = Linear(rng, dim, dim, bias=False)
        self.w_v = Linear(rng, dim, dim, bias=False)
        self.w_o = Linear(rng, dim, dim, bias=False, init="zeros" if cfg.zero_init_output else "xavier")

    def attend(self, v: Tensor, t: Tensor, text_mask: np.ndarray | None = None) -> Tensor:
        """Attention output before the output projection (visual tokens query the text)."""
        if t.shape[-2] == 0:
            raise ValueError("cross_attention needs at least one text token")
        if v.shape[-1] != self.dim or t.shape[-1] != self.dim:
            raise DimensionError(f"cross_attention: dims {v.shape[-1]}/{t.shape[-1]} != {self.dim}")
        h = self.cfg.heads
        q = split_heads(self.w_q(v), h)
        k = split_heads(self.w_k(t), h)
        val = split_heads(self.w_v(t), h)
        mask = None
        if text_mask is not None:
            mask = np.asarray(text_mask, dtype=bool)[..., None, :]  # broadcast over heads
        return merge_heads(attention(q, k, val, mask))

    def cross_attention(self, v: Tensor, t: Tensor, text_mask: np.ndarray | None = None) -> Tensor:
        return self.w_o(self.attend(v, t, text_mask))

    def __call__(self, v: Tensor, t: Tensor, text_mask: np.ndarray | None = None) -> Tensor:
        return residual_fuse(v, self.cross_attention(v, t, text_mask))


def residual_fuse(v: Tensor, v_prime: Tensor) -> Tensor:
    if v.shape != v_prime.shape:
        raise DimensionError(f"residual_fuse: {v.shape} vs {v_prime.shape}")
    return T.add(v, v_prime)
