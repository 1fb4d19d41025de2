"""Feature-engineering mixture of experts: per-view soft routing into visual tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import FeatureMap
from .nn import Linear, Module, kaiming_uniform, param
from .tensor import DimensionError, Tensor


@dataclass
class MoEConfig:
    num_experts: int = 4
    expert_out_channels: int = 16
    expert_kernel: int = 2
    expert_stride: int = 2
    gate_hidden: int = 0  # 0 -> in_channels // 4
    proj_dim: int = 128
    seed: int = 1

    def validate(self, in_channels: int) -> None:
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if not 1 <= self.expert_out_channels < in_channels:
            raise ValueError(
                f"expert_out_channels must be in [1, {in_channels}) so channels decrease"
            )
        if self.proj_dim <= 0:
            raise ValueError("proj_dim must be positive")


class GateNet(Module):
    """conv 3x3 -> ReLU -> maxpool 2 -> flatten -> linear, giving one logit per expert."""

    def __init__(self, rng: np.random.Generator, channels: int, size: int, hidden: int,
                 num_experts: int):
        if size % 2:
            raise ValueError("gate max-pool needs an even feature-map extent")
        self.conv = param(kaiming_uniform(rng, (hidden, channels, 3, 3), channels * 9))
        self.conv_bias = param(np.zeros(hidden))
        self.linear = Linear(rng, hidden * (size // 2) ** 2, num_experts, init="zeros")

    def __call__(self, f1: Tensor) -> Tensor:
        h = T.relu(T.conv2d(f1, self.conv, self.conv_bias, padding=1))
        h = T.maxpool2d(h, 2)
        if h.ndim == 3:  # single image: run as a batch of one
            return T.reshape(self.linear(T.reshape(h, (1, -1))), (-1,))
        return self.linear(T.flatten(h, 1))


class Expert(Module):
    """Deconv (channel decrease, spatial increase) -> ReLU -> conv 3x3."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int, stride: int):
        self.deconv = param(kaiming_uniform(rng, (c_in, c_out, kernel, kernel), c_in * kernel * kernel))
        self.deconv_bias = param(np.zeros(c_out))
        self.conv = param(kaiming_uniform(rng, (c_out, c_out, 3, 3), c_out * 9))
        self.conv_bias = param(np.zeros(c_out))
        self.stride = stride

    def __call__(self, f1: Tensor) -> Tensor:
        h = T.conv_transpose2d(f1, self.deconv, self.deconv_bias, stride=self.stride)
        return T.conv2d(T.relu(h), self.conv, self.conv_bias, padding=1)


class FEMoE(Module):
    def __init__(self, cfg: MoEConfig, in_channels: int, in_size: int):
        cfg.validate(in_channels)
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.in_channels = in_channels
        self.in_size = in_size
        hidden = cfg.gate_hidden or max(1, in_channels // 4)
        self.gate = GateNet(rng, in_channels, in_size, hidden, cfg.num_experts)
        self.expert = [
            Expert(rng, in_channels, cfg.expert_out_channels, cfg.expert_kernel, cfg.expert_stride)
            for _ in range(cfg.num_experts)
        ]
        self.out_size = (in_size - 1) * cfg.expert_stride + cfg.expert_kernel
        self.proj = Linear(rng, self.out_size ** 2, cfg.proj_dim)

    @property
    def tokens_per_view(self) -> int:
        return self.cfg.expert_out_channels

    def _check(self, f1: Tensor) -> None:
        want = (self.in_channels, self.in_size, self.in_size)
        if f1.shape[-3:] != want or f1.ndim not in (3, 4):
            raise DimensionError(f"FE-MoE expects feature maps {want}, got {f1.shape}")

    def _expert_shape(self, f1: Tensor) -> tuple[int, ...]:
        return f1.shape[:-3] + (self.cfg.expert_out_channels, self.out_size, self.out_size)

    def gate_weights(self, f1: Tensor) -> Tensor:
        """Softmax routing weights ``[N]`` (or ``[n, N]`` for a batch of views)."""
        self._check(f1)
        return T.softmax(self.gate(f1))

    def expert_forward(self, f1: Tensor, index: int) -> Tensor:
        self._check(f1)
        return self.expert[index](f1)

    def combine(self, f1: Tensor, weights: Tensor | None = None) -> Tensor:
        """Dense mixture ``sum_i w_i * expert_i(f1)``; ``weights`` overrides the gate."""
        self._check(f1)
        if weights is None:
            weights = self.gate_weights(f1)
        batched = f1.ndim == 4
        outs = [T.reshape(e(f1), (1,) + self._expert_shape(f1)) for e in self.expert]
        stacked = T.concat(outs, axis=0)  # [N, (n,) c', h', w']
        if batched:
            w = T.reshape(T.transpose(weights, (1, 0)), (len(self.expert), -1, 1, 1, 1))
        else:
            w = T.reshape(weights, (len(self.expert), 1, 1, 1))
        return T.sum(T.mul(stacked, w), axis=0)

    def flatten_project(self, v_moe: Tensor) -> Tensor:
        """``[c', h', w'] -> [c', dim]``: one token per expert output channel."""
        tokens = T.flatten(v_moe, -2)
        return self.proj(tokens)

    def __call__(self, f1: Tensor) -> Tensor:
        return self.flatten_project(self.combine(f1))

    def pipeline(self, views: Sequence[FeatureMap] | Tensor, single_view: bool = False) -> Tensor:
        """Token matrix ``[views * c', dim]`` in canonical camera order.

        Accepts a list of FeatureMaps, a ``[views, c, h, w]`` tensor, or a batch
        ``[batch, views, c, h, w]`` (returning ``[batch, views * c', dim]``).
        """
        expected = 1 if single_view else 6
        if isinstance(views, Tensor):
            x = views
        else:
            x = T.concat([T.reshape(v.values, (1,) + v.values.shape) for v in views], axis=0)
        lead = x.shape[:-3]
        n_views = lead[-1]
        if n_views != expected:
            raise ValueError(f"expected {expected} views, got {n_views}")
        flat = T.reshape(x, (-1,) + x.shape[-3:])
        tokens = self(flat)  # [B*views, c', dim]
        c_out, dim = tokens.shape[-2:]
        return T.reshape(tokens, lead[:-1] + (n_views * c_out, dim))

