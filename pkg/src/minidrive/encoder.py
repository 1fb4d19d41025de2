"""Miniature large-kernel convolutional backbone producing per-view feature maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Module, kaiming_uniform, param
from .tensor import DimensionError, Tensor

CAMERAS = (
    "CAM_FRONT",
    "CAM_FRONT_LEFT",
    "CAM_FRONT_RIGHT",
    "CAM_BACK",
    "CAM_BACK_LEFT",
    "CAM_BACK_RIGHT",
)


@dataclass
class EncoderConfig:
    input_size: int = 64
    stages: list = field(default_factory=lambda: [[16, 1], [32, 1], [64, 2]])
    large_kernel: int = 7
    frozen: bool = True
    seed: int = 0

    def __post_init__(self):
        self.stages = [list(s) for s in self.stages]
        if self.input_size % (2 ** len(self.stages)):
            raise ValueError("input_size must be divisible by 2**len(stages)")
        if self.large_kernel % 2 == 0:
            raise ValueError("large_kernel must be odd")
        channels = [c for c, _ in self.stages]
        if channels != sorted(channels):
            raise ValueError("stage channels must be nondecreasing")

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]

    @property
    def out_size(self) -> int:
        return self.input_size // 2 ** len(self.stages)


@dataclass
class FeatureMap:
    values: Tensor
    view_name: str


class LKBlock(Module):
    """Depthwise large-kernel conv, pointwise conv, ReLU, residual add."""

    def __init__(self, rng: np.random.Generator, channels: int, kernel: int):
        self.dw = param(kaiming_uniform(rng, (channels, 1, kernel, kernel), kernel * kernel))
        self.dw_bias = param(np.zeros(channels))
        self.pw = param(kaiming_uniform(rng, (channels, channels, 1, 1), channels))
        self.pw_bias = param(np.zeros(channels))
        self.channels = channels
        self.kernel = kernel

    def __call__(self, x: Tensor) -> Tensor:
        c = x.shape[-3]
        if c != self.channels:
            raise DimensionError(f"lk_block: {c} channels, block expects {self.channels}")
        pad = (self.kernel - 1) // 2
        h = T.conv2d(x, self.dw, self.dw_bias, padding=pad, groups=c)
        h = T.conv2d(h, self.pw, self.pw_bias)
        return T.add(x, T.relu(h))


class Stage(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, blocks: int, kernel: int):
        self.down = param(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
        self.down_bias = param(np.zeros(c_out))
        self.blocks = [LKBlock(rng, c_out, kernel) for _ in range(blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        x = T.conv2d(x, self.down, self.down_bias, stride=2, padding=1)
        for block in self.blocks:
            x = block(x)
        return x


class VisionEncoder(Module):
    def __init__(self, cfg: EncoderConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        stages = []
        c_in = 3
        for c_out, blocks in cfg.stages:
            stages.append(Stage(rng, c_in, c_out, blocks, cfg.large_kernel))
            c_in = c_out
        self.stages = stages
        if cfg.frozen:
            self.set_trainable(False)

    def __call__(self, images: Tensor) -> Tensor:
        """``[3,H,W]`` or ``[n,3,H,W]`` images to feature maps ``[(n,) c, h, w]``."""
        size = self.cfg.input_size
        if images.ndim not in (3, 4) or images.shape[-3:] != (3, size, size):
            raise DimensionError(f"encoder expects 3x{size}x{size} images, got {images.shape}")
        x = images
        for stage in self.stages:
            x = stage(x)
        return x

    def encode_view(self, image: Tensor, view_name: str = CAMERAS[0]) -> FeatureMap:
        return FeatureMap(self(image), view_name)

    def encode_views(self, views: Sequence[Tensor], single_view: bool = False) -> list[FeatureMap]:
        expected = 1 if single_view else len(CAMERAS)
        if len(views) != expected:
            raise ValueError(f"expected {expected} views, got {len(views)}")
        names = CAMERAS[:expected]
        batch = self(T.concat([T.reshape(v, (1,) + v.shape) for v in views], axis=0))
        return [FeatureMap(T.take(batch, i), name) for i, name in enumerate(names)]
