"""Convolutional building blocks shared by the rehearsers and the ReID model."""
from __future__ import annotations

import contextlib
import math

import torch
from torch import nn

from .autodiff import conv2d_same, global_avg_pool, linear, relu


@contextlib.contextmanager
def seeded(seed: int):
    """Run parameter initialization under a private torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 2):
        super().__init__()
        fan_in = c_in * k * k
        bound = math.sqrt(6.0 / fan_in)  # He-uniform for relu
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride = stride

    def forward(self, x):
        return relu(conv2d_same(x, self.weight, self.bias, stride=self.stride))


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bound: float | None = None):
        super().__init__()
        if bound is None:
            bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(d_out, d_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(d_out).uniform_(-bound, bound))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Backbone(nn.Module):
    """Stride-2 conv blocks followed by global average pooling."""

    def __init__(self, channels=(3, 8, 16, 32)):
        super().__init__()
        self.channels = tuple(channels)
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(channels[:-1], channels[1:]))

    @property
    def out_dim(self) -> int:
        return self.channels[-1]

    @property
    def min_size(self) -> int:
        return 2 ** len(self.blocks)

    def forward(self, x):
        if x.shape[2] < self.min_size or x.shape[3] < self.min_size:
            raise ValueError(f"input {tuple(x.shape[2:])} too small for {len(self.blocks)} "
                             f"stride-2 blocks (need >= {self.min_size}x{self.min_size})")
        for block in self.blocks:
            x = block(x)
        return global_avg_pool(x)
