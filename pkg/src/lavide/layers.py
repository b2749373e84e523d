"""Small building blocks shared by the map, vision and MoE branches."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor, per position."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class ConvBlock(nn.Module):
    """3x3 convolution, channel norm, GELU; spatial size preserved."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = ChannelNorm(c_out)

    def forward(self, x):
        return F.gelu(self.norm(self.conv(x)))


class PointwiseMLP(nn.Module):
    """Two-layer perceptron applied independently at every position."""

    def __init__(self, c_in: int, hidden: int, c_out: int):
        super().__init__()
        self.fc1 = nn.Conv2d(c_in, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, c_out, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))
