"""
Trend modelling: reversible instance normalization around residual perceptron layers.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import torch
from torch import nn

from config import Config, ShapeError

logger = logging.getLogger(__name__)

ACTIVATIONS = {
    'gelu': nn.GELU,
    'silu': nn.SiLU,
    'tanh': nn.Tanh,
}


@dataclass
class RevinState:
    mean: torch.Tensor
    std: torch.Tensor
    eps: float


class RevIN(nn.Module):
    """Per-instance, per-channel standardization over time with a learnable affine"""

    def __init__(self, n_channels: int, eps: float = Config.REVIN_EPS):
        super().__init__()
        self.eps = eps
        self.affine_weight = nn.Parameter(torch.ones(n_channels))
        self.affine_bias = nn.Parameter(torch.zeros(n_channels))

    def normalize(self, x: torch.Tensor) -> Tuple[torch.Tensor, RevinState]:
        if x.dim() != 3 or x.shape[-1] != self.affine_weight.shape[0]:
            raise ShapeError(f"Expected (batch, L, {self.affine_weight.shape[0]}) input, got {tuple(x.shape)}")
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        # std >= eps; the clamp also keeps constant channels differentiable
        std = var.clamp_min(self.eps ** 2).sqrt()
        y = (x - mean) / std
        return y * self.affine_weight + self.affine_bias, RevinState(mean=mean, std=std, eps=self.eps)

    def denormalize(self, y: torch.Tensor, state: RevinState) -> torch.Tensor:
        if y.shape[0] != state.mean.shape[0] or y.shape[-1] != state.mean.shape[-1]:
            raise ShapeError(f"Input {tuple(y.shape)} does not match normalization state {tuple(state.mean.shape)}")
        y = (y - self.affine_bias) / (self.affine_weight + self.eps ** 2)
        return y * state.std + state.mean


def revin_normalize(x: torch.Tensor, revin: RevIN) -> Tuple[torch.Tensor, RevinState]:
    return revin.normalize(x)


def revin_denormalize(y: torch.Tensor, state: RevinState, revin: RevIN) -> torch.Tensor:
    return revin.denormalize(y, state)


def step_embedding(s: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of diffusion steps, shape (batch, dim)"""
    s = s.reshape(-1).to(torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64, device=s.device) / max(half, 1))
    angles = s[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class StepEmbedder(nn.Module):
    """Sinusoidal step embedding followed by a small perceptron"""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.net(step_embedding(s, self.dim).to(self.net[0].weight))


class ResidualLayer(nn.Module):
    def __init__(self, width: int, hidden: int, activation: str = 'gelu'):
        super().__init__()
        self.cond = nn.Linear(width, width)
        self.inner = nn.Linear(width, hidden)
        self.act = ACTIVATIONS[activation]()
        self.outer = nn.Linear(hidden, width)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        branch = self.outer(self.act(self.inner(h + self.cond(cond).unsqueeze(1))))
        return h + branch

    def zero_output(self):
        nn.init.zeros_(self.outer.weight)
        nn.init.zeros_(self.outer.bias)


class TrendNet(nn.Module):
    """RevIN -> N residual perceptron layers with step bias -> RevIN restoration"""

    def __init__(self, width: int, layers: int = 2, hidden_mult: int = 2, activation: str = 'gelu'):
        super().__init__()
        self.width = width
        self.revin = RevIN(width)
        self.layers = nn.ModuleList(
            [ResidualLayer(width, hidden_mult * width, activation) for _ in range(layers)]
        )

    def forward(self, trend: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return tlblock_forward(trend, self, cond)


def tlblock_forward(trend: torch.Tensor, net: TrendNet, cond: torch.Tensor) -> torch.Tensor:
    if trend.shape[-1] != net.width:
        raise ShapeError(f"Trend width {trend.shape[-1]} differs from block width {net.width}")
    h, state = net.revin.normalize(trend)
    for layer in net.layers:
        h = layer(h, cond)
    return net.revin.denormalize(h, state)
