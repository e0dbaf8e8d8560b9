"""
Seasonal-trend correction: each predicted component queries the other's conditional stream.
"""

import logging
from typing import Optional, Tuple

import torch
from torch import nn

from config import ShapeError
from seasonal_block import scaled_dot_attention

logger = logging.getLogger(__name__)


class ChunkProjection(nn.Module):
    """width d -> 2d perceptron whose output splits into input and conditional halves"""

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.proj = nn.Linear(width, 2 * width)

    def forward(self, component: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return chunk_project(component, self)


def chunk_project(component: torch.Tensor, proj: ChunkProjection) -> Tuple[torch.Tensor, torch.Tensor]:
    if component.shape[-1] != proj.width:
        raise ShapeError(f"Component width {component.shape[-1]} differs from projection width {proj.width}")
    input_half, cond_half = proj.proj(component).chunk(2, dim=-1)
    return input_half, cond_half


class AttentionDirection(nn.Module):
    def __init__(self, width: int, dk: int):
        super().__init__()
        self.query = nn.Linear(width, dk, bias=False)
        self.key = nn.Linear(width, dk, bias=False)
        self.value = nn.Linear(width, width, bias=False)

    def forward(self, queries: torch.Tensor, context: torch.Tensor, heads: int = 1):
        return scaled_dot_attention(self.query(queries), self.key(context), self.value(context), heads)


class CrossAttention(nn.Module):
    """Trend-query and seasonal-query directions with independent W_Q, W_K, W_V"""

    def __init__(self, width: int, dk: Optional[int] = None, heads: int = 1):
        super().__init__()
        self.dk = dk or width
        self.heads = heads
        self.trend = AttentionDirection(width, self.dk)
        self.seasonal = AttentionDirection(width, self.dk)


def cross_correct(trend_pred: torch.Tensor, seasonal_pred: torch.Tensor,
                  projs: Tuple[ChunkProjection, ChunkProjection], attn: CrossAttention,
                  residual: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """trend_cr = A(Q(trend_in), K(seasonal_cnd), V(seasonal_cnd)); seasonal_cr symmetric"""
    if trend_pred.shape != seasonal_pred.shape:
        raise ShapeError(f"Trend {tuple(trend_pred.shape)} and seasonal {tuple(seasonal_pred.shape)} shapes differ")
    trend_proj, seasonal_proj = projs
    trend_in, trend_cnd = chunk_project(trend_pred, trend_proj)
    seasonal_in, seasonal_cnd = chunk_project(seasonal_pred, seasonal_proj)

    trend_cr, _ = attn.trend(trend_in, seasonal_cnd, attn.heads)
    seasonal_cr, _ = attn.seasonal(seasonal_in, trend_cnd, attn.heads)
    if residual:
        trend_cr = trend_cr + trend_pred
        seasonal_cr = seasonal_cr + seasonal_pred
    return trend_cr, seasonal_cr


class Correction(nn.Module):
    """Cross-component correction followed by the width-d -> K decoders of both components"""

    def __init__(self, width: int, n_channels: int, dk: Optional[int] = None, heads: int = 1,
                 enabled: bool = True, residual: bool = False):
        super().__init__()
        self.enabled = enabled
        self.residual = residual
        if enabled:
            self.trend_proj = ChunkProjection(width)
            self.seasonal_proj = ChunkProjection(width)
            self.attention = CrossAttention(width, dk, heads)
        self.trend_decoder = nn.Linear(width, n_channels)
        self.seasonal_decoder = nn.Linear(width, n_channels)

    def forward(self, trend_pred: torch.Tensor, seasonal_pred: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.enabled:
            trend_pred, seasonal_pred = cross_correct(
                trend_pred, seasonal_pred, (self.trend_proj, self.seasonal_proj), self.attention, self.residual
            )
        return self.trend_decoder(trend_pred), self.seasonal_decoder(seasonal_pred)
