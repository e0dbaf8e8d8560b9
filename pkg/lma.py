"""
Learnable moving-average decomposition of a window into trend and seasonal parts, and its exact inverse.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from config import Config, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_KERNELS = [1, 2, 4, 6, 12]
ABLATION_KERNEL = 3


def moving_average(x: torch.Tensor, l: int) -> torch.Tensor:
    """Causal mean over the last l steps of a (batch, L, K) array, left edge replicated"""
    if x.dim() != 3:
        raise ShapeError(f"Expected (batch, L, K) input, got shape {tuple(x.shape)}")
    L = x.shape[1]
    if not 1 <= l <= L:
        raise ShapeError(f"Kernel size {l} outside [1, {L}]")
    if l == 1:
        return x
    padded = torch.cat([x[:, :1, :].expand(-1, l - 1, -1), x], dim=1)
    pooled = F.avg_pool1d(padded.transpose(1, 2), kernel_size=l, stride=1)
    return pooled.transpose(1, 2)


@dataclass
class DecompositionResult:
    trend: torch.Tensor
    seasonal: torch.Tensor
    raw_trend: torch.Tensor
    weights: torch.Tensor


class KernelBank(nn.Module):
    """Moving-average kernels plus the perceptron that mixes them per position and channel"""

    def __init__(self, length: int, kernel_sizes: Optional[List[int]] = None, hidden: int = 16,
                 global_weights: bool = False, learnable: bool = True):
        super().__init__()
        sizes = list(kernel_sizes or DEFAULT_KERNELS)
        if any(k < 1 for k in sizes) or len(set(sizes)) != len(sizes):
            raise ShapeError(f"Kernel sizes must be distinct positive integers, got {sizes}")
        too_long = [k for k in sizes if k > length]
        if too_long:
            logger.warning(f"Dropping moving-average kernels {too_long} longer than window length {length}")
        self.kernel_sizes = [k for k in sizes if k <= length]
        if not self.kernel_sizes:
            raise ShapeError(f"No moving-average kernel fits window length {length}")

        n = len(self.kernel_sizes)
        self.learnable = learnable
        self.global_weights = global_weights and learnable
        self.weight_net = None
        self.global_logits = None
        if self.global_weights:
            self.global_logits = nn.Parameter(torch.zeros(n))
        elif learnable:
            self.weight_net = nn.Sequential(nn.Linear(n, hidden), nn.GELU(), nn.Linear(hidden, n))

    def stacked(self, x: torch.Tensor) -> torch.Tensor:
        """(batch, L, K, n_kernels) moving averages"""
        return torch.stack([moving_average(x, l) for l in self.kernel_sizes], dim=-1)

    def weights(self, stacked: torch.Tensor) -> torch.Tensor:
        if self.weight_net is not None:
            logits = self.weight_net(stacked)
        elif self.global_logits is not None:
            logits = self.global_logits.expand_as(stacked)
        else:
            logits = torch.zeros_like(stacked)
        return torch.softmax(logits, dim=-1)


class AffineParams(nn.Module):
    """Per-channel scale gamma = exp(g) (floored) and bias beta"""

    def __init__(self, n_channels: int, learnable: bool = True):
        super().__init__()
        log_gamma = torch.zeros(n_channels)
        beta = torch.zeros(n_channels)
        if learnable:
            self.log_gamma = nn.Parameter(log_gamma)
            self.beta = nn.Parameter(beta)
        else:
            self.register_buffer('log_gamma', log_gamma)
            self.register_buffer('beta', beta)

    @property
    def gamma(self) -> torch.Tensor:
        return self.log_gamma.exp().clamp_min(Config.GAMMA_FLOOR)


def decompose(x_s: torch.Tensor, bank: KernelBank, affine: AffineParams) -> DecompositionResult:
    """Trend = gamma * sum_i w_i MA_i + beta; seasonal = x_s - sum_i w_i MA_i"""
    if x_s.dim() != 3 or x_s.shape[-1] != affine.beta.shape[0]:
        raise ShapeError(f"Input shape {tuple(x_s.shape)} does not match {affine.beta.shape[0]} channels")
    if max(bank.kernel_sizes) > x_s.shape[1]:
        raise ShapeError(f"Kernel {max(bank.kernel_sizes)} exceeds window length {x_s.shape[1]}")
    stacked = bank.stacked(x_s)
    weights = bank.weights(stacked)
    raw_trend = (weights * stacked).sum(dim=-1)
    trend = affine.gamma * raw_trend + affine.beta
    seasonal = x_s - raw_trend
    return DecompositionResult(trend=trend, seasonal=seasonal, raw_trend=raw_trend, weights=weights)


def restore(trend_cr: torch.Tensor, seasonal_cr: torch.Tensor, affine: AffineParams) -> torch.Tensor:
    """x0_hat = (trend - beta) / gamma + seasonal"""
    if trend_cr.shape != seasonal_cr.shape:
        raise ShapeError(f"Trend shape {tuple(trend_cr.shape)} differs from seasonal shape {tuple(seasonal_cr.shape)}")
    return (trend_cr - affine.beta) / affine.gamma + seasonal_cr


class LearnableMovingAverage(nn.Module):
    """Decomposition and restoration sharing one affine instance"""

    def __init__(self, n_channels: int, length: int, kernel_sizes: Optional[List[int]] = None,
                 hidden: int = 16, global_weights: bool = False, learnable: bool = True):
        super().__init__()
        self.bank = KernelBank(length, kernel_sizes, hidden, global_weights, learnable)
        self.affine = AffineParams(n_channels, learnable)

    def decompose(self, x_s: torch.Tensor) -> DecompositionResult:
        return decompose(x_s, self.bank, self.affine)

    def restore(self, trend_cr: torch.Tensor, seasonal_cr: torch.Tensor) -> torch.Tensor:
        return restore(trend_cr, seasonal_cr, self.affine)


def build_lma(cfg, n_channels: int, length: int) -> LearnableMovingAverage:
    """Configured LMA, or the fixed kernel-3 moving average when lma.enabled is off"""
    if not cfg.lma.enabled:
        return LearnableMovingAverage(n_channels, length, [min(ABLATION_KERNEL, length)], learnable=False)
    return LearnableMovingAverage(n_channels, length, cfg.lma.kernels, cfg.lma.hidden, cfg.lma.global_weights)
