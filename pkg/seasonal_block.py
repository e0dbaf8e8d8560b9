"""
Seasonal modelling with a learnable db3-initialized wavelet filter bank.

The seasonal component is split by a periodic multilevel DWT, every level of
coefficients passes through its own self-attention, and the inverse transform
reassembles the prediction from the same low-pass filter.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import mpmath
import numpy as np
import sympy as sp
import torch
from torch import nn

from config import Config, ShapeError

logger = logging.getLogger(__name__)

FILTER_LENGTH = 6


def _db3_symbolic() -> List[sp.Expr]:
    """Closed-form order-3 Daubechies low-pass filter, normalized to sum sqrt(2)"""
    r10 = sp.sqrt(10)
    r = sp.sqrt(5 + 2 * r10)
    denom = 16 * sp.sqrt(2)
    return [
        (1 + r10 + r) / denom,
        (5 + r10 + 3 * r) / denom,
        (10 - 2 * r10 + 2 * r) / denom,
        (10 - 2 * r10 - 2 * r) / denom,
        (5 + r10 - 3 * r) / denom,
        (1 + r10 - r) / denom,
    ]


def _regularizer_mp(h: List[mpmath.mpf]) -> mpmath.mpf:
    n = len(h)
    total = mpmath.mpf(0)
    for k in (1, 2):
        total += mpmath.fsum(h[i] * h[i + 2 * k] for i in range(n - 2 * k)) ** 2
    total += (mpmath.fsum(x * x for x in h) - 1) ** 2
    total += (mpmath.fsum(h) - mpmath.sqrt(2)) ** 2
    return total


@lru_cache(maxsize=1)
def db3_coefficients() -> Tuple[float, ...]:
    """db3 low-pass coefficients, validated against the orthogonality gate"""
    with mpmath.workdps(Config.DB3_PRECISION_DIGITS):
        h = [mpmath.mpf(str(sp.N(c, Config.DB3_PRECISION_DIGITS))) for c in _db3_symbolic()]
        gate = _regularizer_mp(h)
        if gate > Config.DB3_GATE:
            raise ValueError(f"db3 construction failed the orthogonality gate ({gate})")
        return tuple(float(c) for c in h)


def qmf_highpass(h: torch.Tensor) -> torch.Tensor:
    """g[n] = (-1)^n h[len - 1 - n]"""
    n = h.shape[-1]
    if n % 2:
        raise ShapeError(f"Quadrature mirror construction needs an even-length filter, got {n}")
    signs = torch.ones(n, dtype=h.dtype, device=h.device)
    signs[1::2] = -1.0
    return signs * torch.flip(h, dims=[-1])


def wavelet_regularizer(h: torch.Tensor) -> torch.Tensor:
    """Even-shift orthogonality, unit energy and sum-sqrt(2) penalties (zero-extended shifts)"""
    total = h.new_zeros(())
    n = h.shape[-1]
    for k in (1, 2):
        if 2 * k < n:
            total = total + (h[:-2 * k] * h[2 * k:]).sum() ** 2
    total = total + ((h * h).sum() - 1.0) ** 2
    total = total + (h.sum() - math.sqrt(2.0)) ** 2
    return total


def analysis_matrix(f: torch.Tensor, n: int) -> torch.Tensor:
    """(n/2 x n) periodic matrix with W[p, (2p + m) mod n] += f[m]"""
    m = f.shape[-1]
    p = torch.arange(n // 2, device=f.device)
    taps = torch.arange(m, device=f.device)
    rows = p[:, None].expand(-1, m).reshape(-1)
    cols = ((2 * p[:, None] + taps[None, :]) % n).reshape(-1)
    values = f.repeat(n // 2)
    return f.new_zeros(n // 2, n).index_put((rows, cols), values, accumulate=True)


class WaveletFilter(nn.Module):
    """Learnable low-pass filter h_theta initialized to db3; the high-pass g follows by QMF"""

    def __init__(self, learnable: bool = True, shared: bool = True):
        super().__init__()
        h = torch.tensor(db3_coefficients(), dtype=torch.get_default_dtype())
        if learnable:
            self.h = nn.Parameter(h)
        else:
            self.register_buffer('h', h)
        self.shared = shared
        if shared:
            self.h_synthesis = None
        elif learnable:
            self.h_synthesis = nn.Parameter(h.clone())
        else:
            self.register_buffer('h_synthesis', h.clone())
        self.boundary = 'periodic'

    @property
    def g(self) -> torch.Tensor:
        return qmf_highpass(self.h)

    def synthesis_pair(self) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.h if self.h_synthesis is None else self.h_synthesis
        return h, qmf_highpass(h)

    def regularizer(self) -> torch.Tensor:
        total = wavelet_regularizer(self.h)
        if self.h_synthesis is not None:
            total = total + wavelet_regularizer(self.h_synthesis)
        return total

    def reset_db3(self):
        with torch.no_grad():
            db3 = torch.tensor(db3_coefficients(), dtype=self.h.dtype, device=self.h.device)
            self.h.copy_(db3)
            if self.h_synthesis is not None:
                self.h_synthesis.copy_(db3)


@dataclass
class WaveletPyramid:
    """Details d_1..d_J (finest first) and the final approximation a_J, time on the last axis"""
    details: List[torch.Tensor] = field(default_factory=list)
    approx: Optional[torch.Tensor] = None

    @property
    def J(self) -> int:
        return len(self.details)

    def lengths(self) -> List[int]:
        return [d.shape[-1] for d in self.details] + [self.approx.shape[-1]]


def dwt_step(a_j: torch.Tensor, filt: WaveletFilter) -> Tuple[torch.Tensor, torch.Tensor]:
    """a_{j+1}[p] = sum_n h[n - 2p] a_j[n], d_{j+1}[p] = sum_n g[n - 2p] a_j[n] (periodic)"""
    n = a_j.shape[-1]
    if n % 2:
        raise ShapeError(f"DWT step needs an even-length input, got {n}")
    a_next = a_j @ analysis_matrix(filt.h, n).T
    d_next = a_j @ analysis_matrix(filt.g, n).T
    return a_next, d_next


def idwt_step(a_next: torch.Tensor, d_next: torch.Tensor, filt: WaveletFilter) -> torch.Tensor:
    """a_j[p] = sum_n h[p - 2n] a_{j+1}[n] + sum_n g[p - 2n] d_{j+1}[n] (periodic)"""
    if a_next.shape != d_next.shape:
        raise ShapeError(f"Approximation {tuple(a_next.shape)} and detail {tuple(d_next.shape)} lengths differ")
    n = 2 * a_next.shape[-1]
    h, g = filt.synthesis_pair()
    return a_next @ analysis_matrix(h, n) + d_next @ analysis_matrix(g, n)


def dwt(seasonal: torch.Tensor, J: int, filt: WaveletFilter) -> WaveletPyramid:
    L = seasonal.shape[-1]
    if J < 0 or L % (2 ** J):
        raise ShapeError(f"Length {L} is not divisible by 2^{J}")
    pyramid = WaveletPyramid(approx=seasonal)
    a = seasonal
    for _ in range(J):
        a, d = dwt_step(a, filt)
        pyramid.details.append(d)
    pyramid.approx = a
    return pyramid


def idwt(pyramid: WaveletPyramid, filt: WaveletFilter) -> torch.Tensor:
    a = pyramid.approx
    for d in reversed(pyramid.details):
        a = idwt_step(a, d, filt)
    return a


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                         heads: int = 1) -> Tuple[torch.Tensor, torch.Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V over the token axis; returns (output, weights)"""
    b, tq, dk = q.shape
    tk = k.shape[1]
    dv = v.shape[-1]
    if dk % heads or dv % heads:
        raise ShapeError(f"Widths ({dk}, {dv}) are not divisible by {heads} heads")
    qh = q.reshape(b, tq, heads, dk // heads).transpose(1, 2)
    kh = k.reshape(b, tk, heads, dk // heads).transpose(1, 2)
    vh = v.reshape(b, tk, heads, dv // heads).transpose(1, 2)
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(dk // heads)
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(b, tq, dv)
    return out, weights


class FrequencyAttention(nn.Module):
    """Independent Q/K/V projections (and step-conditioning map) for each of the J + 1 levels"""

    def __init__(self, width: int, levels: int, dk: Optional[int] = None, heads: int = 1):
        super().__init__()
        self.width = width
        self.dk = dk or width
        self.heads = heads
        self.query = nn.ModuleList([nn.Linear(width, self.dk, bias=False) for _ in range(levels + 1)])
        self.key = nn.ModuleList([nn.Linear(width, self.dk, bias=False) for _ in range(levels + 1)])
        self.value = nn.ModuleList([nn.Linear(width, width, bias=False) for _ in range(levels + 1)])
        self.cond = nn.ModuleList([nn.Linear(width, width) for _ in range(levels + 1)])

    @property
    def levels(self) -> int:
        return len(self.query) - 1

    def attend(self, coeffs: torch.Tensor, level: int, cond: Optional[torch.Tensor] = None):
        """Self-attention over one level's (batch, length, width) coefficients"""
        if not 0 <= level <= self.levels:
            raise ShapeError(f"Level {level} outside [0, {self.levels}]")
        if coeffs.shape[-1] != self.width:
            raise ShapeError(f"Coefficient width {coeffs.shape[-1]} differs from attention width {self.width}")
        x = coeffs if cond is None else coeffs + self.cond[level](cond).unsqueeze(1)
        return scaled_dot_attention(self.query[level](x), self.key[level](x), self.value[level](x), self.heads)


def freq_attention(coeffs: List[torch.Tensor], params: FrequencyAttention,
                   cond: Optional[torch.Tensor] = None) -> List[torch.Tensor]:
    """Per-level attention; coeffs ordered d_1..d_J, a_J, each (batch, length, width)"""
    if len(coeffs) != params.levels + 1:
        raise ShapeError(f"Got {len(coeffs)} coefficient levels for {params.levels + 1} attention sets")
    return [params.attend(c, i, cond)[0] for i, c in enumerate(coeffs)]


def slblock_forward(seasonal: torch.Tensor, J: int, filt: WaveletFilter,
                    attn: FrequencyAttention, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """DWT -> per-level attention -> IDWT on a (batch, L, width) seasonal encoding"""
    pyramid = dwt(seasonal.transpose(1, 2), J, filt)
    levels = [c.transpose(1, 2) for c in pyramid.details + [pyramid.approx]]
    refined = [c.transpose(1, 2) for c in freq_attention(levels, attn, cond)]
    out = idwt(WaveletPyramid(details=refined[:-1], approx=refined[-1]), filt)
    return out.transpose(1, 2)


class SeasonalNet(nn.Module):
    def __init__(self, width: int, levels: int, dk: Optional[int] = None, heads: int = 1,
                 learnable: bool = True, shared: bool = True):
        super().__init__()
        self.levels = levels
        self.filter = WaveletFilter(learnable=learnable, shared=shared)
        self.attention = FrequencyAttention(width, levels, dk, heads)

    def forward(self, seasonal: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        return slblock_forward(seasonal, self.levels, self.filter, self.attention, cond)


def cascade(h: np.ndarray, iterations: int = 14) -> Dict[str, np.ndarray]:
    """Scaling and wavelet functions on a dyadic grid by the cascade algorithm"""
    h = np.asarray(h, dtype=np.float64)
    g = qmf_highpass(torch.as_tensor(h)).numpy()
    m = len(h)
    phi = np.array([1.0])
    for n in range(iterations):
        step = 2 ** n
        out = np.zeros(len(phi) + (m - 1) * step)
        for k in range(m):
            out[k * step:k * step + len(phi)] += math.sqrt(2.0) * h[k] * phi
        phi = out
    # psi(x) = sqrt(2) sum_k g_k phi(2x - k), one dyadic level finer than phi
    step = 2 ** iterations
    psi = np.zeros(len(phi) + (m - 1) * step)
    for k in range(m):
        psi[k * step:k * step + len(phi)] += math.sqrt(2.0) * g[k] * phi
    x_phi = np.arange(len(phi)) / 2 ** iterations
    x_psi = np.arange(len(psi)) / 2 ** (iterations + 1)
    return {'x_phi': x_phi, 'phi': phi, 'x_psi': x_psi, 'psi': psi}


def wavelet_function_table(h: np.ndarray, reference: Optional[np.ndarray] = None,
                           iterations: int = 14, points_per_unit: int = 64) -> np.ndarray:
    """Columns x, phi, psi (learned) and optionally phi_ref, psi_ref, on a common grid over [0, len(h) - 1]"""
    def sampled(filt):
        c = cascade(filt, iterations)
        span = len(filt) - 1
        x = np.arange(span * points_per_unit + 1) / points_per_unit
        phi_idx = np.round(x * 2 ** iterations).astype(int)
        psi_idx = np.round(x * 2 ** (iterations + 1)).astype(int)
        phi = c['phi'][np.clip(phi_idx, 0, len(c['phi']) - 1)]
        psi = c['psi'][np.clip(psi_idx, 0, len(c['psi']) - 1)]
        return x, phi, psi

    x, phi, psi = sampled(h)
    columns = [x, phi, psi]
    if reference is not None:
        _, phi_ref, psi_ref = sampled(reference)
        columns += [phi_ref, psi_ref]
    return np.column_stack(columns)
