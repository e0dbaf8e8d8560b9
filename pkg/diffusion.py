"""
Noise schedule, closed-form forward noising and the ancestral reverse sampler.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import torch

from config import ScheduleError, ShapeError

logger = logging.getLogger(__name__)

Step = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta, alpha, alpha_bar and sigma; index s-1 holds step s"""
    S: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor
    kind: str = 'linear'

    def at(self, values: torch.Tensor, s: Step, like: torch.Tensor) -> torch.Tensor:
        """Gather a schedule vector at step(s) s, shaped to broadcast against `like`"""
        if isinstance(s, torch.Tensor):
            picked = values[s.long().to(values.device) - 1]
            return picked.to(device=like.device, dtype=like.dtype).reshape(-1, *([1] * (like.dim() - 1)))
        return values[s - 1].to(device=like.device, dtype=like.dtype)


@dataclass
class LatentState:
    x: torch.Tensor
    step: Step


def _check_step(s: Step, S: int):
    if isinstance(s, torch.Tensor):
        if s.numel() and (int(s.min()) < 1 or int(s.max()) > S):
            raise ScheduleError(f"Steps must lie in [1, {S}], got range [{int(s.min())}, {int(s.max())}]")
    elif not 1 <= s <= S:
        raise ScheduleError(f"Step {s} outside [1, {S}]")


def build_schedule(S: int = 500, kind: str = 'linear', beta_start: float = 1e-4,
                   beta_end: float = 0.02, sigma_mode: str = 'posterior') -> NoiseSchedule:
    """Linear or cosine beta schedule with posterior (or beta) reverse-step variances"""
    if S < 1:
        raise ScheduleError(f"Number of steps must be positive, got {S}")

    if kind == 'linear':
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ScheduleError(f"Need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
        beta = torch.linspace(beta_start, beta_end, S, dtype=torch.float64)
    elif kind == 'cosine':
        offset = 0.008
        t = torch.arange(S + 1, dtype=torch.float64) / S
        f = torch.cos((t + offset) / (1 + offset) * math.pi / 2) ** 2
        bar = f / f[0]
        beta = (1.0 - bar[1:] / bar[:-1]).clamp(1e-8, 0.999)
    else:
        raise ScheduleError(f"Unknown schedule kind '{kind}'")

    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])

    if sigma_mode == 'posterior':
        sigma2 = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    elif sigma_mode == 'beta':
        sigma2 = beta.clone()
    else:
        raise ScheduleError(f"Unknown sigma mode '{sigma_mode}'")

    return NoiseSchedule(S=S, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         sigma=sigma2.clamp_min(0.0).sqrt(), kind=kind)


def schedule_from_config(cfg) -> NoiseSchedule:
    d = cfg.diffusion
    return build_schedule(d.steps, d.schedule, d.beta_start, d.beta_end, d.sigma_mode)


def forward_diffuse(x0: torch.Tensor, s: Step, eps: torch.Tensor, schedule: NoiseSchedule) -> LatentState:
    """x_s = sqrt(alpha_bar_s) x0 + sqrt(1 - alpha_bar_s) eps"""
    if eps.shape != x0.shape:
        raise ShapeError(f"Noise shape {tuple(eps.shape)} differs from data shape {tuple(x0.shape)}")
    _check_step(s, schedule.S)
    a_bar = schedule.at(schedule.alpha_bar, s, x0)
    x = a_bar.sqrt() * x0 + (1.0 - a_bar).sqrt() * eps
    return LatentState(x=x, step=s)


def reverse_step(state: LatentState, eps_hat: torch.Tensor, z, schedule: NoiseSchedule) -> LatentState:
    """x_{s-1} = (x_s - beta_s / sqrt(1 - alpha_bar_s) eps_hat) / sqrt(alpha_s) + sigma_s z"""
    s = state.step
    if isinstance(s, torch.Tensor):
        raise ScheduleError("Reverse steps run on a single shared step")
    if s < 1:
        raise ScheduleError("Cannot step below s = 0")
    _check_step(s, schedule.S)
    if eps_hat.shape != state.x.shape:
        raise ShapeError(f"Predicted noise shape {tuple(eps_hat.shape)} differs from latent shape {tuple(state.x.shape)}")

    x = state.x
    beta = schedule.at(schedule.beta, s, x)
    alpha = schedule.at(schedule.alpha, s, x)
    a_bar = schedule.at(schedule.alpha_bar, s, x)
    mean = (x - beta / (1.0 - a_bar).sqrt() * eps_hat) / alpha.sqrt()

    if z is None:
        return LatentState(x=mean, step=s - 1)
    if z.shape != x.shape:
        raise ShapeError(f"Noise shape {tuple(z.shape)} differs from latent shape {tuple(x.shape)}")
    if s == 1 and bool(torch.any(z != 0)):
        raise ScheduleError("The final reverse step (s = 1) takes z = 0")
    return LatentState(x=mean + schedule.at(schedule.sigma, s, x) * z, step=s - 1)


Denoiser = Callable[[torch.Tensor, int], torch.Tensor]


@torch.no_grad()
def sample(denoiser: Denoiser, n: int, schedule: NoiseSchedule, seed: int,
           shape: Tuple[int, int], dtype: torch.dtype = torch.float32,
           device: Union[str, torch.device] = 'cpu') -> torch.Tensor:
    """Run the full reverse chain from x_S ~ N(0, I); deterministic given seed"""
    L, K = shape
    if n == 0:
        return torch.empty(0, L, K, dtype=dtype, device=device)

    generator = torch.Generator(device='cpu').manual_seed(seed)
    x = torch.randn(n, L, K, generator=generator, dtype=dtype).to(device)
    state = LatentState(x=x, step=schedule.S)

    for s in range(schedule.S, 0, -1):
        eps_hat = denoiser(state.x, s)
        if eps_hat.shape != state.x.shape:
            raise ShapeError(f"Denoiser returned shape {tuple(eps_hat.shape)} for input {tuple(state.x.shape)}")
        z = torch.randn(n, L, K, generator=generator, dtype=dtype).to(device) if s > 1 else None
        state = reverse_step(state, eps_hat, z, schedule)

    logger.info(f"Sampled {n} windows through {schedule.S} reverse steps")
    return state.x
