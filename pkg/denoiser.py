"""
The seasonal-trend denoising network, its training objective and the optimization loop.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from config import RunConfig, ShapeError, TrainingDivergedError, DataError, resolve_wavelet_levels
from correction import Correction
from data_ingest import SeriesBatch
from diffusion import LatentState, NoiseSchedule, Step, forward_diffuse, _check_step
from lma import build_lma
from seasonal_block import SeasonalNet
from trend_block import StepEmbedder, TrendNet

logger = logging.getLogger(__name__)


class SeasonalTrendDenoiser(nn.Module):
    """LMA decomposition -> trend and seasonal blocks -> correction -> LMA restoration = x0_hat"""

    def __init__(self, cfg: RunConfig, n_channels: int, length: int):
        super().__init__()
        width = cfg.model.width
        self.n_channels = n_channels
        self.length = length
        self.parameterization = cfg.model.parameterization
        self.levels = resolve_wavelet_levels(cfg.wavelet.levels, length)
        self.wavelet_learnable = cfg.wavelet.learnable

        self.lma = build_lma(cfg, n_channels, length)
        self.trend_encoder = nn.Linear(n_channels, width)
        self.seasonal_encoder = nn.Linear(n_channels, width)
        self.step_embedder = StepEmbedder(width)
        self.trend_net = TrendNet(width, cfg.trend.layers, cfg.trend.hidden_mult, cfg.trend.activation)
        self.seasonal_net = SeasonalNet(width, self.levels, cfg.attention.dk, cfg.attention.heads,
                                        learnable=cfg.wavelet.learnable, shared=cfg.wavelet.shared)
        self.correction = Correction(width, n_channels, cfg.correction.dk, enabled=cfg.correction.enabled,
                                     residual=cfg.correction.residual)

    def forward(self, x_s: torch.Tensor, s: Step) -> torch.Tensor:
        if x_s.dim() != 3 or x_s.shape[1:] != (self.length, self.n_channels):
            raise ShapeError(f"Expected (batch, {self.length}, {self.n_channels}) input, got {tuple(x_s.shape)}")
        if not isinstance(s, torch.Tensor):
            s = torch.full((x_s.shape[0],), int(s), dtype=torch.long, device=x_s.device)
        parts = self.lma.decompose(x_s)
        cond = self.step_embedder(s)
        trend = self.trend_net(self.trend_encoder(parts.trend), cond)
        seasonal = self.seasonal_net(self.seasonal_encoder(parts.seasonal), cond)
        trend_cr, seasonal_cr = self.correction(trend, seasonal)
        return self.lma.restore(trend_cr, seasonal_cr)

    def regularizer(self) -> torch.Tensor:
        if not self.wavelet_learnable:
            return self.seasonal_net.filter.h.new_zeros(())
        return self.seasonal_net.filter.regularizer()

    def noise_predictor(self, schedule: NoiseSchedule) -> Callable[[torch.Tensor, int], torch.Tensor]:
        """Denoiser in noise-prediction form for the reverse sampler"""
        def predict(x: torch.Tensor, s: int) -> torch.Tensor:
            return eps_from_x0(self(x, s), x, s, schedule)
        return predict


def build_model(cfg: RunConfig, n_channels: int, length: int, seed: Optional[int] = None) -> SeasonalTrendDenoiser:
    if seed is not None:
        torch.manual_seed(seed)
    return SeasonalTrendDenoiser(cfg, n_channels, length)


def denoise_forward(x_s: LatentState, s: Step, model: SeasonalTrendDenoiser) -> torch.Tensor:
    return model(x_s.x, s)


def eps_from_x0(x0_hat: torch.Tensor, x_s: torch.Tensor, s: Step, schedule: NoiseSchedule) -> torch.Tensor:
    """eps_hat = (x_s - sqrt(alpha_bar_s) x0_hat) / sqrt(1 - alpha_bar_s)"""
    _check_step(s, schedule.S)
    a_bar = schedule.at(schedule.alpha_bar, s, x_s)
    return (x_s - a_bar.sqrt() * x0_hat) / (1.0 - a_bar).sqrt()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    denoising: torch.Tensor
    regularizer: torch.Tensor


def training_loss(model: SeasonalTrendDenoiser, x0: torch.Tensor, schedule: NoiseSchedule,
                  generator: torch.Generator, reg_weight: float = 0.1) -> LossBreakdown:
    """Denoising MSE (on x0 or on the implied noise) plus the weighted wavelet regularizer"""
    if x0.shape[0] == 0:
        raise DataError("Cannot compute a loss on an empty batch")
    s = torch.randint(1, schedule.S + 1, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    state = forward_diffuse(x0, s, eps, schedule)
    x0_hat = denoise_forward(state, s, model)
    if model.parameterization == 'predict_eps':
        denoising = F.mse_loss(eps_from_x0(x0_hat, state.x, s, schedule), eps)
    else:
        denoising = F.mse_loss(x0_hat, x0)
    reg = model.regularizer()
    return LossBreakdown(total=denoising + reg_weight * reg, denoising=denoising, regularizer=reg)


@dataclass
class TrainState:
    seed: int
    step: int = 0
    epoch: int = 0
    denoising_loss: List[float] = field(default_factory=list)
    regularizer_loss: List[float] = field(default_factory=list)
    optimizer_state: Optional[Dict] = None

    def loss_curve(self) -> np.ndarray:
        """Columns: epoch, denoising loss, regularizer"""
        epochs = np.arange(1, len(self.denoising_loss) + 1)
        return np.column_stack([epochs, self.denoising_loss, self.regularizer_loss])


class Trainer:
    """Single-writer optimization loop with callbacks for progress and checkpoints"""

    def __init__(self, cfg: RunConfig, schedule: NoiseSchedule):
        self.cfg = cfg
        self.schedule = schedule
        self.callbacks = []

    def add_callback(self, callback):
        """Add callback(event_type, data) for epoch and checkpoint events"""
        self.callbacks.append(callback)

    def _notify_callbacks(self, event_type: str, data: Dict):
        for callback in self.callbacks:
            try:
                callback(event_type, data)
            except Exception as e:
                logger.error(f"Callback error: {e}")

    def train(self, dataset: SeriesBatch, epochs: int, seed: int,
              model: Optional[SeasonalTrendDenoiser] = None):
        windows = np.asarray(dataset.windows)
        if windows.ndim != 3 or windows.shape[0] == 0:
            raise DataError("Training needs a nonempty (N, L, K) window set")
        n, L, K = windows.shape
        if model is None:
            model = build_model(self.cfg, K, L, seed)
        dtype = next(model.parameters()).dtype
        data = torch.as_tensor(windows, dtype=dtype)

        state = TrainState(seed=seed)
        if epochs == 0:
            return model, state

        tc = self.cfg.train
        generator = torch.Generator().manual_seed(seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=tc.lr)
        batches_per_epoch = math.ceil(n / tc.batch_size)
        scheduler = None
        if tc.cosine_decay:
            scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs * batches_per_epoch)

        model.train()
        for epoch in range(1, epochs + 1):
            order = torch.randperm(n, generator=generator)
            den_sum, reg_sum = 0.0, 0.0
            for start in range(0, n, tc.batch_size):
                batch = data[order[start:start + tc.batch_size]]
                loss = training_loss(model, batch, self.schedule, generator, self.cfg.wavelet.reg_weight)
                if not torch.isfinite(loss.total):
                    logger.error(f"Non-finite loss at epoch {epoch}, step {state.step}: "
                                 f"denoising={loss.denoising.item()}, regularizer={loss.regularizer.item()}")
                    raise TrainingDivergedError(f"Training diverged at epoch {epoch} (step {state.step})")
                optimizer.zero_grad()
                loss.total.backward()
                optimizer.step()
                if scheduler is not None:
                    scheduler.step()
                state.step += 1
                den_sum += loss.denoising.item() * batch.shape[0]
                reg_sum += loss.regularizer.item() * batch.shape[0]

            state.epoch = epoch
            state.denoising_loss.append(den_sum / n)
            state.regularizer_loss.append(reg_sum / n)
            if epoch == 1 or epoch % max(1, epochs // 10) == 0 or epoch == epochs:
                logger.info(f"Epoch {epoch}/{epochs}: denoising={state.denoising_loss[-1]:.6f} "
                            f"regularizer={state.regularizer_loss[-1]:.3e}")
            self._notify_callbacks('epoch_complete', {'epoch': epoch, 'state': state, 'model': model})
            if tc.checkpoint_every and epoch % tc.checkpoint_every == 0 and epoch != epochs:
                self._notify_callbacks('checkpoint', {'epoch': epoch, 'state': state, 'model': model})

        state.optimizer_state = optimizer.state_dict()
        model.eval()
        return model, state


def train(dataset: SeriesBatch, cfg: RunConfig, schedule: NoiseSchedule, epochs: int, seed: int,
          model: Optional[SeasonalTrendDenoiser] = None):
    return Trainer(cfg, schedule).train(dataset, epochs, seed, model)
