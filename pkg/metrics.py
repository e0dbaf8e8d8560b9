"""
Generation-quality metrics: discriminative score, predictive (train-on-synthetic, test-on-real)
score, Context-FID and the cross-correlation score, each repeated over trials with 95% intervals.
"""

import hashlib
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg
from sklearn.metrics import accuracy_score, mean_absolute_error
from torch import nn

from config import Config, MetricError, RunConfig, ShapeError

logger = logging.getLogger(__name__)

MIN_DISCRIMINATIVE_WINDOWS = 32
MIN_ENCODER_WINDOWS = 64
METRIC_NAMES = ['discriminative', 'predictive', 'context_fid', 'correlation']


@dataclass
class MetricEntry:
    mean: float
    ci95: float
    trials: int
    scores: List[float] = field(default_factory=list)


@dataclass
class EvaluationReport:
    metrics: Dict[str, MetricEntry] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'metrics': {name: asdict(entry) for name, entry in self.metrics.items()},
            'config': self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self, title: str = "Model") -> str:
        """Aligned text table: one row per metric, mean ± ci95"""
        rows = [(name, f"{entry.mean:.3f} ± {entry.ci95:.3f}", str(entry.trials))
                for name, entry in self.metrics.items()]
        header = ("Metric", title, "Trials")
        widths = [max(len(r[i]) for r in rows + [header]) for i in range(3)]
        line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
        out = [line, "-" * len(line)]
        out += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
        return "\n".join(out)


def summarize(scores: List[float], name: str = "") -> MetricEntry:
    """Mean and normal-approximation 95% half-width over trials"""
    scores = [float(s) for s in scores]
    n = len(scores)
    if n == 0:
        raise MetricError(f"No trial results for {name or 'metric'}")
    if n == 1:
        logger.warning(f"Single trial for {name or 'metric'}: confidence interval reported as 0")
        return MetricEntry(mean=scores[0], ci95=0.0, trials=1, scores=scores)
    half_width = Config.CI_Z * float(np.std(scores, ddof=1)) / math.sqrt(n)
    return MetricEntry(mean=float(np.mean(scores)), ci95=half_width, trials=n, scores=scores)


def _check_pair(real: np.ndarray, synth: np.ndarray):
    if real.ndim != 3 or synth.ndim != 3 or real.shape[1:] != synth.shape[1:]:
        raise ShapeError(f"Real {real.shape} and synthetic {synth.shape} windows differ in shape")


class RecurrentEvaluator(nn.Module):
    """Single-layer GRU with a linear head, as a sequence classifier or a per-step predictor"""

    def __init__(self, n_inputs: int, hidden: int, n_outputs: int = 1, per_step: bool = False):
        super().__init__()
        self.per_step = per_step
        self.gru = nn.GRU(n_inputs, hidden, num_layers=1, batch_first=True)
        self.head = nn.Linear(hidden, n_outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outputs, last = self.gru(x)
        if self.per_step:
            return self.head(outputs)
        return self.head(last[-1])


def _minibatch(data: torch.Tensor, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    idx = torch.randperm(data.shape[0], generator=generator)[:batch_size]
    return data[idx]


def _discriminative_trial(real: np.ndarray, synth: np.ndarray, seed: int, iterations: int,
                          batch_size: int) -> float:
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    dtype = torch.get_default_dtype()

    def split(data):
        idx = rng.permutation(len(data))
        cut = int(0.8 * len(data))
        return torch.as_tensor(data[idx[:cut]], dtype=dtype), torch.as_tensor(data[idx[cut:]], dtype=dtype)

    real_train, real_test = split(real)
    synth_train, synth_test = split(synth)
    K = real.shape[-1]
    model = RecurrentEvaluator(K, hidden=K, n_outputs=1)
    optimizer = torch.optim.Adam(model.parameters())

    for _ in range(iterations):
        x_real = _minibatch(real_train, batch_size, generator)
        x_synth = _minibatch(synth_train, batch_size, generator)
        logits = model(torch.cat([x_real, x_synth])).squeeze(-1)
        labels = torch.cat([torch.ones(len(x_real)), torch.zeros(len(x_synth))]).to(logits.dtype)
        loss = F.binary_cross_entropy_with_logits(logits, labels)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    with torch.no_grad():
        logits = model(torch.cat([real_test, synth_test])).squeeze(-1)
    predicted = (torch.sigmoid(logits) > 0.5).numpy().astype(int)
    labels = np.concatenate([np.ones(len(real_test)), np.zeros(len(synth_test))]).astype(int)
    return abs(accuracy_score(labels, predicted) - 0.5)


def discriminative_score(real: np.ndarray, synth: np.ndarray, trials: int = 5, iterations: int = 2000,
                         batch_size: int = 128, seed: int = 0) -> MetricEntry:
    """|accuracy - 0.5| of a post-hoc GRU classifier separating real from synthetic windows"""
    real, synth = np.asarray(real), np.asarray(synth)
    _check_pair(real, synth)
    if min(len(real), len(synth)) < MIN_DISCRIMINATIVE_WINDOWS:
        raise MetricError(f"Discriminative score needs at least {MIN_DISCRIMINATIVE_WINDOWS} windows per set")
    scores = []
    for trial in range(trials):
        score = _discriminative_trial(real, synth, seed + trial, iterations, batch_size)
        logger.info(f"Discriminative trial {trial + 1}/{trials}: {score:.4f}")
        scores.append(score)
    return summarize(scores, 'discriminative')


def _predictive_split(data: np.ndarray):
    """Inputs t = 1..L-1 of the first K-1 features, targets t = 2..L of the last feature"""
    K = data.shape[-1]
    if K >= 2:
        return data[:, :-1, :K - 1], data[:, 1:, K - 1:]
    return data[:, :-1, :], data[:, 1:, :]


def _predictive_trial(real: np.ndarray, synth: np.ndarray, seed: int, iterations: int,
                      batch_size: int) -> float:
    generator = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    dtype = torch.get_default_dtype()
    x_train, y_train = (torch.as_tensor(a, dtype=dtype) for a in _predictive_split(synth))
    x_test, y_test = _predictive_split(real)

    n_inputs = x_train.shape[-1]
    model = RecurrentEvaluator(n_inputs, hidden=max(real.shape[-1] - 1, 1), n_outputs=1, per_step=True)
    optimizer = torch.optim.Adam(model.parameters())

    for _ in range(iterations):
        idx = torch.randperm(x_train.shape[0], generator=generator)[:batch_size]
        pred = torch.sigmoid(model(x_train[idx]))
        loss = F.l1_loss(pred, y_train[idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    with torch.no_grad():
        pred = torch.sigmoid(model(torch.as_tensor(x_test, dtype=dtype))).numpy()
    return float(np.mean([mean_absolute_error(y_test[i], pred[i]) for i in range(len(y_test))]))


def predictive_score(real: np.ndarray, synth: np.ndarray, trials: int = 5, iterations: int = 2000,
                     batch_size: int = 128, seed: int = 0) -> MetricEntry:
    """MAE on real windows of a one-step-ahead GRU predictor trained on synthetic windows"""
    real, synth = np.asarray(real), np.asarray(synth)
    _check_pair(real, synth)
    if real.shape[1] < 2:
        raise MetricError("Predictive score needs windows of length >= 2")
    if real.shape[-1] < 2:
        logger.warning("Single-feature corpus: predictive score autoregresses that feature")
    scores = []
    for trial in range(trials):
        score = _predictive_trial(real, synth, seed + trial, iterations, batch_size)
        logger.info(f"Predictive trial {trial + 1}/{trials}: {score:.4f}")
        scores.append(score)
    return summarize(scores, 'predictive')


class ContextEncoder(nn.Module):
    """Dilated convolutional sequence encoder, mean-pooled to a fixed-width embedding"""

    def __init__(self, n_channels: int, width: int = 32):
        super().__init__()
        self.n_channels = n_channels
        self.width = width
        self.convs = nn.Sequential(
            nn.Conv1d(n_channels, width, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv1d(width, width, kernel_size=3, padding=2, dilation=2),
            nn.GELU(),
            nn.Conv1d(width, width, kernel_size=3, padding=4, dilation=4),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.convs(x.transpose(1, 2)).mean(dim=-1)

    @torch.no_grad()
    def embed(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        windows = np.asarray(windows)
        if windows.ndim != 3 or windows.shape[-1] != self.n_channels:
            raise ShapeError(f"Encoder expects (n, L, {self.n_channels}) windows, got {windows.shape}")
        self.eval()
        dtype = next(self.parameters()).dtype
        chunks = [self(torch.as_tensor(windows[i:i + batch_size], dtype=dtype)).numpy()
                  for i in range(0, len(windows), batch_size)]
        if not chunks:
            return np.zeros((0, self.width))
        return np.concatenate(chunks).astype(np.float64)


def _random_crops(batch: torch.Tensor, generator: torch.Generator):
    """Two overlapping crops per window (each at least half the window long)"""
    L = batch.shape[1]
    min_len = max(2, L // 2)
    crop_len = int(torch.randint(min_len, L + 1, (1,), generator=generator))
    left = int(torch.randint(0, L - crop_len + 1, (1,), generator=generator))
    shift = int(torch.randint(-(crop_len // 2), crop_len // 2 + 1, (1,), generator=generator))
    right = min(max(left + shift, 0), L - crop_len)
    return batch[:, left:left + crop_len], batch[:, right:right + crop_len]


_encoder_cache: "OrderedDict[str, ContextEncoder]" = OrderedDict()


def clear_encoder_cache():
    _encoder_cache.clear()


def corpus_digest(windows: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(windows, dtype=np.float32).tobytes()).hexdigest()


def train_context_encoder(real: np.ndarray, width: int = 32, steps: int = 300, seed: int = 0,
                          batch_size: int = 64, temperature: float = 0.1,
                          cache_dir: Optional[str] = None) -> ContextEncoder:
    """Contrastive encoder: overlapping crops of one window are positives, other windows negatives"""
    real = np.asarray(real)
    if real.ndim != 3:
        raise ShapeError(f"Expected (n, L, K) windows, got {real.shape}")
    if len(real) < MIN_ENCODER_WINDOWS:
        raise MetricError(f"Context encoder needs at least {MIN_ENCODER_WINDOWS} windows, got {len(real)}")

    key = f"{corpus_digest(real)}-{width}-{steps}-{seed}"
    if key in _encoder_cache:
        _encoder_cache.move_to_end(key)
        return _encoder_cache[key]

    torch.manual_seed(seed)
    encoder = ContextEncoder(real.shape[-1], width)
    cache_path = Path(cache_dir) / f"encoder-{key[:16]}.pt" if cache_dir else None
    if cache_path is not None and cache_path.exists():
        encoder.load_state_dict(torch.load(cache_path))
        logger.info(f"Loaded cached context encoder {cache_path}")
    else:
        generator = torch.Generator().manual_seed(seed)
        data = torch.as_tensor(real, dtype=next(encoder.parameters()).dtype)
        optimizer = torch.optim.Adam(encoder.parameters(), lr=1e-3)
        encoder.train()
        for step in range(steps):
            batch = _minibatch(data, batch_size, generator)
            first, second = _random_crops(batch, generator)
            z1 = F.normalize(encoder(first), dim=-1)
            z2 = F.normalize(encoder(second), dim=-1)
            logits = z1 @ z2.T / temperature
            targets = torch.arange(len(batch))
            loss = 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if step == 0 or (step + 1) % max(1, steps // 5) == 0:
                logger.info(f"Context encoder step {step + 1}/{steps}: contrastive loss {loss.item():.4f}")
        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(encoder.state_dict(), cache_path)
    encoder.eval()
    _encoder_cache[key] = encoder
    while len(_encoder_cache) > max(Config.ENCODER_CACHE_SIZE, 1):
        _encoder_cache.popitem(last=False)
    return encoder


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to zero"""
    values, vectors = linalg.eigh((matrix + matrix.T) / 2)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)"""
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    sigma1, sigma2 = np.atleast_2d(sigma1).astype(float), np.atleast_2d(sigma2).astype(float)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ShapeError(f"Embedding widths differ: {mu1.shape} vs {mu2.shape}")
    root1 = _sqrtm_psd(sigma1)
    cross = _sqrtm_psd(root1 @ sigma2 @ root1)
    fid = float(np.sum((mu1 - mu2) ** 2) + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(cross))
    return max(fid, 0.0)


def fid_from_embeddings(emb_real: np.ndarray, emb_synth: np.ndarray) -> float:
    emb_real, emb_synth = np.atleast_2d(emb_real), np.atleast_2d(emb_synth)
    if emb_real.shape[-1] != emb_synth.shape[-1]:
        raise ShapeError(f"Embedding widths differ: {emb_real.shape[-1]} vs {emb_synth.shape[-1]}")
    if len(emb_real) < 2 or len(emb_synth) < 2:
        raise MetricError("Context-FID needs at least 2 windows per set")
    return frechet_distance(emb_real.mean(axis=0), np.cov(emb_real, rowvar=False),
                            emb_synth.mean(axis=0), np.cov(emb_synth, rowvar=False))


def context_fid(real: np.ndarray, synth: np.ndarray, encoder: ContextEncoder) -> float:
    """Frechet distance between Gaussian fits of encoder embeddings"""
    real, synth = np.asarray(real), np.asarray(synth)
    if real.shape[-1] != synth.shape[-1]:
        raise ShapeError(f"Real and synthetic windows have {real.shape[-1]} and {synth.shape[-1]} features")
    return fid_from_embeddings(encoder.embed(real), encoder.embed(synth))


def feature_correlation(windows: np.ndarray) -> np.ndarray:
    """K x K feature correlations per window, averaged over windows; zero-variance entries are 0"""
    windows = np.asarray(windows, dtype=np.float64)
    centered = windows - windows.mean(axis=1, keepdims=True)
    std = np.sqrt((centered ** 2).mean(axis=1))
    flat = std <= 1e-12
    if flat.any():
        logger.warning(f"Zero-variance features in {int(flat.any(axis=1).sum())} windows: correlations set to 0")
    safe = np.where(flat, 1.0, std)
    normalized = centered / safe[:, None, :]
    corr = np.einsum('nti,ntj->nij', normalized, normalized) / windows.shape[1]
    corr = np.where(flat[:, :, None] | flat[:, None, :], 0.0, corr)
    return corr.mean(axis=0)


def correlation_score(real: np.ndarray, synth: np.ndarray) -> float:
    """(1/K^2) sum_ij |corr_real - corr_synth|"""
    real, synth = np.asarray(real), np.asarray(synth)
    if real.shape[-1] != synth.shape[-1] or real.shape[-1] < 1:
        raise ShapeError(f"Real and synthetic windows have {real.shape[-1]} and {synth.shape[-1]} features")
    return float(np.abs(feature_correlation(real) - feature_correlation(synth)).mean())


def _subsample(data: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction >= 1.0:
        return data
    size = max(2, int(round(fraction * len(data))))
    return data[np.sort(rng.choice(len(data), size=size, replace=False))]


def evaluate_all(real: np.ndarray, synth: np.ndarray, cfg: RunConfig,
                 encoder: Optional[ContextEncoder] = None, seed: Optional[int] = None) -> EvaluationReport:
    """All four metrics over the configured trial count"""
    real, synth = np.asarray(real, dtype=np.float64), np.asarray(synth, dtype=np.float64)
    _check_pair(real, synth)
    mc = cfg.metrics
    seed = cfg.seed if seed is None else seed
    trials = mc.trials

    report = EvaluationReport(config={
        'trials': trials, 'seed': seed, 'iterations': mc.iterations, 'subsample': mc.subsample,
        'n_real': len(real), 'n_synth': len(synth), 'shape': list(real.shape[1:]),
        'config_hash': cfg.digest(),
    })
    report.metrics['discriminative'] = discriminative_score(real, synth, trials, mc.iterations,
                                                            mc.eval_batch_size, seed)
    report.metrics['predictive'] = predictive_score(real, synth, trials, mc.iterations,
                                                    mc.eval_batch_size, seed)

    if mc.embedding_file:
        with np.load(mc.embedding_file) as external:
            emb_real, emb_synth = external['real'], external['synth']
        logger.info(f"Using external embeddings from {mc.embedding_file}")
    else:
        if encoder is None:
            encoder = train_context_encoder(real, mc.encoder_width, mc.encoder_steps, seed,
                                            cache_dir=mc.encoder_cache)
        emb_real, emb_synth = encoder.embed(real), encoder.embed(synth)

    fid_scores, corr_scores = [], []
    for trial in range(trials):
        rng = np.random.default_rng(seed + trial)
        fid_scores.append(fid_from_embeddings(_subsample(emb_real, mc.subsample, rng),
                                              _subsample(emb_synth, mc.subsample, rng)))
        corr_scores.append(correlation_score(_subsample(real, mc.subsample, rng),
                                             _subsample(synth, mc.subsample, rng)))
    report.metrics['context_fid'] = summarize(fid_scores, 'context_fid')
    report.metrics['correlation'] = summarize(corr_scores, 'correlation')

    for name, entry in report.metrics.items():
        logger.info(f"{name}: {entry.mean:.4f} ± {entry.ci95:.4f} over {entry.trials} trials")
    return report
