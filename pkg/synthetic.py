"""
Synthetic corpora for smoke runs: trended sinusoid series (CSV-exportable) and independent-sine windows.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from config import DataError
from data_ingest import RawSeries

logger = logging.getLogger(__name__)


def make_sine_corpus(n_windows: int = 2000, L: int = 24, K: int = 3, seed: int = 0,
                     noise: float = 0.1) -> RawSeries:
    """Mixed sinusoids with linear trends and Gaussian noise, long enough for n_windows stride-1 windows"""
    if n_windows < 1 or L < 1 or K < 1:
        raise DataError(f"Need positive n_windows, L and K (got {n_windows}, {L}, {K})")
    rng = np.random.default_rng(seed)
    T = n_windows + L - 1
    t = np.arange(T, dtype=np.float64)

    values = np.empty((T, K))
    for k in range(K):
        periods = rng.uniform(6.0, 48.0, size=2)
        phases = rng.uniform(0.0, 2 * np.pi, size=2)
        amplitudes = rng.uniform(0.5, 2.0, size=2)
        seasonal = sum(a * np.sin(2 * np.pi * t / p + ph) for a, p, ph in zip(amplitudes, periods, phases))
        trend = rng.uniform(-3.0, 3.0) * t / T + rng.uniform(-1.0, 1.0)
        values[:, k] = trend + seasonal + noise * rng.standard_normal(T)

    return RawSeries(values=values, feature_names=[f'feature_{k}' for k in range(K)], interval='1h')


def write_csv(series: RawSeries, path: Union[str, Path], start: str = '2020-01-01') -> Path:
    """Persist with a leading date column so the regular ingestion path applies"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(series.values, columns=series.feature_names)
    frame.insert(0, 'date', pd.date_range(start, periods=series.length, freq=series.interval or '1h'))
    frame.to_csv(path, index=False)
    logger.info(f"Wrote synthetic corpus {path}: {series.length} timestamps x {series.n_features} features")
    return path


def make_sines_windows(n: int, L: int = 24, K: int = 3, seed: int = 0) -> np.ndarray:
    """n x L x K windows of sin(f t + phase) per window and channel, rescaled to [0, 1]"""
    rng = np.random.default_rng(seed)
    freq = rng.uniform(0.0, 0.1, size=(n, 1, K))
    phase = rng.uniform(0.0, 0.1, size=(n, 1, K))
    t = np.arange(L, dtype=np.float64)[None, :, None]
    return (np.sin(freq * t + phase) + 1.0) * 0.5


def make_ramp_windows(n: int, L: int = 24, K: int = 3, seed: int = 0) -> np.ndarray:
    """Linear ramps with random slope and offset, clipped to [0, 1]"""
    rng = np.random.default_rng(seed)
    slope = rng.uniform(-1.0, 1.0, size=(n, 1, K)) / L
    offset = rng.uniform(0.2, 0.8, size=(n, 1, K))
    t = np.arange(L, dtype=np.float64)[None, :, None]
    return np.clip(offset + slope * t, 0.0, 1.0)
