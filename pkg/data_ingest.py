"""
Tabular time-series ingestion: CSV loading, min-max scaled windows and the inverse scaling.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from config import DataError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawSeries:
    """A cleaned multivariate series, timestamps x features"""
    values: np.ndarray
    feature_names: List[str]
    interval: str = ""
    dropped_rows: int = 0

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SeriesBatch:
    """Scaled windows (N x L x K) and the per-feature scaling that produced them"""
    windows: np.ndarray
    scale_min: Optional[np.ndarray]
    scale_max: Optional[np.ndarray]
    source_id: str = ""
    feature_names: List[str] = field(default_factory=list)
    starts: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.windows.shape


def load_csv(path: Union[str, Path], feature_columns: Optional[List[str]] = None,
             interval: str = "") -> RawSeries:
    """Load numeric columns of a headed CSV; rows with missing or non-numeric entries are dropped"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Dataset file not found: {path}")

    try:
        frame = pd.read_csv(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"No numeric columns in {path}: {e}") from e
    if frame.shape[1] == 0:
        raise DataError(f"No numeric columns in {path}")

    # A leading non-numeric column is the date/index column
    timestamps = None
    first = frame.columns[0]
    if not pd.api.types.is_numeric_dtype(frame[first]):
        coerced = pd.to_numeric(frame[first], errors='coerce')
        if coerced.isna().mean() > 0.5:
            parsed = pd.to_datetime(frame[first], errors='coerce')
            if parsed.notna().mean() > 0.5:
                timestamps = parsed
            frame = frame.drop(columns=[first])
    if frame.shape[1] == 0:
        raise DataError(f"No numeric columns in {path}")

    if feature_columns is not None:
        missing = [c for c in feature_columns if c not in frame.columns]
        if missing:
            raise DataError(f"Requested columns absent from {path}: {missing}")
        frame = frame[list(feature_columns)]

    numeric = frame.apply(pd.to_numeric, errors='coerce')
    # A feature needs a majority of parseable entries
    parseable = numeric.notna().mean(axis=0) > 0.5
    if not parseable.all():
        logger.warning(f"Ignoring mostly non-numeric columns {list(numeric.columns[~parseable])} in {path.name}")
    numeric = numeric.loc[:, parseable]
    if numeric.shape[1] == 0:
        raise DataError(f"No numeric columns in {path}")

    before = len(numeric)
    complete = numeric.notna().all(axis=1)
    if timestamps is not None:
        complete &= timestamps.notna()
    numeric = numeric[complete]
    dropped = before - len(numeric)
    if dropped:
        logger.warning(f"Dropped {dropped} of {before} rows with missing or non-numeric values from {path.name}")
    if len(numeric) == 0:
        raise DataError(f"No complete rows left in {path}")

    if timestamps is not None:
        kept = timestamps[complete]
        if not (kept.is_monotonic_increasing and kept.is_unique):
            raise DataError(f"Timestamps in {path} are not strictly increasing")

    logger.info(f"Loaded {path.name}: {len(numeric)} timestamps x {numeric.shape[1]} features")
    return RawSeries(
        values=numeric.to_numpy(dtype=np.float64),
        feature_names=[str(c) for c in numeric.columns],
        interval=interval,
        dropped_rows=dropped
    )


def fit_scaling(values: np.ndarray):
    """Per-feature min/max over the whole series; constant features get max = min + 1"""
    scale_min = values.min(axis=0).astype(np.float64)
    scale_max = values.max(axis=0).astype(np.float64)
    degenerate = ~(scale_max > scale_min)
    if degenerate.any():
        logger.warning(f"Constant features at indices {np.flatnonzero(degenerate).tolist()}: widening scale range by 1")
        scale_max = np.where(degenerate, scale_min + 1.0, scale_max)
    return scale_min, scale_max


def scale(values: np.ndarray, scale_min: np.ndarray, scale_max: np.ndarray) -> np.ndarray:
    return (values - scale_min) / (scale_max - scale_min)


def make_windows(series: RawSeries, L: int = 24, stride: int = 1, source_id: str = "") -> SeriesBatch:
    """Cut floor((T - L)/stride) + 1 contiguous windows from the min-max scaled series"""
    if L < 1 or stride < 1:
        raise DataError(f"Window length and stride must be positive (L={L}, stride={stride})")
    total = series.length
    if total < L:
        raise DataError(f"Series of length {total} is shorter than window length {L}")

    scale_min, scale_max = fit_scaling(series.values)
    scaled = scale(series.values, scale_min, scale_max)

    n_windows = (total - L) // stride + 1
    starts = np.arange(n_windows) * stride
    index = starts[:, None] + np.arange(L)[None, :]
    windows = scaled[index]

    logger.info(f"Prepared {n_windows} windows of length {L} (stride {stride}) from {total} timestamps")
    return SeriesBatch(
        windows=windows,
        scale_min=scale_min,
        scale_max=scale_max,
        source_id=source_id,
        feature_names=list(series.feature_names),
        starts=starts
    )


def unscale(batch: SeriesBatch) -> np.ndarray:
    """x_raw = x_scaled * (max - min) + min per feature"""
    if batch.scale_min is None or batch.scale_max is None:
        raise DataError("Batch carries no scaling metadata")
    scale_min = np.asarray(batch.scale_min, dtype=np.float64)
    scale_max = np.asarray(batch.scale_max, dtype=np.float64)
    windows = np.asarray(batch.windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[-1] != scale_min.shape[0]:
        raise ShapeError(f"Windows of shape {windows.shape} do not match {scale_min.shape[0]} scaled features")
    return windows * (scale_max - scale_min) + scale_min
