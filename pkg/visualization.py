"""
Figure data for real-vs-synthetic comparisons: PCA and t-SNE projections of per-window feature means,
kernel density curves of pooled values, written as text tables and rendered PNGs.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
from scipy import linalg
from scipy.stats import gaussian_kde
from sklearn.manifold import TSNE

from config import DataError, PlotConfig, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class Projection:
    real: np.ndarray
    synth: np.ndarray
    method: str


@dataclass
class DensityCurves:
    grid: np.ndarray
    real: np.ndarray
    synth: np.ndarray

    def max_gap(self) -> float:
        """Largest pointwise difference after scaling both curves by their common peak"""
        peak = max(self.real.max(), self.synth.max())
        if peak <= 0:
            return 0.0
        return float(np.abs(self.real - self.synth).max() / peak)


def window_profiles(windows: np.ndarray) -> np.ndarray:
    """Average over features: one length-L vector per window"""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise DataError(f"Need a nonempty (n, L, K) window set, got shape {windows.shape}")
    return windows.mean(axis=2)


def _limit(data: np.ndarray, max_points: int, rng: np.random.Generator) -> np.ndarray:
    if len(data) <= max_points:
        return data
    return data[np.sort(rng.choice(len(data), size=max_points, replace=False))]


def pca_projection(real: np.ndarray, synth: np.ndarray, n_components: int = 2) -> Projection:
    """Principal axes from the real profiles' covariance eigendecomposition, applied to both sets"""
    real_p, synth_p = window_profiles(real), window_profiles(synth)
    if real_p.shape[1] != synth_p.shape[1]:
        raise ShapeError(f"Window lengths differ: {real_p.shape[1]} vs {synth_p.shape[1]}")
    if len(real_p) < n_components or real_p.shape[1] < n_components:
        raise DataError(f"PCA needs at least {n_components} points and dimensions, got {real_p.shape}")
    mean = real_p.mean(axis=0)
    cov = np.atleast_2d(np.cov(real_p - mean, rowvar=False))
    values, vectors = linalg.eigh(cov)
    axes = vectors[:, np.argsort(values)[::-1][:n_components]]
    # Sign convention: largest-magnitude loading positive
    signs = np.sign(axes[np.abs(axes).argmax(axis=0), np.arange(n_components)])
    axes = axes * np.where(signs == 0, 1.0, signs)
    return Projection(real=(real_p - mean) @ axes, synth=(synth_p - mean) @ axes, method='pca')


def tsne_embedding(real: np.ndarray, synth: np.ndarray, perplexity: float = 30.0,
                   seed: int = 0) -> Projection:
    """Joint 2-D t-SNE of both profile sets; perplexity is capped below the point count"""
    real_p, synth_p = window_profiles(real), window_profiles(synth)
    joint = np.concatenate([real_p, synth_p])
    if len(joint) < 3:
        raise DataError(f"t-SNE needs at least 3 points, got {len(joint)}")
    effective = min(perplexity, (len(joint) - 1) / 3.0)
    if effective < perplexity:
        logger.warning(f"Perplexity {perplexity} too large for {len(joint)} points, using {effective:.1f}")
    tsne = TSNE(n_components=2, perplexity=effective, init='pca', random_state=seed)
    embedded = tsne.fit_transform(joint)
    return Projection(real=embedded[:len(real_p)], synth=embedded[len(real_p):], method='tsne')


def density_curves(real: np.ndarray, synth: np.ndarray, points: int = 200) -> DensityCurves:
    """Gaussian kernel densities of all pooled values, on a grid spanning both corpora"""
    real_v = np.asarray(real, dtype=np.float64).ravel()
    synth_v = np.asarray(synth, dtype=np.float64).ravel()
    if real_v.size < 2 or synth_v.size < 2:
        raise DataError("Density estimation needs at least 2 values per corpus")
    low, high = min(real_v.min(), synth_v.min()), max(real_v.max(), synth_v.max())
    pad = 0.1 * (high - low or 1.0)
    grid = np.linspace(low - pad, high + pad, points)
    try:
        return DensityCurves(grid=grid, real=gaussian_kde(real_v)(grid), synth=gaussian_kde(synth_v)(grid))
    except np.linalg.LinAlgError as e:
        raise DataError(f"Degenerate values for density estimation: {e}") from e


def _save_projection(projection: Projection, out: Path):
    table = np.column_stack([
        np.concatenate([projection.real, projection.synth]),
        np.concatenate([np.ones(len(projection.real)), np.zeros(len(projection.synth))]),
    ])
    np.savetxt(out / f'{projection.method}.txt', table, fmt='%.6f',
               header=f'{projection.method}_1 {projection.method}_2 is_real')

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(projection.real[:, 0], projection.real[:, 1], c='red', alpha=0.2, label='Original')
    ax.scatter(projection.synth[:, 0], projection.synth[:, 1], c='blue', alpha=0.2, label='Synthetic')
    ax.set_title(f'{projection.method.upper()} plot')
    ax.legend()
    fig.savefig(out / f'{projection.method}.png', dpi=120, bbox_inches='tight')
    plt.close(fig)


def _save_density(curves: DensityCurves, out: Path):
    np.savetxt(out / 'density.txt', np.column_stack([curves.grid, curves.real, curves.synth]),
               fmt='%.6f', header='value density_real density_synth')
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(curves.grid, curves.real, color='red', label='Original')
    ax.plot(curves.grid, curves.synth, color='blue', linestyle='--', label='Synthetic')
    ax.set_xlabel('value')
    ax.set_ylabel('density')
    ax.legend()
    fig.savefig(out / 'density.png', dpi=120, bbox_inches='tight')
    plt.close(fig)


def plot_comparison(real: np.ndarray, synth: np.ndarray, out: Union[str, Path],
                    cfg: Optional[PlotConfig] = None, seed: int = 0) -> Dict[str, float]:
    """PCA, t-SNE and density outputs for one real/synthetic pair; returns summary numbers"""
    cfg = cfg or PlotConfig()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    real_s = _limit(np.asarray(real), cfg.max_points, rng)
    synth_s = _limit(np.asarray(synth), cfg.max_points, rng)

    _save_projection(pca_projection(real_s, synth_s), out)
    _save_projection(tsne_embedding(real_s, synth_s, cfg.perplexity, seed), out)
    curves = density_curves(real_s, synth_s, cfg.density_points)
    _save_density(curves, out)

    gap = curves.max_gap()
    logger.info(f"Wrote PCA, t-SNE and density figures to {out} (max density gap {gap:.4f})")
    return {'density_max_gap': gap, 'n_real': len(real_s), 'n_synth': len(synth_s)}


def plot_wavelet_table(table: np.ndarray, path: Union[str, Path]):
    """Scaling and wavelet functions of the learned filter, with db3 reference curves if present"""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, col, name in ((axes[0], 1, 'scaling function'), (axes[1], 2, 'wavelet function')):
        ax.plot(table[:, 0], table[:, col], label='learned')
        if table.shape[1] >= 5:
            ax.plot(table[:, 0], table[:, col + 2], linestyle='--', label='db3')
        ax.set_title(name)
        ax.legend()
    fig.savefig(path, dpi=120, bbox_inches='tight')
    plt.close(fig)
