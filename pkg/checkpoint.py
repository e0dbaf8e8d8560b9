"""
On-disk artifacts: model checkpoints (manifest.json + params.bin) and sample sets (manifest.json + samples.bin).
Both binaries are little-endian float32, concatenated in manifest order.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from config import CheckpointError, RunConfig, build_run_config, ConfigError

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.json'
PARAMS = 'params.bin'
SAMPLES = 'samples.bin'
FLOAT_LE = '<f4'


def _write_manifest(directory: Path, manifest: Dict[str, Any]):
    with open(directory / MANIFEST, 'w') as f:
        json.dump(manifest, f, indent=2)


def _read_manifest(directory: Path) -> Dict[str, Any]:
    path = directory / MANIFEST
    if not path.exists():
        raise CheckpointError(f"No {MANIFEST} in {directory}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Corrupt manifest {path}: {e}") from e


def save_checkpoint(directory: Union[str, Path], model: torch.nn.Module, cfg: RunConfig,
                    scale_min: Optional[np.ndarray] = None, scale_max: Optional[np.ndarray] = None,
                    feature_names: Optional[List[str]] = None, epoch: int = 0) -> Path:
    """Write named flat parameter arrays plus a JSON manifest"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().numpy().astype(FLOAT_LE)
        entries.append({'name': name, 'shape': list(array.shape)})
        chunks.append(array.reshape(-1))
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=FLOAT_LE)
    flat.astype(FLOAT_LE).tofile(directory / PARAMS)

    manifest = {
        'format': 'stdiff-checkpoint/1',
        'created': datetime.now().isoformat(),
        'epoch': epoch,
        'n_channels': getattr(model, 'n_channels', None),
        'length': getattr(model, 'length', None),
        'params': entries,
        'dtype': 'float32-le',
        'config_hash': cfg.digest(),
        'config': cfg.resolved(),
        'scale_min': None if scale_min is None else np.asarray(scale_min, dtype=float).tolist(),
        'scale_max': None if scale_max is None else np.asarray(scale_max, dtype=float).tolist(),
        'feature_names': list(feature_names or []),
    }
    _write_manifest(directory, manifest)
    logger.info(f"Wrote checkpoint ({flat.size} values, {len(entries)} arrays) to {directory}")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Tuple[torch.nn.Module, RunConfig, Dict[str, Any]]:
    """Rebuild the model from the manifest's config and fill it from params.bin"""
    from denoiser import build_model

    directory = Path(directory)
    manifest = _read_manifest(directory)
    try:
        cfg = build_run_config(manifest['config'])
        n_channels, length = int(manifest['n_channels']), int(manifest['length'])
        entries = manifest['params']
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"Incomplete checkpoint manifest in {directory}: {e}") from e
    if cfg.digest() != manifest.get('config_hash'):
        raise CheckpointError(f"Config hash mismatch in {directory}")

    params_path = directory / PARAMS
    if not params_path.exists():
        raise CheckpointError(f"No {PARAMS} in {directory}")
    flat = np.fromfile(params_path, dtype=FLOAT_LE)
    expected = sum(int(np.prod(e['shape'])) for e in entries)
    if flat.size != expected:
        raise CheckpointError(f"{PARAMS} holds {flat.size} values, manifest describes {expected}")

    model = build_model(cfg, n_channels, length)
    own = model.state_dict()
    loaded = {}
    offset = 0
    for entry in entries:
        name, shape = entry['name'], tuple(entry['shape'])
        size = int(np.prod(shape))
        if name not in own or tuple(own[name].shape) != shape:
            raise CheckpointError(f"Parameter '{name}' {shape} does not fit the configured model")
        loaded[name] = torch.from_numpy(flat[offset:offset + size].reshape(shape).astype(np.float64)).to(own[name].dtype)
        offset += size
    missing = set(own) - set(loaded)
    if missing:
        raise CheckpointError(f"Checkpoint lacks parameters: {sorted(missing)}")
    model.load_state_dict(loaded)
    model.eval()
    logger.info(f"Loaded checkpoint from {directory} (epoch {manifest.get('epoch')})")
    return model, cfg, manifest


def write_samples(directory: Union[str, Path], samples: np.ndarray, feature_names: List[str],
                  scale_min: Optional[np.ndarray], scale_max: Optional[np.ndarray],
                  config_hash: str = "", seed: Optional[int] = None, scaled: bool = False) -> Path:
    """Row-major n x L x K float32 samples plus manifest"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = np.asarray(samples)
    if samples.ndim != 3:
        raise CheckpointError(f"Samples must be (n, L, K), got shape {samples.shape}")
    np.ascontiguousarray(samples, dtype=FLOAT_LE).tofile(directory / SAMPLES)
    _write_manifest(directory, {
        'format': 'stdiff-samples/1',
        'shape': list(samples.shape),
        'dtype': 'float32-le',
        'feature_names': list(feature_names),
        'scale_min': None if scale_min is None else np.asarray(scale_min, dtype=float).tolist(),
        'scale_max': None if scale_max is None else np.asarray(scale_max, dtype=float).tolist(),
        'scaled': scaled,
        'config_hash': config_hash,
        'seed': seed,
    })
    logger.info(f"Wrote {samples.shape[0]} samples to {directory}")
    return directory


def read_samples(directory: Union[str, Path]) -> Tuple[np.ndarray, Dict[str, Any]]:
    directory = Path(directory)
    manifest = _read_manifest(directory)
    try:
        shape = tuple(int(v) for v in manifest['shape'])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Sample manifest in {directory} lacks a shape: {e}") from e
    path = directory / SAMPLES
    if not path.exists():
        raise CheckpointError(f"No {SAMPLES} in {directory}")
    flat = np.fromfile(path, dtype=FLOAT_LE)
    if flat.size != int(np.prod(shape)):
        raise CheckpointError(f"{SAMPLES} holds {flat.size} values, manifest shape is {shape}")
    return flat.reshape(shape).astype(np.float64), manifest
