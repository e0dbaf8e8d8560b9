#!/usr/bin/env python3
"""
Command-line surface: train, sample, evaluate, decompose, plot, synth and ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import ValidationError

from checkpoint import load_checkpoint, read_samples, save_checkpoint, write_samples
from config import (Config, ConfigError, RunConfig, STDiffError, ablation_variants,
                    build_run_config, load_run_config)
from data_ingest import SeriesBatch, load_csv, make_windows, scale
from denoiser import Trainer, build_model
from diffusion import sample, schedule_from_config
from metrics import discriminative_score, evaluate_all
from seasonal_block import db3_coefficients, wavelet_function_table
from synthetic import make_sine_corpus, write_csv
from visualization import plot_comparison, plot_wavelet_table

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = 'resolved_config.json'
LOSS_CURVE = 'loss_curve.txt'


class UsageError(STDiffError):
    """Missing or inconsistent command-line inputs"""


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, 'config', None) else build_run_config({})
    overrides: Dict[str, Any] = {}
    if getattr(args, 'seed', None) is not None:
        overrides['seed'] = args.seed
    if getattr(args, 'trials', None) is not None:
        overrides['metrics.trials'] = args.trials
    if getattr(args, 'data', None):
        overrides['data.path'] = args.data
    if getattr(args, 'out', None):
        overrides['output_dir'] = args.out
    return cfg.with_overrides(overrides) if overrides else cfg


def _out_dir(args: argparse.Namespace, cfg: RunConfig, name: str) -> Path:
    out = Path(args.out) if getattr(args, 'out', None) else Path(cfg.output_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cfg: RunConfig):
    with open(out / RESOLVED_CONFIG, 'w') as f:
        json.dump({'config_hash': cfg.digest(), 'config': cfg.resolved()}, f, indent=2)


def _load_dataset(cfg: RunConfig) -> SeriesBatch:
    if not cfg.data.path:
        raise UsageError("No dataset path: set data.path in the config or pass --data")
    path = Path(cfg.data.path)
    if not path.exists():
        raise UsageError(f"Dataset not found: {path}")
    series = load_csv(path, cfg.data.feature_columns)
    return make_windows(series, cfg.data.window, cfg.data.stride, source_id=str(path))


def _train_model(cfg: RunConfig, dataset: SeriesBatch, out: Optional[Path] = None):
    schedule = schedule_from_config(cfg)
    trainer = Trainer(cfg, schedule)
    if out is not None:
        def on_checkpoint(event_type: str, data: Dict):
            if event_type == 'checkpoint':
                save_checkpoint(out / f"epoch_{data['epoch']:04d}", data['model'], cfg,
                                dataset.scale_min, dataset.scale_max, dataset.feature_names, data['epoch'])
        trainer.add_callback(on_checkpoint)
    model, state = trainer.train(dataset, cfg.train.epochs, cfg.seed)
    return model, state, schedule


def _draw(model, schedule, n: int, seed: int) -> np.ndarray:
    model.to(Config.DEVICE)
    dtype = next(model.parameters()).dtype
    samples = sample(model.noise_predictor(schedule), n, schedule, seed,
                     shape=(model.length, model.n_channels), dtype=dtype, device=Config.DEVICE)
    return samples.cpu().numpy().astype(np.float64)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(cfg)
    out = _out_dir(args, cfg, 'train')
    _write_resolved(out, cfg)

    model, state, _ = _train_model(cfg, dataset, out)
    save_checkpoint(out, model, cfg, dataset.scale_min, dataset.scale_max, dataset.feature_names, state.epoch)
    np.savetxt(out / LOSS_CURVE, state.loss_curve(), fmt='%.10e', header='epoch denoising regularizer')
    print(f"✅ Checkpoint written to {out}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    if not args.checkpoint:
        raise UsageError("sample needs --checkpoint")
    model, cfg, manifest = load_checkpoint(args.checkpoint)
    if args.seed is not None:
        cfg = cfg.with_overrides({'seed': args.seed})
    if args.n < 0:
        raise UsageError(f"--n must be nonnegative, got {args.n}")
    out = _out_dir(args, cfg, 'samples')
    _write_resolved(out, cfg)

    schedule = schedule_from_config(cfg)
    scaled = _draw(model, schedule, args.n, cfg.seed)
    scale_min, scale_max = manifest.get('scale_min'), manifest.get('scale_max')
    if scale_min is not None and scale_max is not None:
        scale_min, scale_max = np.asarray(scale_min), np.asarray(scale_max)
        samples, is_scaled = scaled * (scale_max - scale_min) + scale_min, False
    else:
        logger.warning("Checkpoint carries no scaling metadata: samples stay in the scaled domain")
        samples, is_scaled = scaled, True
    write_samples(out, samples, manifest.get('feature_names', []), scale_min, scale_max,
                  config_hash=manifest.get('config_hash', ''), seed=cfg.seed, scaled=is_scaled)
    print(f"✅ {args.n} samples written to {out}")
    return 0


def _real_and_samples(args: argparse.Namespace, cfg: RunConfig) -> Tuple[SeriesBatch, np.ndarray]:
    """Real windows and the sample artifact, both in the real corpus' scaled domain"""
    if not args.samples:
        raise UsageError("--samples is required")
    dataset = _load_dataset(cfg)
    samples, manifest = read_samples(args.samples)
    if samples.shape[-1] != dataset.windows.shape[-1]:
        raise UsageError(f"Samples have {samples.shape[-1]} features, the real corpus has {dataset.windows.shape[-1]}")
    if samples.shape[1] != dataset.windows.shape[1]:
        raise UsageError(f"Sample length {samples.shape[1]} differs from window length {dataset.windows.shape[1]}")
    if not manifest.get('scaled', False):
        samples = scale(samples, dataset.scale_min, dataset.scale_max)
    return dataset, samples


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    dataset, samples = _real_and_samples(args, cfg)
    out = _out_dir(args, cfg, 'evaluation')
    _write_resolved(out, cfg)

    report = evaluate_all(dataset.windows, samples, cfg)
    with open(out / 'report.json', 'w') as f:
        f.write(report.to_json())
    table = report.to_table()
    (out / 'report.txt').write_text(table + "\n")
    print(table)
    return 0


def cmd_decompose(args: argparse.Namespace) -> int:
    if args.checkpoint:
        model, cfg, _ = load_checkpoint(args.checkpoint)
        if args.data:
            cfg = cfg.with_overrides({'data.path': args.data})
    else:
        cfg = _load_config(args)
        model = None
    dataset = _load_dataset(cfg)
    n, L, K = dataset.windows.shape
    if model is None:
        model = build_model(cfg, K, L, cfg.seed)
    if (model.length, model.n_channels) != (L, K):
        raise UsageError(f"Model expects ({model.length}, {model.n_channels}) windows, dataset has ({L}, {K})")
    out = _out_dir(args, cfg, 'decomposition')
    _write_resolved(out, cfg)

    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        x = torch.as_tensor(dataset.windows, dtype=dtype)
        parts = model.lma.decompose(x)
        restored = model.lma.restore(parts.trend, parts.seasonal)
    reconstruction_error = float((restored - x).abs().max()) if n else 0.0

    np.savez(out / 'components.npz', trend=parts.trend.numpy(), seasonal=parts.seasonal.numpy(),
             raw_trend=parts.raw_trend.numpy(), starts=dataset.starts)
    kernel_weights = parts.weights.mean(dim=(0, 1)).numpy()
    kernel_sizes = model.lma.bank.kernel_sizes
    np.savetxt(out / 'kernel_weights.txt', kernel_weights, fmt='%.6f',
               header=' '.join(f'kernel_{k}' for k in kernel_sizes))

    wavelet = model.seasonal_net.filter
    h = wavelet.h.detach().cpu().numpy().astype(np.float64)
    reference = np.array(db3_coefficients())
    table = wavelet_function_table(h, reference)
    np.savetxt(out / 'wavelet.txt', table, fmt='%.6f', header='x phi psi phi_db3 psi_db3')
    plot_wavelet_table(table, out / 'wavelet.png')

    summary = {
        'windows': n,
        'kernel_sizes': kernel_sizes,
        'kernel_weights': kernel_weights.tolist(),
        'gamma': model.lma.affine.gamma.detach().tolist(),
        'beta': model.lma.affine.beta.detach().tolist(),
        'analysis_filter': h.tolist(),
        'reconstruction_max_error': reconstruction_error,
    }
    if wavelet.h_synthesis is not None:
        h_syn = wavelet.h_synthesis.detach().cpu().numpy().astype(np.float64)
        summary['synthesis_filter'] = h_syn.tolist()
        summary['filter_l2_distance'] = float(np.linalg.norm(h - h_syn))
        syn_table = wavelet_function_table(h_syn, reference)
        np.savetxt(out / 'wavelet_synthesis.txt', syn_table, fmt='%.6f', header='x phi psi phi_db3 psi_db3')
    with open(out / 'decomposition.json', 'w') as f:
        json.dump(summary, f, indent=2)
    logger.info(f"Decomposed {n} windows, max restoration error {reconstruction_error:.2e}")
    print(f"✅ Decomposition written to {out}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    dataset, samples = _real_and_samples(args, cfg)
    if len(samples) == 0:
        raise UsageError("Sample artifact is empty")
    out = _out_dir(args, cfg, 'plots')
    _write_resolved(out, cfg)
    summary = plot_comparison(dataset.windows, samples, out, cfg.plot, cfg.seed)
    with open(out / 'plot_summary.json', 'w') as f:
        json.dump(summary, f, indent=2)
    print(f"✅ Figures written to {out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    if not args.out:
        raise UsageError("synth needs --out pointing to a CSV file")
    series = make_sine_corpus(args.n, args.length, args.features, args.seed or 0)
    write_csv(series, args.out)
    print(f"✅ Synthetic corpus written to {args.out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(cfg)
    out = _out_dir(args, cfg, 'ablation')
    _write_resolved(out, cfg)
    n_samples = args.n or len(dataset.windows)
    mc = cfg.metrics

    results = {}
    for name, variant in ablation_variants(cfg).items():
        logger.info(f"Ablation variant '{name}'")
        model, _, schedule = _train_model(variant, dataset)
        synth = _draw(model, schedule, n_samples, variant.seed)
        entry = discriminative_score(dataset.windows, synth, mc.trials, mc.iterations, mc.eval_batch_size, cfg.seed)
        results[name] = {'mean': entry.mean, 'ci95': entry.ci95, 'trials': entry.trials, 'scores': entry.scores}

    full = results['full']['mean']
    for name, result in results.items():
        if name == 'full':
            continue
        result['difference_to_full'] = result['mean'] - full
        logger.info(f"{name}: discriminative {result['mean']:.4f} ({result['difference_to_full']:+.4f} vs full)")
        if result['mean'] < full:
            logger.warning(f"Ablation '{name}' scored better than the full model")
    worse_than_all = all(r['mean'] < full for name, r in results.items() if name != 'full')

    with open(out / 'ablation.json', 'w') as f:
        json.dump(results, f, indent=2)
    width = max(len(name) for name in results)
    lines = [f"{'Variant'.ljust(width)}  Discriminative"]
    lines += [f"{name.ljust(width)}  {r['mean']:.3f} ± {r['ci95']:.3f}" for name, r in results.items()]
    table = "\n".join(lines)
    (out / 'ablation.txt').write_text(table + "\n")
    print(table)

    if worse_than_all:
        logger.error("Full model scored worst against every ablation")
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='stdiff', description="Seasonal-trend diffusion for time-series generation")
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, trials=False, data=True):
        p.add_argument('--config', help="TOML run configuration")
        p.add_argument('--seed', type=int)
        p.add_argument('--out', help="Artifact directory")
        if data:
            p.add_argument('--data', help="Dataset CSV (overrides data.path)")
        if trials:
            p.add_argument('--trials', type=int)
        return p

    common(sub.add_parser('train', help="Train a model")).set_defaults(func=cmd_train)

    p = sub.add_parser('sample', help="Draw samples from a checkpoint")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--n', type=int, default=100)
    p.add_argument('--seed', type=int)
    p.add_argument('--out')
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser('evaluate', help="Score samples against the real corpus"), trials=True)
    p.add_argument('--samples', required=True)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser('decompose', help="Dump LMA components and the learned wavelet"))
    p.add_argument('--checkpoint', help="Trained checkpoint (default: freshly initialized model)")
    p.set_defaults(func=cmd_decompose)

    p = common(sub.add_parser('plot', help="PCA, t-SNE and density figures"))
    p.add_argument('--samples', required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser('synth', help="Write a synthetic CSV corpus")
    p.add_argument('--out', required=True)
    p.add_argument('--n', type=int, default=2000, help="Number of stride-1 windows")
    p.add_argument('--length', type=int, default=24)
    p.add_argument('--features', type=int, default=3)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser('ablate', help="Discriminative scores of single-module ablations"), trials=True)
    p.add_argument('--n', type=int, help="Samples per variant (default: number of real windows)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, Config.LOG_LEVEL, logging.INFO),
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')
    torch.set_num_threads(Config.NUM_THREADS)

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return args.func(args)
    except (ConfigError, ValidationError, UsageError) as e:
        logger.error(f"❌ {e}")
        return 2
    except STDiffError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return 1
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return 1


if __name__ == '__main__':
    sys.exit(main())
