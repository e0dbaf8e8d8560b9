import json

import numpy as np
import pytest

import cli
from checkpoint import read_samples, write_samples
from cli import main
from config import load_run_config
from data_ingest import load_csv, make_windows, unscale
from metrics import MetricEntry

TOY_TOML = """
seed = 0

[data]
window = 12

[diffusion]
steps = 10

[model]
width = 4

[train]
epochs = 1
batch_size = 16

[metrics]
trials = 2
iterations = 10
encoder_steps = 5

[plot]
perplexity = 10
max_points = 100
"""


@pytest.fixture
def workspace(tmp_path):
    config = tmp_path / 'toy.toml'
    config.write_text(TOY_TOML)
    corpus = tmp_path / 'sines.csv'
    assert main(['synth', '--out', str(corpus), '--n', '80', '--length', '12', '--features', '2']) == 0
    return tmp_path, config, corpus


def train_into(workspace, name):
    tmp_path, config, corpus = workspace
    out = tmp_path / name
    assert main(['train', '--config', str(config), '--data', str(corpus), '--out', str(out)]) == 0
    return out


def test_train_missing_dataset(tmp_path):
    config = tmp_path / 'toy.toml'
    config.write_text(TOY_TOML)
    assert main(['train', '--config', str(config), '--out', str(tmp_path / 'run')]) == 2
    assert main(['train', '--config', str(config), '--data', str(tmp_path / 'none.csv')]) == 2


def test_unknown_config_key(tmp_path):
    config = tmp_path / 'bad.toml'
    config.write_text('[lma]\nkernel_count = 3\n')
    assert main(['train', '--config', str(config)]) == 2


def test_unknown_command():
    assert main(['fly']) == 2


def test_train_artifacts_and_determinism(workspace):
    first = train_into(workspace, 'run1')
    second = train_into(workspace, 'run2')
    for name in ('manifest.json', 'params.bin', 'loss_curve.txt', 'resolved_config.json'):
        assert (first / name).exists()
    assert (first / 'loss_curve.txt').read_text() == (second / 'loss_curve.txt').read_text()
    resolved = json.loads((first / 'resolved_config.json').read_text())
    assert resolved['config']['data']['window'] == 12
    assert resolved['config']['output_dir'] == str(first)


def test_sample_command(workspace):
    run = train_into(workspace, 'run')
    tmp_path = workspace[0]
    assert main(['sample', '--checkpoint', str(run), '--n', '0', '--out', str(tmp_path / 'empty')]) == 0
    empty, manifest = read_samples(tmp_path / 'empty')
    assert empty.shape == (0, 12, 2)
    assert manifest['shape'] == [0, 12, 2]

    for name in ('s1', 's2'):
        assert main(['sample', '--checkpoint', str(run), '--n', '5', '--seed', '3', '--out', str(tmp_path / name)]) == 0
    assert (tmp_path / 's1' / 'samples.bin').read_bytes() == (tmp_path / 's2' / 'samples.bin').read_bytes()
    _, manifest = read_samples(tmp_path / 's1')
    assert manifest['feature_names'] == ['feature_0', 'feature_1']
    assert manifest['scaled'] is False


def test_sample_corrupt_checkpoint(tmp_path):
    (tmp_path / 'ckpt').mkdir()
    (tmp_path / 'ckpt' / 'manifest.json').write_text('{}')
    assert main(['sample', '--checkpoint', str(tmp_path / 'ckpt'), '--n', '1']) == 1


def reexport_real(workspace, name='real_samples'):
    tmp_path, config, corpus = workspace
    cfg = load_run_config(config)
    batch = make_windows(load_csv(corpus), cfg.data.window)
    write_samples(tmp_path / name, unscale(batch), batch.feature_names, batch.scale_min, batch.scale_max)
    return tmp_path / name


def test_evaluate_reexported_real(workspace):
    tmp_path, config, corpus = workspace
    samples = reexport_real(workspace)
    out = tmp_path / 'evaluation'
    assert main(['evaluate', '--config', str(config), '--data', str(corpus), '--samples', str(samples),
                 '--out', str(out)]) == 0
    report = json.loads((out / 'report.json').read_text())
    assert set(report['metrics']) == {'discriminative', 'predictive', 'context_fid', 'correlation'}
    assert report['metrics']['correlation']['mean'] < 1e-4
    assert report['metrics']['context_fid']['mean'] < 1e-3
    assert report['metrics']['discriminative']['trials'] == 2
    assert (out / 'report.txt').exists()


def test_evaluate_incompatible_features(workspace):
    tmp_path, config, corpus = workspace
    write_samples(tmp_path / 'wide', np.zeros((40, 12, 3)), ['a', 'b', 'c'], None, None, scaled=True)
    assert main(['evaluate', '--config', str(config), '--data', str(corpus), '--samples',
                 str(tmp_path / 'wide'), '--out', str(tmp_path / 'ev')]) == 2


def test_decompose_fresh_model(workspace):
    tmp_path, config, corpus = workspace
    out = tmp_path / 'decomposition'
    assert main(['decompose', '--config', str(config), '--data', str(corpus), '--out', str(out)]) == 0
    summary = json.loads((out / 'decomposition.json').read_text())
    assert summary['reconstruction_max_error'] < 1e-6
    assert np.allclose(np.sum(summary['kernel_weights'], axis=1), 1.0)
    table = np.loadtxt(out / 'wavelet.txt')
    assert np.allclose(table[:, 1], table[:, 3], atol=1e-3)
    components = np.load(out / 'components.npz')
    assert components['trend'].shape == (80, 12, 2)


def test_decompose_separate_filters(workspace):
    tmp_path, config, corpus = workspace
    config.write_text(TOY_TOML + '\n[wavelet]\nshared = false\n')
    out = tmp_path / 'decomposition'
    assert main(['decompose', '--config', str(config), '--data', str(corpus), '--out', str(out)]) == 0
    summary = json.loads((out / 'decomposition.json').read_text())
    assert summary['filter_l2_distance'] == 0.0
    assert (out / 'wavelet_synthesis.txt').exists()


def test_plot_identical_corpora(workspace):
    tmp_path, config, corpus = workspace
    samples = reexport_real(workspace)
    out = tmp_path / 'plots'
    assert main(['plot', '--config', str(config), '--data', str(corpus), '--samples', str(samples),
                 '--out', str(out)]) == 0
    summary = json.loads((out / 'plot_summary.json').read_text())
    assert summary['density_max_gap'] < 0.05
    assert np.loadtxt(out / 'pca.txt').shape[1] == 3


@pytest.mark.slow
def test_ablate_writes_report(workspace):
    tmp_path, config, corpus = workspace
    out = tmp_path / 'ablation'
    code = main(['ablate', '--config', str(config), '--data', str(corpus), '--out', str(out), '--n', '40'])
    assert code in (0, 1)
    results = json.loads((out / 'ablation.json').read_text())
    assert list(results) == ['full', 'no_lma', 'frozen_wavelet', 'no_correction']
    assert 'difference_to_full' in results['no_lma']


def stub_ablation(monkeypatch, scores):
    """Skip training and sampling; each variant gets a fixed discriminative score in variant order"""
    pending = list(scores)
    monkeypatch.setattr(cli, '_train_model', lambda cfg, dataset: (None, None, None))
    monkeypatch.setattr(cli, '_draw', lambda model, schedule, n, seed: np.zeros((n, 12, 2)))
    monkeypatch.setattr(cli, 'discriminative_score',
                        lambda *args, **kwargs: MetricEntry(mean=pending.pop(0), ci95=0.0, trials=1))


@pytest.mark.parametrize('scores, expected', [
    ([0.5, 0.5, 0.5, 0.5], 0),
    ([0.3, 0.4, 0.2, 0.1], 0),
    ([0.3, 0.2, 0.2, 0.1], 1),
    ([0.3, 0.2, 0.3, 0.1], 0),
])
def test_ablate_exit_code(workspace, monkeypatch, scores, expected):
    tmp_path, config, corpus = workspace
    stub_ablation(monkeypatch, scores)
    out = tmp_path / 'ablation'
    assert main(['ablate', '--config', str(config), '--data', str(corpus), '--out', str(out)]) == expected
    results = json.loads((out / 'ablation.json').read_text())
    assert results['no_lma']['difference_to_full'] == pytest.approx(scores[1] - scores[0])


SMOKE_TOML = """
seed = 0

[data]
window = 24

[diffusion]
steps = 500

[model]
width = 32

[train]
epochs = {epochs}
batch_size = 64

[metrics]
trials = 2
iterations = 500
"""


@pytest.mark.slow
def test_smoke_run_beats_untrained_model(tmp_path):
    corpus = tmp_path / 'sines.csv'
    assert main(['synth', '--out', str(corpus), '--n', '2000', '--length', '24', '--features', '3']) == 0
    reports = {}
    for name, epochs in (('untrained', 0), ('trained', 50)):
        config = tmp_path / f'{name}.toml'
        config.write_text(SMOKE_TOML.format(epochs=epochs))
        run = tmp_path / name
        assert main(['train', '--config', str(config), '--data', str(corpus), '--out', str(run / 'model')]) == 0
        assert main(['sample', '--checkpoint', str(run / 'model'), '--n', '2000', '--seed', '0',
                     '--out', str(run / 'samples')]) == 0
        assert main(['evaluate', '--config', str(config), '--data', str(corpus), '--samples', str(run / 'samples'),
                     '--out', str(run / 'evaluation')]) == 0
        reports[name] = json.loads((run / 'evaluation' / 'report.json').read_text())['metrics']
    trained, untrained = reports['trained'], reports['untrained']
    assert trained['discriminative']['mean'] < 0.2
    assert trained['context_fid']['mean'] < untrained['context_fid']['mean']

    plots = tmp_path / 'plots'
    assert main(['plot', '--config', str(tmp_path / 'trained.toml'), '--data', str(corpus),
                 '--samples', str(tmp_path / 'trained' / 'samples'), '--out', str(plots)]) == 0
    assert json.loads((plots / 'plot_summary.json').read_text())['density_max_gap'] < 0.15
