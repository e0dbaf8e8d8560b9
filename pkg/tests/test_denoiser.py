import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call

from config import DataError, ShapeError, TrainingDivergedError
from data_ingest import SeriesBatch
from denoiser import Trainer, build_model, denoise_forward, eps_from_x0, train, training_loss
from diffusion import LatentState, build_schedule, forward_diffuse, sample, schedule_from_config
from seasonal_block import wavelet_regularizer
from synthetic import make_sines_windows

PARAMETER_GROUPS = ['lma.bank', 'lma.affine', 'trend_encoder', 'seasonal_encoder', 'step_embedder',
                    'trend_net', 'seasonal_net.filter', 'seasonal_net.attention', 'correction']


def sines_batch(n=40, L=12, K=2):
    return SeriesBatch(windows=make_sines_windows(n, L, K, seed=0), scale_min=None, scale_max=None)


def test_forward_shape_and_levels(toy_config):
    cfg = toy_config()
    model = build_model(cfg, n_channels=3, length=24, seed=0)
    assert model.levels == 2
    out = model(torch.randn(5, 24, 3), torch.tensor([1, 2, 3, 4, 5]))
    assert out.shape == (5, 24, 3)
    assert model(torch.randn(2, 24, 3), 7).shape == (2, 24, 3)
    with pytest.raises(ShapeError):
        model(torch.randn(2, 12, 3), 1)


def test_build_model_seeded(toy_config):
    first = build_model(toy_config(), 2, 12, seed=3).state_dict()
    second = build_model(toy_config(), 2, 12, seed=3).state_dict()
    assert all(torch.equal(first[name], second[name]) for name in first)


def test_neutralized_blocks_compose_to_identity(toy_config):
    cfg = toy_config({'correction.enabled': False})
    model = build_model(cfg, n_channels=2, length=12, seed=0)
    with torch.no_grad():
        head = model.lma.bank.weight_net[-1]
        head.weight.zero_()
        head.bias.copy_(torch.tensor([50.0, 0.0, 0.0, 0.0, 0.0]))
        model.lma.affine.log_gamma.fill_(0.3)
        model.lma.affine.beta.fill_(0.2)
        model.trend_encoder.weight.copy_(torch.eye(4, 2))
        model.trend_encoder.bias.zero_()
        for layer in model.trend_net.layers:
            layer.zero_output()
        model.seasonal_encoder.weight.zero_()
        model.seasonal_encoder.bias.zero_()
        for cond in model.seasonal_net.attention.cond:
            cond.weight.zero_()
            cond.bias.zero_()
        model.correction.trend_decoder.weight.copy_(torch.eye(2, 4))
        model.correction.trend_decoder.bias.zero_()
        model.correction.seasonal_decoder.weight.zero_()
        model.correction.seasonal_decoder.bias.zero_()
    x = torch.randn(3, 12, 2)
    assert (model(x, 4) - x).abs().max().item() < 1e-8


def test_eps_from_x0_inverts_forward():
    schedule = build_schedule(50)
    x0 = torch.randn(4, 8, 2)
    eps = torch.randn(4, 8, 2)
    s = torch.tensor([1, 10, 25, 50])
    x_s = forward_diffuse(x0, s, eps, schedule).x
    assert torch.allclose(eps_from_x0(x0, x_s, s, schedule), eps, atol=1e-8)


def test_training_loss_components(toy_config):
    cfg = toy_config()
    model = build_model(cfg, 2, 12, seed=0)
    x0 = torch.as_tensor(make_sines_windows(8, 12, 2))
    loss = training_loss(model, x0, schedule_from_config(cfg), torch.Generator().manual_seed(0), reg_weight=0.5)
    assert torch.isfinite(loss.total)
    assert torch.allclose(loss.total, loss.denoising + 0.5 * loss.regularizer)
    assert loss.regularizer.item() <= 1e-12
    with pytest.raises(DataError):
        training_loss(model, x0[:0], schedule_from_config(cfg), torch.Generator())


def test_predict_eps_objective(toy_config):
    cfg = toy_config({'model.parameterization': 'predict_eps'})
    model = build_model(cfg, 2, 12, seed=0)
    schedule = schedule_from_config(cfg)
    x0 = torch.as_tensor(make_sines_windows(8, 12, 2))
    loss = training_loss(model, x0, schedule, torch.Generator().manual_seed(0))
    generator = torch.Generator().manual_seed(0)
    s = torch.randint(1, schedule.S + 1, (8,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator)
    x_s = forward_diffuse(x0, s, eps, schedule).x
    expected = F.mse_loss(eps_from_x0(model(x_s, s), x_s, s, schedule), eps)
    assert torch.allclose(loss.denoising, expected)


def test_frozen_wavelet_has_no_regularizer(toy_config):
    model = build_model(toy_config({'wavelet.learnable': False}), 2, 24, seed=0)
    assert model.regularizer().item() == 0.0
    assert 'seasonal_net.filter.h' not in dict(model.named_parameters())


def gradient_closure(model, names, x0, schedule, reg_weight=0.1):
    s = torch.tensor([1, 4, 7, 10])
    eps = torch.randn(x0.shape, generator=torch.Generator().manual_seed(5))
    x_s = forward_diffuse(x0, s, eps, schedule).x
    fixed = {name: p.detach() for name, p in model.named_parameters()}
    fixed.update(dict(model.named_buffers()))

    def loss(*values):
        params = {**fixed, **dict(zip(names, values))}
        x0_hat = functional_call(model, params, (x_s, s))
        return F.mse_loss(x0_hat, x0) + reg_weight * wavelet_regularizer(params['seasonal_net.filter.h'])
    return loss


@pytest.mark.parametrize('group', PARAMETER_GROUPS)
def test_gradients_match_finite_differences(toy_config, group):
    cfg = toy_config({'wavelet.levels': 1, 'lma.kernels': [1, 2, 4, 6]})
    model = build_model(cfg, n_channels=2, length=8, seed=0)
    x0 = torch.as_tensor(make_sines_windows(4, 8, 2, seed=1))
    names = [name for name, _ in model.named_parameters() if name.startswith(group)]
    assert names
    with torch.no_grad():
        # Move the filter off db3 so the regularizer gradient is nonzero
        model.seasonal_net.filter.h.add_(torch.linspace(-0.02, 0.02, 6))
    inputs = tuple(dict(model.named_parameters())[name].detach().clone().requires_grad_() for name in names)
    fn = gradient_closure(model, names, x0, schedule_from_config(cfg))
    assert torch.autograd.gradcheck(fn, inputs, eps=1e-4, atol=1e-6, rtol=1e-4)


def test_training_is_deterministic(toy_config):
    cfg = toy_config({'train.epochs': 2})
    schedule = schedule_from_config(cfg)
    _, first = train(sines_batch(), cfg, schedule, epochs=2, seed=0)
    _, second = train(sines_batch(), cfg, schedule, epochs=2, seed=0)
    assert np.array_equal(first.loss_curve(), second.loss_curve())
    assert first.loss_curve().shape == (2, 3)
    assert first.step == 2 * 3


def test_trainer_callbacks(toy_config):
    cfg = toy_config({'train.checkpoint_every': 1})
    trainer = Trainer(cfg, schedule_from_config(cfg))
    events = []
    trainer.add_callback(lambda event, data: events.append((event, data['epoch'])))
    trainer.train(sines_batch(), epochs=3, seed=0)
    assert events == [('epoch_complete', 1), ('checkpoint', 1), ('epoch_complete', 2), ('checkpoint', 2),
                      ('epoch_complete', 3)]


def test_zero_epochs_returns_initial_model(toy_config):
    cfg = toy_config()
    model, state = train(sines_batch(), cfg, schedule_from_config(cfg), epochs=0, seed=4)
    reference = build_model(cfg, 2, 12, seed=4).state_dict()
    assert state.epoch == 0 and state.denoising_loss == []
    assert all(torch.equal(model.state_dict()[name], reference[name]) for name in reference)


def test_divergence_raises(toy_config):
    cfg = toy_config()
    model = build_model(cfg, 2, 12, seed=0)
    with torch.no_grad():
        model.lma.affine.beta.fill_(float('nan'))
    with pytest.raises(TrainingDivergedError):
        train(sines_batch(), cfg, schedule_from_config(cfg), epochs=1, seed=0, model=model)


def test_empty_dataset(toy_config):
    cfg = toy_config()
    empty = SeriesBatch(windows=np.zeros((0, 12, 2)), scale_min=None, scale_max=None)
    with pytest.raises(DataError):
        train(empty, cfg, schedule_from_config(cfg), epochs=1, seed=0)


def test_sampling_from_model(toy_config):
    cfg = toy_config()
    model = build_model(cfg, 2, 12, seed=0)
    schedule = schedule_from_config(cfg)
    first = sample(model.noise_predictor(schedule), 3, schedule, seed=1, shape=(12, 2), dtype=torch.float64)
    second = sample(model.noise_predictor(schedule), 3, schedule, seed=1, shape=(12, 2), dtype=torch.float64)
    assert first.shape == (3, 12, 2)
    assert torch.equal(first, second)


def test_denoise_forward_matches_module_call(toy_config):
    model = build_model(toy_config(), 2, 12, seed=0)
    x = torch.randn(3, 12, 2)
    assert torch.equal(denoise_forward(LatentState(x=x, step=5), 5, model), model(x, 5))


def test_objectives_differ_by_signal_to_noise_ratio(toy_config):
    x0 = torch.as_tensor(make_sines_windows(1, 12, 2, seed=3))
    losses = {}
    for parameterization in ('predict_x0', 'predict_eps'):
        cfg = toy_config({'model.parameterization': parameterization})
        schedule = schedule_from_config(cfg)
        model = build_model(cfg, 2, 12, seed=0)
        losses[parameterization] = training_loss(model, x0, schedule, torch.Generator().manual_seed(7)).denoising
    s = torch.randint(1, schedule.S + 1, (1,), generator=torch.Generator().manual_seed(7))
    a_bar = schedule.alpha_bar[s - 1].item()
    assert losses['predict_eps'].item() == pytest.approx(a_bar / (1 - a_bar) * losses['predict_x0'].item(), rel=1e-8)


@pytest.mark.slow
def test_training_reduces_denoising_loss(toy_config):
    cfg = toy_config({'model.width': 8, 'diffusion.steps': 50, 'train.lr': 2e-3})
    schedule = schedule_from_config(cfg)
    dataset = sines_batch(n=64, L=24, K=2)
    data = torch.as_tensor(dataset.windows)
    initial = training_loss(build_model(cfg, 2, 24, seed=0), data, schedule,
                            torch.Generator().manual_seed(0)).denoising.item()
    model, _ = train(dataset, cfg, schedule, epochs=200, seed=0)
    final = training_loss(model, data, schedule, torch.Generator().manual_seed(0)).denoising.item()
    assert final < 0.25 * initial
