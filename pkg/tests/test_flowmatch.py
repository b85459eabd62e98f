import json
import math
import struct

import numpy as np
import pytest
import torch
import torch.nn as nn

from motionkit.errors import DataError
from motionkit.flowmatch import (FMConfig, FMModel, TrainingPools, batch_composition, fm_interpolate, fm_loss,
                                 fm_target_velocity, gaussian_optimal_velocity, load_checkpoint, sample,
                                 save_checkpoint, stack_images, train, two_stage_generate, unstack_images,
                                 velocity)


def small_config(**kw):
    base = dict(sample_shape=(3, 8, 8), hidden=8, control_hidden=4, n_blocks=2, time_dim=8)
    base.update(kw)
    return FMConfig(**base)


class Affine(nn.Module):
    """Two-parameter velocity model u(x, t) = a x + b t."""

    def __init__(self):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(0.3, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(-0.7, dtype=torch.float64))

    def forward(self, x, t):
        return self.a * x + self.b * t.reshape(-1, *([1] * (x.ndim - 1)))


def test_interpolate_examples():
    x0, eps = torch.randn(4, 3), torch.randn(4, 3)
    assert torch.equal(fm_interpolate(x0, eps, 0.0), x0)
    assert torch.equal(fm_interpolate(x0, eps, 1.0), eps)
    assert float(fm_interpolate(torch.tensor(2.0), torch.tensor(0.0), 0.5)) == 1.0
    with pytest.raises(DataError):
        fm_interpolate(torch.zeros(2), torch.zeros(3), 0.5)
    with pytest.raises(DataError):
        fm_interpolate(x0, eps, 1.5)


def test_target_velocity_examples():
    eps = torch.randn(5)
    assert torch.equal(fm_target_velocity(torch.zeros(5), eps), eps)
    assert torch.equal(fm_target_velocity(eps, eps), torch.zeros(5))
    assert fm_target_velocity(torch.tensor([1.0, 2.0]), torch.zeros(2)).tolist() == [-1.0, -2.0]
    with pytest.raises(DataError):
        fm_target_velocity(torch.zeros(2), torch.zeros(3))


def test_velocity_is_path_derivative():
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(6, 5, dtype=torch.float64, generator=g)
    eps = torch.randn(6, 5, dtype=torch.float64, generator=g)
    h = 1e-5
    for t in torch.rand(5, generator=g, dtype=torch.float64) * 0.98 + 0.01:
        fd = (fm_interpolate(x0, eps, t + h) - fm_interpolate(x0, eps, t - h)) / (2 * h)
        assert (fd - fm_target_velocity(x0, eps)).abs().max() <= 1e-6


def test_loss_gradient_matches_finite_differences():
    model = Affine()
    x0 = torch.randn(64, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def loss():
        return fm_loss(model, x0, generator=torch.Generator().manual_seed(2))

    model.zero_grad()
    loss().backward()
    analytic = [model.a.grad.item(), model.b.grad.item()]
    h = 1e-6
    for p, g in zip((model.a, model.b), analytic):
        with torch.no_grad():
            p += h
            up = loss().item()
            p -= 2 * h
            down = loss().item()
            p += h
        fd = (up - down) / (2 * h)
        assert abs(fd - g) <= 1e-4 * max(abs(fd), 1e-12)


def test_loss_examples():
    g = torch.Generator().manual_seed(3)
    x0 = torch.randn(10000, 1, dtype=torch.float64, generator=g)

    class Oracle(nn.Module):
        def forward(self, x, t):
            return (x - x0) / t[:, None]

    assert fm_loss(Oracle(), x0, generator=torch.Generator().manual_seed(4)).item() <= 1e-12
    zero = fm_loss(lambda x, t: torch.zeros_like(x), x0, generator=torch.Generator().manual_seed(4)).item()
    assert zero == pytest.approx(2.0, abs=0.1)
    best = fm_loss(lambda x, t: gaussian_optimal_velocity(x, t[:, None]), x0,
                   generator=torch.Generator().manual_seed(4)).item()
    assert best < zero
    with pytest.raises(DataError):
        fm_loss(Oracle(), torch.zeros(0, 1))


def test_gaussian_optimal_sampling_reproduces_moments():
    x = sample(gaussian_optimal_velocity, (10000,), steps=100, generator=torch.Generator().manual_seed(5),
               dtype=torch.float64)
    assert abs(x.mean().item()) <= 0.05
    assert 0.95 <= x.std().item() <= 1.05


def test_sample_single_zero_step_and_determinism():
    noise = torch.randn(3, 4)
    out = sample(lambda x, t: torch.zeros_like(x), noise.shape, steps=1, noise=noise)
    assert torch.equal(out, noise)
    with pytest.raises(DataError):
        sample(lambda x, t: x, (2,), steps=0)
    model = FMModel(small_config())
    a = sample(model, (2, 3, 8, 8), steps=5, generator=torch.Generator().manual_seed(0))
    b = sample(model, (2, 3, 8, 8), steps=5, generator=torch.Generator().manual_seed(0))
    assert torch.equal(a, b)


def test_zeroed_control_is_bit_identical():
    torch.manual_seed(0)
    model = FMModel(small_config(control_channels=6))
    x, t, c = torch.randn(2, 3, 8, 8), torch.rand(2), torch.randn(2, 6, 8, 8)
    assert torch.equal(model(x, t, c), model(x, t))
    with torch.no_grad():
        for p in model.ctrl_proj:
            p.weight.normal_()
            p.bias.normal_()
    assert not torch.equal(model(x, t, c), model(x, t))
    with torch.no_grad():
        for p in model.ctrl_proj:
            p.weight.zero_()
            p.bias.zero_()
    assert torch.equal(model(x, t, c), model(x, t))
    assert model(x, t, c).shape == x.shape


def test_batch_composition_floor_rule():
    assert batch_composition(16, 0.5) == (8, 8)
    assert batch_composition(10, 0.25) == (8, 2)
    assert batch_composition(7, 0.3) == (5, 2)
    assert batch_composition(8, 0.0) == (8, 0) and batch_composition(8, 1.0) == (0, 8)
    for b in range(1, 40):
        for r in np.linspace(0, 1, 21):
            n_real, n_syn = batch_composition(b, float(r))
            assert n_syn == math.floor(r * b + 1e-9) and n_real + n_syn == b


@pytest.mark.parametrize("ratio", [0.0, 0.3, 1.0])
def test_train_honours_mixture_every_step(ratio):
    cfg = small_config(batch_size=6, mixture_ratio=ratio, pretrain_steps=3, finetune_steps=5)
    pools = TrainingPools(real=torch.randn(4, 3, 8, 8), synthetic=torch.randn(4, 3, 8, 8))
    _, recs = train(FMModel(cfg), pools, cfg)
    assert [r.phase for r in recs] == ["pretrain"] * 3 + ["finetune"] * 5
    assert all(r.n_real == 6 and r.n_synthetic == 0 for r in recs[:3])
    n_syn = math.floor(ratio * 6)
    assert all(r.n_synthetic == n_syn and r.n_real == 6 - n_syn for r in recs[3:])
    assert all(r.loss >= 0 for r in recs)
    assert json.loads(recs[-1].to_json())["step"] == 7


def test_train_deterministic_and_rejects_empty_pool():
    cfg = small_config(batch_size=4, finetune_steps=4, mixture_ratio=0.5)
    pools = TrainingPools(real=torch.randn(4, 3, 8, 8), synthetic=torch.randn(4, 3, 8, 8))
    m1, r1 = train(FMModel(cfg), pools, cfg)
    m2, r2 = train(FMModel(cfg), pools, cfg)
    assert [r.loss for r in r1] == [r.loss for r in r2]
    with pytest.raises(DataError):
        train(FMModel(cfg), TrainingPools(real=torch.randn(4, 3, 8, 8)), cfg)


def test_training_reduces_loss_16x16():
    # single-mode data: one fixed smooth image plus small jitter
    yy, xx = torch.meshgrid(torch.linspace(-1, 1, 16), torch.linspace(-1, 1, 16), indexing="ij")
    base = torch.stack([xx, yy, xx * yy]) * 0.8
    data = base[None] + 0.05 * torch.randn(32, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    cfg = FMConfig(sample_shape=(3, 16, 16), hidden=32, n_blocks=3, batch_size=16, lr=2e-3,
                   finetune_steps=500, mixture_ratio=0.0)
    model = FMModel(cfg)
    probe = lambda: fm_loss(model, data, generator=torch.Generator().manual_seed(9)).item()
    before = probe()
    _, recs = train(model, TrainingPools(real=data), cfg)
    assert len(recs) == 500
    assert probe() < before
    assert np.mean([r.loss for r in recs[-50:]]) < np.mean([r.loss for r in recs[:50]])


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(1)
    model = FMModel(small_config(control_channels=6))
    with torch.no_grad():
        for p in model.parameters():
            p.normal_()
    save_checkpoint(model, tmp_path / "m.ckpt", {"s_f": 2.5})
    back, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"s_f": 2.5}
    x, t, c = torch.randn(2, 3, 8, 8), torch.rand(2), torch.randn(2, 6, 8, 8)
    assert torch.equal(back(x, t, c), model.eval()(x, t, c))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    sizes = [int(np.prod(t["shape"])) * 4 for t in header["tensors"]]
    assert [t["offset"] for t in header["tensors"]] == list(np.cumsum([0] + sizes[:-1]))
    assert len(raw) == 12 + n + sum(sizes)
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_image_stacking_roundtrip():
    rng = np.random.default_rng(0)
    ims = [rng.uniform(size=(4, 5, 3)) for _ in range(3)]
    x = stack_images(ims)
    assert x.shape == (9, 4, 5)
    assert np.allclose(unstack_images(x), np.stack(ims), atol=1e-6)


def test_two_stage_mode_contract():
    motion = FMModel(small_config(sample_shape=(6, 8, 8), control_channels=12))
    video = FMModel(small_config(sample_shape=(9, 8, 8), control_channels=6))
    pl = torch.randn(2, 12, 8, 8)
    flows, vids = two_stage_generate(motion, video, pl, s_f=3.0, steps=3)
    assert len(flows) == 2 and len(flows[0]) == 2 and vids[0].shape == (3, 8, 8, 3)
    assert all(f.magnitude.max() <= 3.0 + 1e-9 for fl in flows for f in fl)
    with pytest.raises(DataError):
        two_stage_generate(motion, video, None, s_f=3.0, mode="camera", steps=2)
    flows, vids = two_stage_generate(motion, video, None, s_f=3.0, mode="human-like", steps=2)
    assert len(flows) == 1
    bad_video = FMModel(small_config(sample_shape=(12, 8, 8), control_channels=6))
    with pytest.raises(DataError):
        two_stage_generate(motion, bad_video, pl, s_f=3.0, steps=2)
    with pytest.raises(DataError):
        two_stage_generate(motion, video, torch.randn(1, 6, 8, 8), s_f=3.0, steps=2)


def test_config_validation_and_roundtrip():
    with pytest.raises(DataError):
        FMConfig(steps=0)
    with pytest.raises(DataError):
        FMConfig(mixture_ratio=1.5)
    cfg = FMConfig(sample_shape=(6, 16, 16), control_channels=12)
    assert FMConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class FixedX0(nn.Module):
    """Stand-in x0 predictor that always returns the same tensor."""

    def __init__(self, x0, min_t=1e-4):
        super().__init__()
        self.x0 = x0
        self.config = FMConfig(prediction="sample", min_t=min_t)

    def forward(self, x, t):
        return self.x0.expand_as(x)


def test_sample_prediction_recovers_exact_velocity():
    g = torch.Generator().manual_seed(3)
    x0 = torch.randn(4, 6, dtype=torch.float64, generator=g)
    eps = torch.randn(4, 6, dtype=torch.float64, generator=g)
    t = torch.tensor([0.9, 0.5, 0.1, 0.01], dtype=torch.float64)
    xt = fm_interpolate(x0, eps, t)
    v = velocity(FixedX0(x0), xt, t)
    assert torch.allclose(v, fm_target_velocity(x0, eps), atol=1e-10)


def test_sample_prediction_loss_is_t_squared_weighted_velocity_loss():
    x0 = torch.randn(3, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    model = FixedX0(torch.zeros_like(x0), min_t=1e-12)
    loss = fm_loss(model, x0, generator=torch.Generator().manual_seed(1))
    # redraw the same t and eps and weight the velocity error by t^2 by hand
    g = torch.Generator().manual_seed(1)
    t = torch.rand(3, generator=g, dtype=x0.dtype)
    eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    xt = fm_interpolate(x0, eps, t)
    err = (velocity(model, xt, t) - fm_target_velocity(x0, eps)) * t[:, None]
    assert float(loss) == pytest.approx(float(torch.mean(err ** 2)), rel=1e-9)
    assert float(loss) == pytest.approx(float(torch.mean(x0 ** 2)), rel=1e-12)


def test_sample_prediction_sampler_lands_on_prediction():
    target = torch.full((2, 3), 0.25)
    out = sample(FixedX0(target), (2, 3), steps=10, generator=torch.Generator().manual_seed(0))
    # each Euler step moves x a fraction dt/t of the way to x0_hat; the last step (t = dt) lands on it
    assert torch.allclose(out, target, atol=1e-6)


def test_cosine_schedule_and_prediction_options_train():
    cfg = small_config(prediction="sample", lr_schedule="cosine", finetune_steps=5, mixture_ratio=0.0)
    pools = TrainingPools(real=torch.randn(4, 3, 8, 8))
    _, recs = train(FMModel(cfg), pools, cfg)
    assert len(recs) == 5 and all(math.isfinite(r.loss) for r in recs)
    with pytest.raises(DataError):
        small_config(prediction="noise")
    with pytest.raises(DataError):
        small_config(lr_schedule="step")
