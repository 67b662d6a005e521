"""Training losses, schedules, freeze policy, EMA, and gradient correctness."""

import io
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from t2ldm.network import DenoisingNetwork, GuidanceNetwork, UNetConfig
from t2ldm.schedule import cosine_schedule
from t2ldm.training import (
    Batcher,
    EMATracker,
    LOG_COLUMNS,
    TrainConfig,
    Trainer,
    cfg_dropout_mask,
    lambda_of_step,
    learning_rate_of_step,
    loss_align,
    loss_denoise,
    loss_guidance,
    run_training,
)

torch.set_num_threads(1)


class MicroDN(nn.Module):
    """Interface stand-in: conv plus a timestep-scaled channel gain."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 2, 3, padding=1)
        self.tgain = nn.Parameter(torch.zeros(2))

    def forward(self, x_t, t, text=None, text_mask=None):
        gain = 1.0 + 0.01 * t.to(x_t.dtype)[:, None] * self.tgain[None, :]
        h = self.conv(x_t) * gain[:, :, None, None]
        return h, [h]


class MicroGN(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 2, 3, padding=1)
        self.out = nn.Conv2d(2, 2, 1)

    def forward(self, x0, pyramid):
        h = self.conv(x0) + 0.5 * pyramid[0]
        return self.out(h), [h]


def micro_pair(seed):
    g = torch.Generator().manual_seed(seed)
    dn, gn = MicroDN(), MicroGN()
    with torch.no_grad():
        for p in list(dn.parameters()) + list(gn.parameters()):
            p.copy_(torch.randn(p.shape, generator=g) * 0.4)
    return dn, gn


def test_loss_denoise_huber_examples():
    one = torch.ones(1, 1, 1, 1)
    assert loss_denoise(one, one, torch.ones(1)).item() == 0.0
    # residual 2 sits on the linear branch: delta * (|r| - delta/2) = 1.5
    assert abs(loss_denoise(2 * one, 0 * one, torch.ones(1)).item() - 1.5) < 1e-7
    # residual 0.5 sits on the quadratic branch: r^2 / 2 = 0.125
    assert abs(loss_denoise(0.5 * one, 0 * one, torch.ones(1)).item() - 0.125) < 1e-7
    weighted = loss_denoise(2 * one, 0 * one, torch.full((1,), 0.25))
    assert abs(weighted.item() - 0.375) < 1e-7
    with pytest.raises(ValueError):
        loss_denoise(torch.ones(1, 2), torch.ones(1, 3), torch.ones(1))


def test_loss_guidance_matches_transcription():
    rng = np.random.default_rng(0)
    a = torch.as_tensor(rng.normal(size=(2, 2, 4, 4)))
    b = torch.as_tensor(rng.normal(size=(2, 2, 4, 4)))
    assert loss_guidance(a, a).item() == 0.0
    offset = loss_guidance(a + 0.3, a)
    assert abs(offset.item() - 0.09) < 1e-9
    expected = float(np.mean((a.numpy() - b.numpy()) ** 2))
    assert abs(loss_guidance(a, b).item() - expected) < 1e-7


def test_loss_align_cosine_properties():
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    assert loss_align([x], [x]).item() < 1e-12
    # orthogonal channel vectors at every position
    a = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    b = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    a[:, 0] = 1.0
    b[:, 1] = 1.0
    assert abs(loss_align([a], [b]).item() - 1.0) < 1e-12
    y = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    base = loss_align([x], [y]).item()
    assert abs(loss_align([x], [3.0 * y]).item() - base) < 1e-12
    with pytest.raises(ValueError):
        loss_align([x], [y, y])
    with pytest.raises(ValueError):
        loss_align([x], [torch.randn(1, 4, 3, 2, dtype=torch.float64)])


def test_loss_align_pushes_gradient_into_noise_features_only():
    noise = torch.randn(1, 4, 2, 2, requires_grad=True)
    teacher = torch.randn(1, 4, 2, 2)
    loss_align([teacher], [noise]).backward()
    assert noise.grad is not None
    assert noise.grad.abs().max().item() > 0


def test_lambda_ladder():
    cfg = TrainConfig(total_steps=2000, lambda_interval=500)
    assert lambda_of_step(0, cfg) == 0.001
    assert lambda_of_step(499, cfg) == 0.001
    assert lambda_of_step(500, cfg) == 0.01
    assert lambda_of_step(1000, cfg) == 0.1
    assert lambda_of_step(1500, cfg) == 1.0
    assert lambda_of_step(10 ** 9, cfg) == 1.0
    with pytest.raises(ValueError):
        lambda_of_step(-1, cfg)


def test_learning_rate_cosine_decay():
    cfg = TrainConfig(total_steps=1000, learning_rate=1e-4)
    assert abs(learning_rate_of_step(0, cfg) - 1e-4) < 1e-12
    mid = learning_rate_of_step(500, cfg)
    assert abs(mid - 5e-5) < 1e-9
    assert learning_rate_of_step(1000, cfg) < 1e-12


def test_cfg_dropout_empirical_rate():
    rng = np.random.default_rng(123)
    draws = cfg_dropout_mask(rng, 10_000, 0.1)
    rate = draws.mean()
    assert abs(rate - 0.1) <= 0.02


def test_ema_limit_behaviors():
    dn, _ = micro_pair(1)
    ema0 = EMATracker(dn, decay=0.0)
    with torch.no_grad():
        for p in dn.parameters():
            p.add_(1.0)
    ema0.update(dn)
    for name, p in dn.named_parameters():
        assert torch.equal(ema0.shadow[name], p)
    ema1 = EMATracker(dn, decay=1.0)
    before = {k: v.clone() for k, v in ema1.shadow.items()}
    with torch.no_grad():
        for p in dn.parameters():
            p.mul_(-2.0)
    ema1.update(dn)
    for name in before:
        assert torch.equal(ema1.shadow[name], before[name])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(cfg_dropout=1.5)
    with pytest.raises(ValueError):
        TrainConfig(total_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_full_loss_gradient_matches_finite_differences_on_micro_model():
    dn, gn = micro_pair(7)
    dn.double()
    gn.double()
    n_params = sum(p.numel() for p in dn.parameters()) + \
        sum(p.numel() for p in gn.parameters())
    assert n_params <= 500
    rng = np.random.default_rng(11)
    x0 = torch.as_tensor(rng.normal(size=(2, 2, 4, 4)))
    x_t = torch.as_tensor(rng.normal(size=(2, 2, 4, 4)))
    v = torch.as_tensor(rng.normal(size=(2, 2, 4, 4)))
    weight = torch.as_tensor(rng.uniform(0.2, 1.0, size=2))
    t = torch.tensor([3, 9])
    lam = 0.1

    def total():
        v_hat, f_noise = dn(x_t, t)
        x0_recon, f_recon = gn(x0, f_noise)
        return (loss_denoise(v_hat, v, weight)
                + loss_guidance(x0_recon, x0)
                + lam * loss_align(f_recon, f_noise))

    for m in (dn, gn):
        m.zero_grad()
    total().backward()
    params = [(n, p) for m in (dn, gn) for n, p in m.named_parameters()]
    checked = 0
    h = 1e-6
    for name, p in params:
        flat = p.data.view(-1)
        for j in range(min(flat.numel(), 4)):
            keep = flat[j].item()
            flat[j] = keep + h
            up = total().item()
            flat[j] = keep - h
            down = total().item()
            flat[j] = keep
            fd = (up - down) / (2 * h)
            grad = p.grad.view(-1)[j].item()
            if abs(fd) < 1e-10 and abs(grad) < 1e-10:
                continue
            rel = abs(grad - fd) / max(abs(fd), 1e-10)
            assert rel <= 1e-3, f"{name}[{j}]: analytic {grad} vs fd {fd}"
            checked += 1
    assert checked >= 10


def test_trainer_reports_lambda_and_is_deterministic():
    schedule = cosine_schedule(16)
    cfg = TrainConfig(total_steps=4, gn_active_steps=4, lambda_interval=1,
                      batch_size=2, cfg_dropout=0.0)

    def run(seed):
        dn, gn = micro_pair(21)
        trainer = Trainer(dn, gn, schedule, cfg, seed=seed)
        x0 = torch.as_tensor(
            np.random.default_rng(2).normal(size=(2, 2, 4, 4)).astype(np.float32))
        return [trainer.train_step(x0) for _ in range(4)]

    a = run(5)
    b = run(5)
    assert a[0]["lambda"] == 0.001
    assert a[1]["lambda"] == 0.01
    for ra, rb in zip(a, b):
        assert ra == rb
    assert all(math.isfinite(r["loss_total"]) for r in a)


def test_gn_freezes_bitwise_after_active_steps():
    schedule = cosine_schedule(16)
    cfg = TrainConfig(total_steps=6, gn_active_steps=3, lambda_interval=2,
                      batch_size=2, cfg_dropout=0.0, learning_rate=1e-2)
    dn, gn = micro_pair(31)
    trainer = Trainer(dn, gn, schedule, cfg, seed=9)
    x0 = torch.as_tensor(
        np.random.default_rng(3).normal(size=(2, 2, 4, 4)).astype(np.float32))
    reports = [trainer.train_step(x0) for _ in range(3)]
    assert all(r["loss_guidance"] > 0 for r in reports)
    frozen = [p.detach().clone() for p in gn.parameters()]
    dn_before = [p.detach().clone() for p in dn.parameters()]
    late = [trainer.train_step(x0) for _ in range(3)]
    for p, ref in zip(gn.parameters(), frozen):
        assert torch.equal(p, ref)
    assert any(not torch.equal(p, ref) for p, ref in zip(dn.parameters(), dn_before))
    # teacher mode: guidance loss is dropped, alignment still reported
    assert all(r["loss_guidance"] == 0.0 for r in late)
    assert all(r["loss_align"] > 0.0 for r in late)


def test_non_finite_loss_aborts_with_step():
    schedule = cosine_schedule(16)
    cfg = TrainConfig(total_steps=2, gn_active_steps=0, scrg=False, batch_size=1)
    dn, _ = micro_pair(41)
    with torch.no_grad():
        dn.conv.weight.fill_(float("nan"))
    trainer = Trainer(dn, None, schedule, cfg, seed=1)
    with pytest.raises(RuntimeError, match="step 0"):
        trainer.train_step(torch.randn(1, 2, 4, 4))


def test_batcher_pads_heterogeneous_embeddings():
    images = np.zeros((3, 2, 4, 4), dtype=np.float32)
    emb = [np.ones((1, 8), dtype=np.float32),
           np.full((3, 8), 2.0, dtype=np.float32),
           np.full((2, 8), 3.0, dtype=np.float32)]
    batcher = Batcher(images, emb)
    rng = np.random.default_rng(0)
    x0, text, mask = batcher.sample(rng, 3)
    assert x0.shape == (3, 2, 4, 4)
    assert text.shape[0] == 3 and text.shape[2] == 8
    assert mask.dtype == torch.bool
    for i in range(3):
        n = int(mask[i].sum())
        assert torch.all(text[i, n:] == 0)
        assert torch.all(text[i, :n] != 0)


def test_run_training_writes_csv_log():
    schedule = cosine_schedule(16)
    cfg = TrainConfig(total_steps=3, gn_active_steps=3, batch_size=2,
                      cfg_dropout=0.0)
    dn, gn = micro_pair(51)
    batcher = Batcher(np.random.default_rng(4).normal(size=(5, 2, 4, 4)).astype(np.float32))
    stream = io.StringIO()
    history = run_training(dn, gn, batcher, schedule, cfg, seed=3, log_stream=stream)
    lines = stream.getvalue().strip().split("\n")
    assert lines[0] == ",".join(LOG_COLUMNS)
    assert len(lines) == 4
    first = lines[1].split(",")
    assert first[0] == "0"
    assert abs(float(first[4]) - 0.001) < 1e-12
    assert len(history["loss_denoise"]) == 3


def test_cfg_dropout_routes_to_null_token():
    schedule = cosine_schedule(16)
    cfg = TrainConfig(total_steps=1, gn_active_steps=0, scrg=False,
                      batch_size=2, cfg_dropout=1.0)
    dn = DenoisingNetwork(UNetConfig(base_channels=8))
    g = torch.Generator().manual_seed(8)
    with torch.no_grad():
        for p in dn.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.2)
    trainer = Trainer(dn, None, schedule, cfg, seed=2)
    x0 = torch.randn(2, 2, 8, 16)
    text = torch.randn(2, 3, 768)
    report = trainer.train_step(x0, text, torch.ones(2, 3).bool())
    assert math.isfinite(report["loss_total"])
    grad = dn.null_token.grad
    assert grad is not None and grad.abs().max().item() > 0


def test_trainer_smoke_on_real_networks():
    torch.manual_seed(0)
    schedule = cosine_schedule(16)
    cfg = TrainConfig(total_steps=3, gn_active_steps=3, batch_size=2,
                      lambda_interval=1, cfg_dropout=0.5)
    unet = UNetConfig(base_channels=8)
    dn = DenoisingNetwork(unet)
    gn = GuidanceNetwork(unet)
    trainer = Trainer(dn, gn, schedule, cfg, seed=6)
    x0 = torch.randn(2, 2, 8, 16)
    text = torch.randn(2, 2, 768)
    for _ in range(3):
        report = trainer.train_step(x0, text)
        assert math.isfinite(report["loss_total"])
    name, p = next(iter(dn.named_parameters()))
    assert not torch.equal(trainer.ema.shadow[name], p)
