import numpy as np
import pytest
import torch

from wvd.diffusion import make_schedule
from wvd.errors import EmptyBatch
from wvd.model import Denoiser, DenoiserConfig
from wvd.scene import random_video
from wvd.train import (TrainConfig, Trainer, build_pool, choose_conditioning, compute_loss,
                       conditioning_tensors, smoothed, train_step)


def small(seed=0, **kw):
    torch.manual_seed(seed)
    return Denoiser(DenoiserConfig(height=8, width=8, max_frames=4, embed_dim=16, n_layers=1, n_heads=2, **kw))


def test_optimizer_defaults():
    cfg = TrainConfig()
    assert cfg.lr == 3e-4 and cfg.betas == (0.99, 0.95) and cfg.cond_drop == 0.1


def test_loss_near_one_with_zero_output():
    # a zero-initialised output layer predicts eps = 0, so the loss is E[eps^2] = 1
    m = small()
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(8, 3, 8, 8, 6, generator=g) * 2 - 1
    t = torch.randint(1, 1001, (8,), generator=g)
    noise = torch.randn(x0.shape, generator=g)
    with torch.no_grad():
        loss = compute_loss(m, x0, t, noise, make_schedule(1000))
    assert abs(loss.item() - 1.0) < 0.05


def test_loss_excludes_conditioning_entries():
    m = small()
    x0 = torch.zeros(2, 2, 8, 8, 6)
    noise = torch.randn(x0.shape, generator=torch.Generator().manual_seed(1))
    clean, flags = conditioning_tensors(x0.shape, [(0, 0), None])
    t = torch.tensor([10, 10])
    full = compute_loss(m, x0, t, noise, make_schedule(1000), clean, flags)
    # eps = 0 everywhere, so the loss is the mean of noise^2 over the unconditioned entries
    assert torch.allclose(full, (noise[~clean] ** 2).mean())


def test_conditioning_entries_are_noise_free():
    seen = {}

    class Spy(torch.nn.Module):
        rgb_only = False

        def forward(self, x, t, flags):
            seen["x"], seen["flags"] = x, flags
            return torch.zeros_like(x)

    x0 = torch.rand(1, 3, 4, 4, 6)
    clean, flags = conditioning_tensors(x0.shape, [(2, 1)])
    compute_loss(Spy(), x0, torch.tensor([900]), torch.randn(x0.shape), make_schedule(1000), clean, flags)
    assert torch.equal(seen["x"][0, 2, ..., 3:], x0[0, 2, ..., 3:])
    assert seen["flags"][0, 2, ..., 1].all() and seen["flags"].sum() == 16
    assert not torch.equal(seen["x"][0, 2, ..., :3], x0[0, 2, ..., :3])


def test_gradient_matches_finite_differences():
    m = small(seed=3).double()
    with torch.no_grad():
        m.out.weight.normal_(0, 0.1)
    g = torch.Generator().manual_seed(5)
    x0 = torch.rand(2, 2, 8, 8, 6, generator=g, dtype=torch.float64) * 2 - 1
    noise = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([50, 700])
    clean, flags = conditioning_tensors(x0.shape, [(1, 0), None])
    sch = make_schedule(1000)

    def loss():
        return compute_loss(m, x0, t, noise, sch, clean, flags.double())

    m.zero_grad()
    loss().backward()
    params = dict(m.named_parameters())
    rng = np.random.default_rng(0)
    picks = []
    names = list(params)
    while len(picks) < 10:
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        if abs(float(p.grad[idx])) > 1e-6:
            picks.append((name, idx))
    h = 1e-6
    for name, idx in picks:
        p = params[name]
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss())
            p[idx] = orig - h
            down = float(loss())
            p[idx] = orig
        fd = (up - down) / (2 * h)
        an = float(p.grad[idx])
        assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-3, name


def test_choose_conditioning_drop_rate():
    g = torch.Generator().manual_seed(0)
    draws = [choose_conditioning(4, g, 0.1) for _ in range(5000)]
    rate = sum(d is None for d in draws) / len(draws)
    assert abs(rate - 0.1) < 3 * np.sqrt(0.09 / 5000)
    kept = [d for d in draws if d is not None]
    assert {d[0] for d in kept} == {0, 1, 2, 3} and {d[1] for d in kept} == {0, 1}
    assert all(d is None or d[1] == 0 for d in (choose_conditioning(4, g, 0.1, True) for _ in range(200)))


def test_training_is_deterministic():
    pool = build_pool(range(4), n_frames=3, intrinsics=None)[:, :, ::4, ::4]
    runs = []
    for _ in range(2):
        tr = Trainer(small(), TrainConfig(seed=7, batch_size=2, ema_decay=0.9))
        tr.fit(pool, 5)
        runs.append((tr.losses, [p.detach().clone() for p in tr.sampling_model().parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_train_step_accepts_videos_and_rejects_empty():
    vids = [random_video(s, 2).video for s in range(2)]
    m = Denoiser(DenoiserConfig(embed_dim=16, n_layers=1, n_heads=2))
    _, loss = train_step(m, vids)
    assert np.isfinite(loss)
    with pytest.raises(EmptyBatch):
        train_step(m, [])
    with pytest.raises(EmptyBatch):
        Trainer(m, TrainConfig()).fit(np.zeros((0, 2, 32, 32, 6)), 1)


def test_loss_decreases_on_small_fixture():
    pool = build_pool(range(20), n_frames=3)[:, :, ::4, ::4]
    tr = Trainer(small(), TrainConfig(seed=0, batch_size=8, lr=1e-3, betas=(0.9, 0.999)))
    tr.fit(pool, 150)
    s = smoothed(tr.losses, 30)
    assert s[-1] < s[0]


def test_smoothed():
    assert np.allclose(smoothed([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    assert np.allclose(smoothed([1, 3], 10), [2])
