import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from errbridge import bridge as br
from errbridge import schedule as sch
from errbridge.denoiser import Denoiser, DenoiserSpec, ExpertPair, NumericError
from errbridge.schedule import NoiseSchedule
from errbridge.tensorio import SeedSpec, gaussian_noise
from errbridge.wsc import WscModel, WscSpec

S = NoiseSchedule()


def _images(rng, n=2, c=3, h=8, w=8):
    x0 = rng.uniform(0, 1, (n, c, h, w)).astype(np.float32)
    x1 = rng.uniform(0, 1, (n, c, h, w)).astype(np.float32)
    return x0, x1


def test_forward_endpoints(rng):
    x0, x1 = _images(rng)
    M = rng.uniform(0, 1, (2, 8, 8)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    assert np.array_equal(br.forward_sample(S, x0, x1, M, 0.0, eps), x0)
    assert np.array_equal(br.forward_sample(S, x0, x1, M, 1.0, eps), x1)
    c = sch.bridge_coeffs(S, 0.3)
    det = br.forward_sample(S, x0, x1, np.zeros_like(M), 0.3, eps)
    np.testing.assert_allclose(det, c.w0 * x0 + c.w1 * x1, atol=1e-6)
    with pytest.raises(ValueError):
        br.forward_sample(S, x0, x1[:, :2], M, 0.3, eps)


def test_target_examples(rng):
    x0, _ = _images(rng)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    ones = np.ones((2, 8, 8), np.float32)
    np.testing.assert_allclose(br.training_target(S, x0, x0, ones, 0.4, eps), eps, atol=1e-6)
    scalar = br.training_target(S, np.zeros((1, 1, 1)), np.ones((1, 1, 1)), np.zeros((1, 1)), 0.5,
                                np.zeros((1, 1, 1)))
    assert float(scalar.ravel()[0]) == pytest.approx(0.5 / math.sqrt(0.1375), rel=1e-12)
    assert float(scalar.ravel()[0]) == pytest.approx(1.3484, abs=1e-4)
    x0_hat = br.predict_x0(S, np.zeros((1, 1, 1)) + 0.5, scalar, 0.5)
    assert abs(float(x0_hat.ravel()[0])) < 1e-12
    with pytest.raises(br.DegenerateTimeError):
        br.training_target(S, x0, x0, ones, 1.0, eps)
    with pytest.raises(br.DegenerateTimeError):
        br.training_target(S, x0, x0, ones, 0.0, eps)
    np.testing.assert_array_equal(br.training_target(S, x0, x0, ones, 0.4, eps, mode="m-eps"), eps)


def test_inverse_identity_scalar(rng):
    n = 1000
    x0, x1 = rng.uniform(-1, 2, (2, n, 1, 1, 1))
    M = rng.uniform(0, 1, (n, 1, 1, 1))
    eps = rng.standard_normal((n, 1, 1, 1))
    t = rng.uniform(1e-4, 1 - 1e-4, n)
    x_t = br.forward_sample(S, x0, x1, M, t, eps)
    tgt = br.training_target(S, x0, x1, M, t, eps)
    assert np.abs(br.predict_x0(S, x_t, tgt, t) - x0).max() < 1e-5
    np.testing.assert_array_equal(br.predict_x0(S, x_t, np.zeros_like(x_t), t), x_t)


@pytest.mark.parametrize("k", range(5))
def test_variance_law(k):
    rng = np.random.default_rng(100 + k)
    t, m = rng.uniform(0.05, 0.95), rng.uniform(0.1, 1.0)
    n = 100_000
    x0 = np.full((n, 1, 1, 1), 0.3)
    x1 = np.full((n, 1, 1, 1), 0.8)
    eps = rng.standard_normal((n, 1, 1, 1))
    xt = br.forward_sample(S, x0, x1, np.full((n, 1, 1), m), t, eps).ravel()
    c = sch.bridge_coeffs(S, t)
    target_var = m * m * c.var
    assert abs(xt.var() - target_var) <= 3 * target_var * math.sqrt(2 / (n - 1))
    assert abs(xt.mean() - (c.w0 * 0.3 + c.w1 * 0.8)) <= 3 * math.sqrt(target_var / n)


def test_reverse_step_examples(rng):
    x0, x1 = _images(rng)
    M = np.ones((2, 8, 8), np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    np.testing.assert_allclose(br.reverse_step(S, x1, x0, M, 0.3, 0.3, eps), x0, atol=1e-7)
    p = sch.posterior_coeffs(S, 0.6, 0.2)
    det = br.reverse_step(S, x1, x0, np.zeros_like(M), 0.6, 0.2, eps)
    np.testing.assert_allclose(det, p.wx0 * x0 + p.wxt * x1, atol=1e-6)
    with pytest.raises(sch.DomainError):
        br.reverse_step(S, x1, x0, M, 0.2, 0.3, eps)


def test_reverse_step_marginals_scalar():
    rng = np.random.default_rng(9)
    n = 100_000
    t, dt = 0.8, 0.3
    c = sch.bridge_coeffs(S, t)
    x0 = np.full((n, 1, 1, 1), 0.1)
    x1 = np.full((n, 1, 1, 1), 0.7)
    ones = np.ones((n, 1, 1))
    xt = br.forward_sample(S, x0, x1, ones, t, rng.standard_normal(x0.shape))
    out = br.reverse_step(S, xt, x0, ones, t, dt, rng.standard_normal(x0.shape)).ravel()
    tgt = sch.bridge_coeffs(S, t - dt)
    assert abs(out.mean() - (tgt.w0 * 0.1 + tgt.w1 * 0.7)) <= 3 * math.sqrt(tgt.var / n)
    assert abs(out.var() - tgt.var) <= 3 * tgt.var * math.sqrt(2 / (n - 1))
    assert c.var > 0


def _problem(rng, n=3, side=16):
    x0, x1 = _images(rng, n, 3, side, side)
    P = (rng.uniform(size=(n, 1, side, side)) > 0.5).astype(np.float32)
    C = rng.uniform(0, 1, (n, 3, side, side)).astype(np.float32)
    seeds = [SeedSpec(4).child(i) for i in range(n)]
    return x0, x1, C, P, seeds


@pytest.mark.parametrize("steps", [5, 25])
@pytest.mark.parametrize("kind", ["zero", "random", "ones"])
def test_oracle_exactness(rng, steps, kind):
    x0, x1, C, P, seeds = _problem(rng)
    M = {"zero": np.zeros, "ones": np.ones}.get(kind, lambda s, dtype: rng.uniform(size=s).astype(dtype))(
        (3, 16, 16), dtype=np.float32)
    cfg = br.SamplerConfig(steps=steps, use_guidance=False, clip_output=False)
    out = br.sample(S, x1, C, P, M, br.OracleDenoiser(S, x0), cfg, seeds).numpy()
    assert np.abs(out - x0).max() <= 1e-4


def test_zero_map_is_deterministic(rng):
    x0, x1, C, P, seeds = _problem(rng)
    net = Denoiser(DenoiserSpec(base_channels=8, depth=2))
    for p in net.head.parameters():
        nn.init.normal_(p, std=0.1)
    cfg = br.SamplerConfig(steps=6, use_guidance=False)
    M = np.zeros((3, 16, 16), np.float32)
    a = br.sample(S, x1, C, P, M, net, cfg, seeds)
    b = br.sample(S, x1, C, P, M, net, cfg, [SeedSpec(99).child(i) for i in range(3)])
    assert torch.equal(a, b)


def _reference_plain_bridge(sched, x1, C, P, net, steps, seeds):
    """Plain data-to-data bridge sampler with every error-map multiplication removed."""
    x1 = torch.as_tensor(x1)
    ones = torch.ones(x1.shape[0], 1, *x1.shape[-2:])
    grid = sch.time_grid(steps)
    x = x1.clone()
    flag = torch.zeros(x1.shape[0])
    for k in range(steps):
        t, s = float(grid[k]), float(grid[k + 1])
        with torch.no_grad():
            eps_pred = net(ones, torch.as_tensor(P), x, torch.as_tensor(C), flag, torch.full((x.shape[0],), t))
        x0_hat = x - math.sqrt(sch.bridge_coeffs(sched, t).var) * eps_pred
        if s == 0.0:
            break
        pc = sch.posterior_coeffs(sched, t, t - s)
        z = torch.from_numpy(np.stack([gaussian_noise(x1.shape[1:], sd, counter=k) for sd in seeds]))
        x = pc.wx0 * x0_hat + pc.wxt * x + z * math.sqrt(pc.var)
    return x0_hat.clamp(0.0, 1.0)


def test_reduces_to_plain_bridge_with_unit_map(rng):
    _, x1, C, P, seeds = _problem(rng)
    torch.manual_seed(0)
    net = Denoiser(DenoiserSpec(base_channels=8, depth=2))
    nn.init.normal_(net.head.weight, std=0.05)
    cfg = br.SamplerConfig(steps=7, use_guidance=False)
    got = br.sample(S, x1, C, P, np.ones((3, 16, 16), np.float32), net, cfg, seeds)
    ref = _reference_plain_bridge(S, x1, C, P, net, 7, seeds)
    assert got.numpy().tobytes() == ref.numpy().tobytes()


def test_expert_trace_counts(rng):
    x0, x1, C, P, seeds = _problem(rng, n=1)
    pair = ExpertPair(br.OracleDenoiser(S, x0), br.OracleDenoiser(S, x0), 0.5)
    trace = []
    br.sample(S, x1, C, P, np.ones((1, 16, 16), np.float32), pair, br.SamplerConfig(use_guidance=False),
              seeds, trace=trace)
    experts = [r["expert"] for r in trace]
    assert len(experts) == 25
    assert experts.count("high") == 13 and experts.count("low") == 12
    assert all(r["expert"] == ("low" if r["t"] <= 0.5 else "high") for r in trace)


def test_sample_many_thread_independent(rng):
    x0, x1, C, P, _ = _problem(rng, n=11)
    seeds = [SeedSpec(2).child(i) for i in range(11)]
    torch.manual_seed(1)
    net = Denoiser(DenoiserSpec(base_channels=8, depth=2))
    nn.init.normal_(net.head.weight, std=0.05)
    M = rng.uniform(size=(11, 16, 16)).astype(np.float32)
    cfg = br.SamplerConfig(steps=4, use_guidance=False, chunk=4)
    a = br.sample_many(S, x1, C, P, M, net, cfg, seeds, threads=1)
    b = br.sample_many(S, x1, C, P, M, net, cfg, seeds, threads=4)
    assert a.tobytes() == b.tobytes()
    # other items in the chunk only affect float rounding (conv kernels vary
    # with batch size); bit-exactness is guaranteed by the fixed chunking
    c = br.sample_many(S, x1[3:5], C[3:5], P[3:5], M[3:5], net, cfg, seeds[3:5])
    np.testing.assert_allclose(c, a[3:5], atol=1e-5)


# ------------------------------------------------------------------ guidance

class ConstantClassifier(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x, C):
        return torch.full_like(x[:, :1], self.value) + 0 * x[:, :1]


class SteepClassifier(nn.Module):
    """Adversarial: saturates almost everywhere with huge slopes."""

    def __init__(self, gain, seed):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.w = torch.randn(1, 3, 1, 1, generator=g) * gain

    def forward(self, x, C):
        return torch.sigmoid((x * self.w).sum(1, keepdim=True) + 3.0 * torch.sin(50 * x[:, :1]))


def test_guidance_zero_cases(rng):
    x = torch.rand(2, 3, 8, 8)
    C = torch.rand(2, 3, 8, 8)
    M = torch.rand(2, 8, 8)
    assert torch.count_nonzero(br.guidance_term(x, C, M, 0.1, ConstantClassifier(0.0))) == 0
    wsc = SteepClassifier(5.0, 0)
    assert torch.count_nonzero(br.guidance_term(x, C, torch.zeros(2, 8, 8), 0.1, wsc)) == 0


@pytest.mark.parametrize("seed", range(20))
def test_guidance_clamp_fuzz(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 8, 8, generator=g) * 4 - 2
    C = torch.rand(2, 3, 8, 8, generator=g)
    M = torch.rand(2, 8, 8, generator=g)
    var = float(torch.rand(1, generator=g)) * 10
    wsc = SteepClassifier(10.0 ** (seed % 5), seed) if seed % 3 else ConstantClassifier(1.0)
    term, score = br.guidance_term(x, C, M, var, wsc, return_score=True)
    assert torch.all(torch.isfinite(term))
    assert score.abs().max() <= 0.3
    assert torch.all(term.abs() <= 0.3 * M[:, None] * var + 1e-7)


def test_guidance_fd_matches_autograd():
    torch.manual_seed(3)
    wsc = WscModel(WscSpec(channels=6)).double()
    nn.init.normal_(wsc.head.weight, std=0.5)
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    C = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    M = torch.rand(1, 16, 16, dtype=torch.float64)
    ad = br.realness_grad(wsc, x, C)
    fd = br.realness_grad_fd(wsc, x, C, M, n_probes=64, seed=SeedSpec(1))
    probed = fd != 0
    assert probed.sum() >= 64 * 3 - 3
    rel = (ad[probed] - fd[probed]).abs() / ad[probed].abs().clamp_min(1e-8)
    assert rel.max() < 1e-3


def test_guidance_requires_classifier(rng):
    x0, x1, C, P, seeds = _problem(rng, n=1)
    with pytest.raises(ValueError):
        br.sample(S, x1, C, P, np.ones((1, 16, 16), np.float32), br.OracleDenoiser(S, x0),
                  br.SamplerConfig(steps=2), seeds)


def test_guided_sampling_runs(rng):
    x0, x1, C, P, seeds = _problem(rng, n=2)
    torch.manual_seed(0)
    wsc = WscModel(WscSpec(channels=4))
    nn.init.normal_(wsc.head.weight, std=0.5)
    M = np.ones((2, 16, 16), np.float32)
    for mode in ("autograd", "fd"):
        cfg = br.SamplerConfig(steps=3, grad_mode=mode, fd_probes=8)
        out = br.sample(S, x1, C, P, M, br.OracleDenoiser(S, x0), cfg, seeds, wsc=wsc)
        assert torch.all(torch.isfinite(out))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        br.SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        br.SamplerConfig(guidance_clamp=0)
    with pytest.raises(ValueError):
        br.SamplerConfig(expert_split=1.0)


# ------------------------------------------------------------------ training

def _data(rng, n=4, side=16, M=None):
    x0, x1 = _images(rng, n, 3, side, side)
    C = rng.uniform(0, 1, (n, 3, side, side)).astype(np.float32)
    P = np.ones((n, 1, side, side), np.float32)
    M = np.full((n, side, side), 0.5, np.float32) if M is None else M
    flag = np.zeros(n, np.float32)
    return br.BridgeData.from_arrays(x0, x1, C, P, M, flag)


def test_zero_lr_keeps_parameters(rng):
    torch.manual_seed(0)
    net = Denoiser(DenoiserSpec(base_channels=8, depth=2))
    before = {k: v.clone() for k, v in net.state_dict().items()}
    br.train_bridge(_data(rng), net, S, br.BridgeTrainConfig(iters=3, batch=2, lr=0.0), SeedSpec(0))
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])


def _train_copy(data, cfg, seed=0):
    torch.manual_seed(seed)
    net = Denoiser(DenoiserSpec(base_channels=8, depth=1))
    nn.init.normal_(net.head.weight, std=0.1)
    br.train_bridge(data, net, S, cfg, SeedSpec(0))
    return net.state_dict()


def test_cosine_schedule_starts_at_base_lr(rng):
    data = _data(rng)
    base = dict(iters=1, batch=2, lr=1e-2, synth_fraction=0.0)
    a = _train_copy(data, br.BridgeTrainConfig(**base))
    b = _train_copy(data, br.BridgeTrainConfig(**base, lr_schedule="cosine"))
    assert all(torch.equal(a[k], b[k]) for k in a)
    base["iters"] = 3
    a = _train_copy(data, br.BridgeTrainConfig(**base))
    b = _train_copy(data, br.BridgeTrainConfig(**base, lr_schedule="cosine"))
    assert any(not torch.equal(a[k], b[k]) for k in a)
    with pytest.raises(ValueError):
        br.BridgeTrainConfig(lr_schedule="step")


def test_unit_map_items_see_all_ones(rng):
    data = _data(rng)
    ones = br.BridgeData(data.x0, data.x1, data.C, data.P, torch.ones_like(data.M), data.flag)
    torch.manual_seed(0)
    net = Denoiser(DenoiserSpec(base_channels=8, depth=1))
    nn.init.normal_(net.head.weight, std=0.1)
    cfg = br.BridgeTrainConfig(batch=2)
    idx = np.array([0, 1])
    t = np.array([0.3, 0.7])
    eps = torch.randn(2, *data.x0.shape[1:])
    flagged = br.bridge_loss(net, S, data, idx, t, eps, cfg, unit_map=np.array([True, True]))
    assert flagged.item() == br.bridge_loss(net, S, ones, idx, t, eps, cfg).item()
    plain = br.bridge_loss(net, S, data, idx, t, eps, cfg, unit_map=np.array([False, False]))
    assert plain.item() == br.bridge_loss(net, S, data, idx, t, eps, cfg).item() != flagged.item()
    with pytest.raises(ValueError):
        br.BridgeTrainConfig(unit_map_fraction=1.5)


def test_nan_loss_aborts(rng):
    data = _data(rng)
    data.x0[0, 0, 0, 0] = float("nan")
    net = Denoiser(DenoiserSpec(base_channels=8, depth=1))
    with pytest.raises(NumericError):
        br.train_bridge(data, net, S, br.BridgeTrainConfig(iters=5, batch=4, synth_fraction=0.0), SeedSpec(0))


def test_overfit_single_sample():
    from errbridge.datagen import CorpusSpec, ToySceneSpec, generate_items

    item = generate_items(CorpusSpec(n=1, scene=ToySceneSpec(side=16), test_fraction=0.0), SeedSpec(0))[0]
    M = np.full((1, 16, 16), 0.5, np.float32)
    data = br.BridgeData.from_arrays(item.x0[None], item.x1[None], item.C[None], item.P[None], M, np.zeros(1))
    torch.manual_seed(0)
    net = Denoiser(DenoiserSpec(base_channels=16, depth=2))
    cfg = br.BridgeTrainConfig(iters=300, batch=8, lr=2e-3, synth_fraction=0.0)
    # fixed probe: stratified times, fixed noise
    t = (np.arange(64) + 0.5) / 64
    eps = torch.from_numpy(np.random.default_rng(7).standard_normal((64, 3, 16, 16), dtype=np.float32))
    idx = np.zeros(64, dtype=int)

    def probe():
        with torch.no_grad():
            return br.bridge_loss(net, S, data, idx, t, eps, cfg).item()

    initial = probe()
    hist = br.train_bridge(data, net, S, cfg, SeedSpec(5))
    assert probe() < 0.1 * initial
    assert np.mean(hist[-50:]) < 0.1 * np.mean(hist[:10])


def test_batch_mix_fraction():
    flag = np.zeros(100, np.float32)
    flag[:15] = 1
    data = br.BridgeData(*(torch.zeros(100, 1, 2, 2),) * 5, torch.from_numpy(flag))
    idx = br.draw_batch(data, br.BridgeTrainConfig(batch=20), np.random.default_rng(0))
    assert len(idx) == 20 and (idx < 15).sum() == 3


def test_init_loss_is_mean_squared_target(rng):
    """With the zero output head the per-batch loss is exactly E||target||^2 of that batch."""
    data = _data(rng, n=6, M=rng.uniform(size=(6, 16, 16)).astype(np.float32))
    net = Denoiser(DenoiserSpec(base_channels=8, depth=2))
    cfg = br.BridgeTrainConfig(batch=4, synth_fraction=0.0)
    g = np.random.default_rng(0)
    for _ in range(5):
        idx = br.draw_batch(data, cfg, g)
        t = g.uniform(1e-4, 1 - 1e-4, size=4)
        eps = torch.from_numpy(g.standard_normal((4, 3, 16, 16), dtype=np.float32))
        with torch.no_grad():
            loss = br.bridge_loss(net, S, data, idx, t, eps, cfg)
        tgt = br.training_target(S, data.x0[idx], data.x1[idx], data.M[idx], t, eps)
        assert loss.item() == pytest.approx(float(torch.mean(tgt.double() ** 2)), rel=1e-6)


def test_init_loss_monte_carlo_matches_quadrature():
    """Direct Monte Carlo of the initial loss over (item, t, pixel, eps) on the toy corpus."""
    from scipy.integrate import quad

    from errbridge.datagen import CorpusSpec, corpus_from_items, generate_items

    corp = corpus_from_items(generate_items(CorpusSpec(n=24), SeedSpec(0))).train()
    rng = np.random.default_rng(0)
    M = rng.uniform(size=corp.x0.shape[:1] + corp.x0.shape[-2:])
    diff = (corp.x1 - corp.x0).astype(np.float64)
    lo, hi = br.TIME_MARGIN, 1 - br.TIME_MARGIN

    def drift2(t):
        c = sch.bridge_coeffs(S, t)
        return c.w1 ** 2 / c.var

    e_drift = quad(drift2, lo, hi, points=[0.5, 0.99, 0.999], limit=200)[0] / (hi - lo)
    expected = e_drift * np.mean(diff ** 2) + np.mean(M ** 2)

    n = 4_000_000
    i = rng.integers(0, len(corp), n)
    c = rng.integers(0, 3, n)
    y = rng.integers(0, diff.shape[-2], n)
    x = rng.integers(0, diff.shape[-1], n)
    t = rng.uniform(lo, hi, n)
    coef = sch.bridge_coeffs(S, t)
    tgt = coef.w1 / np.sqrt(coef.var) * diff[i, c, y, x] + M[i, y, x] * rng.standard_normal(n)
    assert abs(np.mean(tgt ** 2) / expected - 1) < 0.05
