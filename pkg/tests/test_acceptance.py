"""Acceptance gate. Each test is one criterion; outcomes are listed in the terminal summary."""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from debug_osdg.commands import run_ablation
from debug_osdg.core import TrainConfig, make_label_space, read_config_file, split_config
from debug_osdg.data import SyntheticSpec, generate_synthetic, relabel, stratified_split
from debug_osdg.evaluation import compute_metrics, decide, entropy_threshold, evaluate_domain
from debug_osdg.losses import ce_loss, eova_loss, kd_loss, ova_loss
from debug_osdg.model import DebugNet, binary_probs
from debug_osdg.style import (
    EPS,
    BatchStatVariance,
    GlobalUncertainty,
    batch_stat_variance,
    instance_stats,
    restyle,
    sample_perturbation,
    update_global,
)
from debug_osdg.trainer import AblationSwitches, TrainBatch, compute_losses, load_checkpoint, run_training

import oracles

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk_ablation.yaml"
LS4 = make_label_space(["dog", "elephant", "giraffe", "guitar"])


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def rel_close(a, b, rel, floor=1e-12):
    return abs(a - b) <= rel * max(abs(a), abs(b), floor)


@pytest.mark.criterion("C1", "equation oracles on 100 seeded inputs each")
def test_c1_equation_oracles(request):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 100
    worst = {k: 0.0 for k in ("stats", "batch_var", "update", "kd", "ova", "eova")}
    for _ in range(n):
        b, c, h, w = (int(v) for v in rng.integers([2, 1, 2, 2], [6, 5, 6, 6]))
        z = rng.normal(rng.normal(), rng.uniform(0.2, 3.0), size=(b, c, h, w))
        mu_o, var_o = oracles.two_pass_stats(z)
        stats = instance_stats(torch.from_numpy(z))
        for i in range(b):
            for j in range(c):
                assert rel_close(stats.mu[i, j].item(), mu_o[i, j], 1e-6)
                assert rel_close(stats.var[i, j].item(), var_o[i, j], 1e-6)
                assert rel_close(stats.sigma[i, j].item(), math.sqrt(var_o[i, j] + EPS), 1e-6)

        bsv = batch_stat_variance(stats)
        sig_o = np.sqrt(var_o + EPS)
        for j in range(c):
            assert rel_close(bsv.var_mu[j].item(), oracles.loop_batch_variance(list(mu_o[:, j])), 1e-6)
            assert rel_close(bsv.var_sigma[j].item(), oracles.loop_batch_variance(list(sig_o[:, j])), 1e-6)

        alpha = float(rng.uniform(0.05, 0.95))
        u0m, u0s = rng.uniform(0, 2, c), rng.uniform(0, 2, c)
        gu = GlobalUncertainty(torch.from_numpy(u0m.copy()), torch.from_numpy(u0s.copy()), alpha)
        update_global(gu, bsv)
        for j in range(c):
            exp_m = alpha * u0m[j] + (1 - alpha) * oracles.loop_batch_variance(list(mu_o[:, j]))
            exp_s = alpha * u0s[j] + (1 - alpha) * oracles.loop_batch_variance(list(sig_o[:, j]))
            assert rel_close(gu.u_mu[j].item(), exp_m, 1e-6) and rel_close(gu.u_sigma[j].item(), exp_s, 1e-6)

        tau = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        s = rng.normal(size=(b, c + 1, h, w)) * 2
        t = rng.normal(size=(b, c + 1, h, w)) * 2
        got = kd_loss(torch.from_numpy(s), torch.from_numpy(t), tau).item()
        exp = sum(oracles.scalar_kd(s[i].tolist(), t[i].tolist(), tau) for i in range(b)) / b
        worst["kd"] = max(worst["kd"], abs(got - exp))

        k = int(rng.integers(2, 8))
        labels = rng.integers(0, k, size=b)
        pp, pn = rng.uniform(0, 1, (b, k)), rng.uniform(0, 1, (b, k))
        got = ova_loss(torch.from_numpy(pp), torch.from_numpy(pn), torch.from_numpy(labels)).item()
        exp = sum(oracles.scalar_ova(pp[i].tolist(), pn[i].tolist(), int(labels[i])) for i in range(b)) / b
        worst["ova"] = max(worst["ova"], abs(got - exp))

        ep, en, im = (rng.uniform(0, 1, (b, k)) for _ in range(3))
        got = eova_loss(*(torch.from_numpy(a) for a in (ep, en, im)), torch.from_numpy(labels)).item()
        exp = sum(oracles.scalar_eova(ep[i].tolist(), en[i].tolist(), im[i].tolist(), int(labels[i])) for i in range(b)) / b
        worst["eova"] = max(worst["eova"], abs(got - exp))

    elapsed = time.perf_counter() - start
    detail(request, f"max abs loss error kd={worst['kd']:.1e} ova={worst['ova']:.1e} eova={worst['eova']:.1e}; {elapsed:.1f}s")
    assert max(worst["kd"], worst["ova"], worst["eova"]) <= 1e-6
    assert elapsed < 30


@pytest.mark.criterion("C2", "style identity and moment property")
def test_c2_gpsa_identity_and_moments(request):
    g = torch.Generator().manual_seed(11)
    worst_id, worst_mom = 0.0, 0.0
    for i in range(100):
        b, c = 2 + i % 4, 1 + i % 6
        z = torch.randn(b, c, 5, 6, generator=g, dtype=torch.float64) * (0.5 + i % 3) + (i % 5 - 2)
        stats = instance_stats(z)
        gu_rand = GlobalUncertainty(torch.rand(c, generator=g, dtype=torch.float64), torch.rand(c, generator=g, dtype=torch.float64))
        zero_u = sample_perturbation(stats, GlobalUncertainty.zeros(c, dtype=torch.float64), g)
        zero_xi = sample_perturbation(stats, gu_rand, xi_mu=torch.zeros(b, c, dtype=torch.float64), xi_sigma=torch.zeros(b, c, dtype=torch.float64))
        for pert in (zero_u, zero_xi):
            worst_id = max(worst_id, (restyle(z, stats, pert) - z).abs().max().item())
        pert = sample_perturbation(stats, gu_rand, g)
        out = instance_stats(restyle(z, stats, pert))
        worst_mom = max(worst_mom, (out.mu - pert.beta).abs().max().item(), (out.sigma - pert.gamma.abs()).abs().max().item())
    detail(request, f"identity max-abs {worst_id:.1e}, moment max-abs {worst_mom:.1e}")
    assert worst_id <= 1e-5
    assert worst_mom <= 1e-4


@pytest.mark.criterion("C3", "moving-average closed form")
def test_c3_moving_average(request):
    const = torch.tensor([0.3, 1.7, 4.0], dtype=torch.float64)
    worst = 0.0
    for alpha in (0.5, 0.6, 0.7, 0.8, 0.9):
        gu = GlobalUncertainty.zeros(3, alpha, torch.float64)
        for n in range(1, 201):
            update_global(gu, BatchStatVariance(const, const))
            assert torch.isfinite(gu.u_mu).all() and torch.isfinite(gu.u_sigma).all()
            expected = const * (1 - alpha**n)
            worst = max(worst, (gu.u_mu - expected).abs().max().item(), (gu.u_sigma - expected).abs().max().item())
    detail(request, f"max-abs deviation {worst:.1e} over n<=200")
    assert worst <= 1e-9


def _grad_net():
    torch.manual_seed(5)
    net = DebugNet(3, widths=(4,), gpsa_stages=()).double().train()
    return net


def _grad_batch():
    g = torch.Generator().manual_seed(6)
    x = torch.rand(4, 3, 6, 6, generator=g, dtype=torch.float64)
    mask = (torch.rand(4, 6, 6, generator=g) > 0.4).double()
    x_bs = x * mask[:, None]
    x_edge = torch.rand(4, 3, 6, 6, generator=g, dtype=torch.float64)
    return TrainBatch(x, x_bs, x_edge, torch.tensor([0, 1, 2, 1]))


def _loss_fns(net, batch):
    """Name -> (objective to differentiate, objective to finite-difference).

    The distillation teacher is a stop-gradient target, so its finite-difference
    counterpart holds the teacher map fixed at the unperturbed parameters.
    """
    cfg = TrainConfig(lambda1=0.7, lambda2=0.4, tau=2.0, gpsa_stages=())
    switches = AblationSwitches(use_bs=True, use_gpsa=False, use_kd=True, use_eova=True, use_ova_at_all=True)
    with torch.no_grad():
        teacher = net(batch.x_bs).fmap.clone()

    def ce():
        return ce_loss(net(batch.x).logits, batch.y)

    def kd():
        return kd_loss(net(batch.x).fmap, net(batch.x_bs).fmap, cfg.tau)

    def kd_fixed():
        return kd_loss(net(batch.x).fmap, teacher, cfg.tau)

    def eova():
        _, img_neg = binary_probs(net(batch.x).binary_logits)
        e_pos, e_neg = binary_probs(net(batch.x_edge).binary_logits)
        return eova_loss(e_pos, e_neg, img_neg, batch.y)

    def total():
        return compute_losses(net, batch, cfg, switches)[0]

    def total_fixed():
        return total() - cfg.lambda2 * kd() + cfg.lambda2 * kd_fixed()

    return {"ce": (ce, ce), "kd": (kd, kd_fixed), "eova": (eova, eova), "all": (total, total_fixed)}


@pytest.mark.criterion("C4", "gradient checks against central differences")
def test_c4_gradient_checks(request):
    start = time.perf_counter()
    net = _grad_net()
    params = list(net.parameters())
    n_params = sum(p.numel() for p in params)
    assert n_params <= 200
    batch = _grad_batch()
    h = 1e-4
    report = []
    for name, (fn, fn_numeric) in _loss_fns(net, batch).items():
        net.zero_grad()
        fn().backward()
        # heads a loss never touches have no grad; their true gradient is zero
        analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params]).clone()
        numeric = torch.zeros_like(analytic)
        k = 0
        with torch.no_grad():
            for p in params:
                # index in logical order so the result lines up with grad.reshape(-1)
                for idx in np.ndindex(*p.shape):
                    old = p[idx].item()
                    p[idx] = old + h
                    up = fn_numeric().item()
                    p[idx] = old - h
                    down = fn_numeric().item()
                    p[idx] = old
                    numeric[k] = (up - down) / (2 * h)
                    k += 1
        scale = torch.maximum(analytic.abs(), numeric.abs())
        # coordinates where both sides vanish agree trivially
        ok = ((analytic - numeric).abs() <= 1e-4 * scale) | (scale < 1e-10)
        frac = ok.double().mean().item()
        report.append(f"{name} {100 * frac:.1f}%")
        assert frac >= 0.95, f"{name}: only {100 * frac:.1f}% of coordinates agree"

    # the teacher branch receives no gradient from the distillation term
    out_s, out_t = net(batch.x), net(batch.x_bs)
    (g_teacher,) = torch.autograd.grad(kd_loss(out_s.fmap, out_t.fmap), out_t.fmap, allow_unused=True)
    assert g_teacher is None or torch.count_nonzero(g_teacher) == 0
    elapsed = time.perf_counter() - start
    detail(request, f"{n_params} params; " + ", ".join(report) + f"; {elapsed:.1f}s")
    assert elapsed < 120


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(-30, 30), min_size=4, max_size=4), min_size=1, max_size=16))
def _scaling_property(rows):
    logits = torch.tensor(rows, dtype=torch.float64)
    tiny = decide(logits * 1e-12, LS4)
    assert bool((tiny.decision == LS4.unknown_token).all())
    top2 = logits.topk(2, dim=1).values
    distinct = (top2[:, 0] - top2[:, 1]) > 1e-6
    huge = decide(logits[distinct] * 1e12, LS4)
    assert bool((huge.decision != LS4.unknown_token).all())
    assert torch.equal(huge.decision, logits[distinct].argmax(1))


@pytest.mark.criterion("C5", "inference contract and logit-scaling property")
def test_c5_inference_contract(request):
    assert entropy_threshold(4) == 1.0
    uniform = decide(torch.zeros(1, 4), LS4)
    assert uniform.entropy_bits.item() == pytest.approx(2.0) and uniform.decision.item() == 4
    onehot = decide(torch.tensor([[0.0, 0.0, 80.0, 0.0]]), LS4)
    assert onehot.entropy_bits.item() < 1e-9 and onehot.decision.item() == 2
    _scaling_property()
    detail(request, "threshold 1.0 bit; uniform->unknown; one-hot->known; scaling property on 60 batches")


def _fixture(acc_k, acc_u, k, n=10000):
    d, t = [], []
    hk, hu = round(acc_k * n / 100), round(acc_u * n / 100)
    for c in range(k):
        t += [c] * n
        d += [c] * hk + [k] * (n - hk)
    t += [k] * n
    d += [k] * hu + [0] * (n - hu)
    return d, t


@pytest.mark.criterion("C6", "metric fixtures (acc identity)")
def test_c6_metric_fixtures(request):
    photo = compute_metrics(*_fixture(48.78, 58.05, 4), LS4)
    office = compute_metrics(*_fixture(75.04, 65.28, 10), make_label_space([f"c{i}" for i in range(10)]))
    detail(request, f"photo acc={photo.acc:.3f}, office31 acc={office.acc:.3f}")
    assert photo.acc == pytest.approx(50.63, abs=0.01)
    assert office.acc == pytest.approx(74.15, abs=0.01)


@pytest.mark.criterion("C7", "desk-scale ablation ordering")
def test_c7_desk_ablation(request, tmp_path):
    start = time.perf_counter()
    run, cfg = split_config(read_config_file(DESK_CONFIG))
    spec = SyntheticSpec(samples_per_class_per_domain=390, seed=0)
    ls = make_label_space(spec.known_classes)
    records = relabel(generate_synthetic(spec), ls)
    src = [r for r in records if r.domain == run.source_domain and ls.is_known(r.class_name)]
    targets = {d: [r for r in records if r.domain == d] for d in run.target_domains}
    n_train = len(stratified_split(src, cfg.val_fraction, 0)[0])
    jobs = max(1, min(3, os.cpu_count() or 1))
    _, table = run_ablation(src, targets, ls, cfg, ["ce", "de_ova", "debug"], [0, 1, 2], out_dir=tmp_path, jobs=jobs)
    for row in table:
        print({k: (round(v, 2) if isinstance(v, float) else v) for k, v in row.items()})
    mean = {r["variant"]: r for r in table if r["seed"] == "mean"}
    hs_gain = mean["debug"]["hs"] - mean["ce"]["hs"]
    acc_u_gain = mean["debug"]["acc_u"] - mean["de_ova"]["acc_u"]
    elapsed = time.perf_counter() - start
    detail(
        request,
        f"{n_train} train images; hs ce={mean['ce']['hs']:.2f} de_ova={mean['de_ova']['hs']:.2f} debug={mean['debug']['hs']:.2f}; "
        f"acc_u edge vs original {mean['debug']['acc_u']:.2f} vs {mean['de_ova']['acc_u']:.2f}; {elapsed / 60:.1f} min",
    )
    assert hs_gain >= 5.0
    assert acc_u_gain >= 3.0
    assert elapsed <= 30 * 60


@pytest.mark.criterion("C8", "determinism and checkpoint persistence")
def test_c8_determinism_and_persistence(request, tmp_path):
    spec = SyntheticSpec(samples_per_class_per_domain=40, seed=4)
    ls = make_label_space(spec.known_classes)
    records = relabel(generate_synthetic(spec), ls)
    src = [r for r in records if r.domain == "photo" and ls.is_known(r.class_name)]
    tgt = [r for r in records if r.domain == "mosaic"]
    train, val = stratified_split(src, 0.1, 0)
    cfg = TrainConfig(epochs=3, lr=0.01, seed=9)
    a = run_training(train, ls, cfg, AblationSwitches(), val, out_dir=tmp_path / "a")
    b = run_training(train, ls, cfg, AblationSwitches(), val, out_dir=tmp_path / "b")
    assert a.log == b.log and len(a.log) > 0
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    _, live = evaluate_domain(a.checkpoint, tgt, tmp_path / "live.jsonl")
    _, loaded = evaluate_domain(load_checkpoint(tmp_path / "a" / "final.pt"), tgt, tmp_path / "loaded.jsonl")
    assert live == loaded
    assert (tmp_path / "live.jsonl").read_bytes() == (tmp_path / "loaded.jsonl").read_bytes()
    detail(request, f"{len(a.log)} logged steps identical; {len(live)} dump records bit-identical")
