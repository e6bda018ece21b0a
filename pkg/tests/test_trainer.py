import json

import pytest
import torch

from debug_osdg.content import AllForeground
from debug_osdg.core import ConfigError, DataError, TrainConfig, make_label_space
from debug_osdg.data import SyntheticSpec, generate_synthetic, relabel
from debug_osdg.evaluation import evaluate_domain
from debug_osdg.trainer import (
    VARIANTS,
    AblationSwitches,
    build_model,
    compute_losses,
    load_checkpoint,
    lr_at_epoch,
    make_optimizer,
    prepare_training_tensors,
    run_training,
    train_step,
)

KNOWN = ("circle", "square", "triangle", "cross")
LS = make_label_space(KNOWN)


@pytest.fixture(scope="module")
def toy():
    recs = relabel(generate_synthetic(SyntheticSpec(samples_per_class_per_domain=16, image_size=16, seed=3)), LS)
    src = [r for r in recs if r.domain == "photo" and LS.is_known(r.class_name)]
    tgt = [r for r in recs if r.domain == "cartoon"]
    return src, tgt


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=16, lr=0.01, widths=(8, 16), seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_switch_invariants():
    with pytest.raises(ConfigError):
        AblationSwitches(use_bs=False, use_gpsa=False, use_kd=True)
    with pytest.raises(ConfigError):
        AblationSwitches(use_eova=True, use_ova_at_all=False)


def test_ablate_flags():
    s = AblationSwitches.without(["bs", "gpsa"])
    assert not s.use_bs and not s.use_gpsa and not s.use_kd and s.use_eova
    assert AblationSwitches.without(["ova"]).use_eova is False
    with pytest.raises(ConfigError):
        AblationSwitches.without(["dropout"])


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at_epoch(cfg, 0) == pytest.approx(0.001)
    assert lr_at_epoch(cfg, 24) == pytest.approx(0.0001)
    assert lr_at_epoch(cfg, 45) == pytest.approx(0.00001)


def _one_batch(src, provider=None):
    tensors = prepare_training_tensors(src, LS, provider)
    return tensors.batch(torch.arange(16))


def test_all_switches_off_is_plain_ce(toy):
    src, _ = toy
    torch.manual_seed(0)
    model = build_model(small_cfg(), 4).train()
    _, bd = compute_losses(model, _one_batch(src), small_cfg(), VARIANTS["ce"])
    assert bd.kd == 0.0 and bd.eova == 0.0 and bd.total == bd.ce


def test_identical_branches_give_zero_kd(toy):
    src, _ = toy
    torch.manual_seed(0)
    model = build_model(small_cfg(), 4).train()
    switches = AblationSwitches(use_bs=True, use_gpsa=False, use_kd=True, use_eova=False, use_ova_at_all=False)
    _, bd = compute_losses(model, _one_batch(src, AllForeground()), small_cfg(), switches)
    assert bd.kd == pytest.approx(0.0, abs=1e-6)


def test_breakdown_identity_in_log(toy):
    src, _ = toy
    cfg = small_cfg(lambda1=0.7, lambda2=0.3)
    res = run_training(src, LS, cfg, VARIANTS["debug"])
    for r in res.log:
        assert r["total"] == pytest.approx(r["ce"] + 0.7 * r["eova"] + 0.3 * r["kd"], rel=1e-9)


def test_unknown_samples_are_refused(toy):
    _, tgt = toy
    with pytest.raises(DataError):
        prepare_training_tensors(tgt, LS)


def test_empty_class_is_refused(toy):
    src, _ = toy
    with pytest.raises(DataError, match="circle"):
        run_training([r for r in src if r.class_name != "circle"], LS, small_cfg())


def test_zero_epochs(toy, tmp_path):
    src, _ = toy
    res = run_training(src, LS, small_cfg(epochs=0), out_dir=tmp_path)
    assert res.log == [] and res.checkpoint.epoch == 0
    assert (tmp_path / "final.pt").is_file()


def test_uncertainty_update_count(toy):
    src, _ = toy
    res = run_training(src, LS, small_cfg(epochs=2), VARIANTS["debug"])
    steps = len(res.log)
    for m in res.checkpoint.model.encoder.gpsa.values():
        assert m.uncertainty.update_count == 2 * steps


def test_smoke_trend(toy):
    src, _ = toy
    res = run_training(src, LS, small_cfg(epochs=3, batch_size=8), VARIANTS["debug"])
    per_epoch = {}
    for r in res.log:
        per_epoch.setdefault(r["epoch"], []).append(r["total"])
    mean = {e: sum(v) / len(v) for e, v in per_epoch.items()}
    assert mean[3] < mean[1]


def test_determinism_and_log_file(toy, tmp_path):
    src, _ = toy
    a = run_training(src, LS, small_cfg(), VARIANTS["debug"], out_dir=tmp_path / "a")
    b = run_training(src, LS, small_cfg(), VARIANTS["debug"], out_dir=tmp_path / "b")
    assert a.log == b.log
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    lines = [json.loads(x) for x in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert lines[-1]["summary"] and lines[-1]["steps"] == len(a.log)


def test_zero_lambdas_match_ce_baseline(toy):
    src, _ = toy
    ce = run_training(src, LS, small_cfg(), VARIANTS["ce"])
    zeroed = run_training(src, LS, small_cfg(lambda1=0.0, lambda2=0.0), AblationSwitches(False, False, False, True, True))
    assert [r["ce"] for r in ce.log] == [r["ce"] for r in zeroed.log]
    for p, q in zip(ce.checkpoint.model.state_dict().values(), zeroed.checkpoint.model.state_dict().values()):
        assert torch.equal(p, q)


def test_checkpoint_roundtrip(toy, tmp_path):
    src, tgt = toy
    res = run_training(src, LS, small_cfg(), VARIANTS["debug"], val_records=src[:8], out_dir=tmp_path)
    loaded = load_checkpoint(tmp_path / "final.pt", KNOWN)
    _, d1 = evaluate_domain(res.checkpoint, tgt)
    _, d2 = evaluate_domain(loaded, tgt)
    assert d1 == d2
    assert (tmp_path / "best.pt").is_file()
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "final.pt", ("a", "b"))


def test_non_finite_loss_halts(toy):
    src, _ = toy
    cfg = small_cfg()
    torch.manual_seed(0)
    model = build_model(cfg, 4)
    batch = _one_batch(src)
    bad = batch._replace(x=batch.x * float("nan"))
    with pytest.raises(ArithmeticError):
        train_step(model, make_optimizer(model, cfg), bad, cfg, VARIANTS["ce"])
