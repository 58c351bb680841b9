import math
import shutil

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from panoptic_drive.config import LossWeights, TrainConfig
from panoptic_drive.data import SampleCache, load_manifest
from panoptic_drive.data.pipeline import collate, train_sample
from panoptic_drive.model import PanopticNet
from panoptic_drive.training import (
    NonFiniteLossError,
    build_optimizer,
    compute_loss,
    evaluate,
    fit,
    kmeans_anchors,
    load_checkpoint,
    load_model,
    lr_at,
    read_log,
    save_checkpoint,
    set_lr,
    train_step,
)

from conftest import small_model_config, small_run_config


# --- schedule -------------------------------------------------------------------

def closed_form_lr(step, cfg: TrainConfig, spe):
    warm = cfg.warmup_epochs * spe
    total = cfg.total_epochs * spe
    if step < warm:
        return cfg.initial_lr * step / warm
    lo = cfg.initial_lr * cfg.final_lr_fraction
    x = min((step - warm) / (total - 1 - warm), 1.0)
    return lo + 0.5 * (cfg.initial_lr - lo) * (1 + math.cos(math.pi * x))


def test_lr_boundaries():
    cfg = TrainConfig()
    spe = 25
    assert lr_at(0, cfg, spe) == 0.0
    assert lr_at(3 * spe, cfg, spe) == pytest.approx(0.01, abs=1e-15)
    warm, last = 3 * spe, cfg.total_epochs * spe - 1
    mid = warm + (last - warm) / 2
    assert lr_at(int(mid), cfg, spe) == pytest.approx(0.01 * (1 + 0.01) / 2, rel=1e-3)
    assert lr_at(last, cfg, spe) == pytest.approx(0.01 * 0.01, abs=1e-15)


@settings(max_examples=100)
@given(st.integers(1, 5), st.integers(6, 60), st.integers(1, 40), st.floats(0.001, 1.0))
def test_lr_continuous_and_non_increasing_after_warmup(warm, total, spe, frac):
    cfg = TrainConfig(warmup_epochs=warm, total_epochs=total, final_lr_fraction=frac)
    w = warm * spe
    # The warmup ramp reaches the cosine start with a jump no larger than one ramp increment.
    assert abs(lr_at(w, cfg, spe) - lr_at(w - 1, cfg, spe)) <= cfg.initial_lr / w + 1e-15
    lrs = [lr_at(s, cfg, spe) for s in range(w, total * spe)]
    assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))
    ramp = [lr_at(s, cfg, spe) for s in range(w + 1)]
    assert all(b >= a for a, b in zip(ramp, ramp[1:]))


def test_lr_matches_closed_form():
    cfg = TrainConfig(total_epochs=40, warmup_epochs=3, final_lr_fraction=0.05)
    spe = 17
    steps = np.random.default_rng(0).integers(0, 40 * spe, 100)
    for s in steps:
        assert abs(lr_at(int(s), cfg, spe) - closed_form_lr(int(s), cfg, spe)) < 1e-12


def test_lr_periodic_restarts():
    cfg = TrainConfig(restart_kind="periodic", restart_period_epochs=2, total_epochs=10)
    assert lr_at(0, cfg, 10) == lr_at(20, cfg, 10) == lr_at(40, cfg, 10) == cfg.initial_lr
    assert lr_at(19, cfg, 10) < lr_at(20, cfg, 10)


# --- optimizer --------------------------------------------------------------------

def test_sgd_matches_hand_rolled_two_parameter_model():
    torch.manual_seed(0)
    x = torch.linspace(-1, 1, 16).view(-1, 1).double()
    y = 3 * x - 0.5
    model = torch.nn.Linear(1, 1).double()
    cfg = TrainConfig(total_epochs=10, warmup_epochs=1)
    opt = build_optimizer(model, cfg)
    w, b = model.weight.item(), model.bias.item()
    vw = vb = None
    for step in range(40):
        lr = lr_at(step, cfg, 4)
        set_lr(opt, lr)
        opt.zero_grad()
        ((model(x) - y) ** 2).mean().backward()
        opt.step()
        # Reference: full-batch gradient, decay on the weight only, heavy-ball momentum.
        r = (w * x + b - y).squeeze(1)
        gw = float((2 * r * x.squeeze(1)).mean()) + cfg.weight_decay * w
        gb = float((2 * r).mean())
        vw = gw if vw is None else cfg.momentum * vw + gw
        vb = gb if vb is None else cfg.momentum * vb + gb
        w, b = w - lr * vw, b - lr * vb
        assert model.weight.item() == pytest.approx(w, rel=1e-12, abs=1e-14)
        assert model.bias.item() == pytest.approx(b, rel=1e-12, abs=1e-14)


def test_weight_decay_shrinks_weights_under_zero_gradient():
    torch.manual_seed(0)
    model = PanopticNet(small_model_config())
    opt = build_optimizer(model, TrainConfig())
    set_lr(opt, 0.01)
    norms, bias_before = [], model.detect.convs[0].bias.detach().clone()
    for _ in range(5):
        opt.zero_grad()
        (sum(p.sum() for p in model.parameters()) * 0.0).backward()
        opt.step()
        norms.append(sum(float(p.detach().norm() ** 2) for p in model.parameters() if p.ndim > 1))
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert torch.equal(model.detect.convs[0].bias, bias_before)


@pytest.fixture(scope="module")
def train_cache(synth_root):
    root, _ = synth_root
    return SampleCache(load_manifest(root, "train"))


def _batch(cache, n=4, epoch=0):
    cfg = small_run_config(use_mosaic=False, use_mixup=False)
    return collate([train_sample(cache, i, epoch, cfg.model, cfg.train) for i in range(n)])


def test_zero_lr_leaves_parameters_unchanged(train_cache):
    torch.manual_seed(0)
    model = PanopticNet(small_model_config())
    before = {k: v.detach().clone() for k, v in model.named_parameters()}
    opt = build_optimizer(model, TrainConfig())
    train_step(model, _batch(train_cache), LossWeights(), 0.0, opt)
    assert all(torch.equal(before[k], v) for k, v in model.named_parameters())


def test_fixed_batch_loss_decreases(train_cache):
    torch.manual_seed(0)
    model = PanopticNet(small_model_config())
    opt = build_optimizer(model, TrainConfig())
    batch = _batch(train_cache)
    totals = [train_step(model, batch, LossWeights(), 0.01, opt).total for _ in range(50)]
    assert np.mean(totals[-10:]) < 0.6 * np.mean(totals[:5])
    assert totals[-1] < totals[0]


def test_non_finite_loss_raises(train_cache):
    torch.manual_seed(0)
    model = PanopticNet(small_model_config())
    with torch.no_grad():
        model.lane.out.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as exc:
        train_step(model, _batch(train_cache, 2), LossWeights(), 0.01, build_optimizer(model, TrainConfig()))
    assert exc.value.component in ("lane_loss", "total")


def test_kmeans_anchors():
    rng = np.random.default_rng(0)
    assert kmeans_anchors(np.array([[10, 10]] * 20), rng) is None
    wh = rng.uniform(5, 100, (200, 2))
    anchors = kmeans_anchors(wh, rng)
    areas = [w * h for w, h in anchors.flat()]
    assert areas == sorted(areas)


# --- fit ------------------------------------------------------------------------------

def _fit_cfg(**kw):
    return small_run_config(total_epochs=2, warmup_epochs=1, batch_size=4, eval_every=100, **kw)


@pytest.fixture(scope="module")
def eight(synth_root):
    root, _ = synth_root
    return load_manifest(root, "train").subset(range(8))


@pytest.fixture(scope="module")
def fitted(eight, tmp_path_factory):
    wd = tmp_path_factory.mktemp("fit")
    return wd, fit(_fit_cfg(), eight, wd)


def test_fit_bookkeeping(fitted):
    wd, result = fitted
    rows = read_log(wd / "train_log.csv")
    assert len(rows) == 2 * (8 // 4)
    assert (wd / "last.pt").exists() and (wd / "best.pt").exists()
    assert (wd / "eval_0002.json").exists()
    w = LossWeights()
    for r in rows:
        expected = w.alpha1 * r["class"] + w.alpha2 * r["obj"] + w.alpha3 * r["box"] + r["drivable"] + r["lane"]
        assert r["total"] == pytest.approx(expected, rel=1e-6)


def test_fit_is_deterministic(fitted, eight, tmp_path):
    wd, first = fitted
    second = fit(_fit_cfg(), eight, tmp_path)
    assert [r["total"] for r in second.log_rows] == [r["total"] for r in first.log_rows]


def test_resume_matches_uninterrupted_run(fitted, eight, tmp_path):
    _, full = fitted
    part = fit(_fit_cfg(), eight, tmp_path, stop_after_epoch=0)
    assert len(part.log_rows) == 2
    ckpt = load_checkpoint(tmp_path / "last.pt")
    assert ckpt["epoch"] == 0 and ckpt["step"] == 2
    resumed = fit(_fit_cfg(), eight, tmp_path, resume=tmp_path / "last.pt")
    assert [r["total"] for r in resumed.log_rows] == [r["total"] for r in full.log_rows[2:]]
    assert len(read_log(tmp_path / "train_log.csv")) == 4


def test_checkpoint_round_trip(fitted, tmp_path):
    wd, result = fitted
    model, cfg = load_model(wd / "last.pt")
    assert cfg.model.stage_channels == (32, 64, 128, 256)
    assert model.anchors == result.model.anchors
    x = torch.rand(1, 3, 160, 256)
    result.model.eval()
    with torch.no_grad():
        assert torch.equal(model(x).drivable, result.model(x).drivable)
    bad = tmp_path / "bad.pt"
    torch.save({"schema": "other"}, bad)
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_save_load_then_step_equals_uninterrupted_step(train_cache, tmp_path):
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(0)
    cfg = small_run_config()
    model = PanopticNet(cfg.model)
    opt = build_optimizer(model, cfg.train)
    batch = _batch(train_cache)
    train_step(model, batch, cfg.loss, 0.01, opt)
    save_checkpoint(tmp_path / "c.pt", model, opt, cfg, 0, 1)
    a = train_step(model, batch, cfg.loss, 0.01, opt).total
    ck = load_checkpoint(tmp_path / "c.pt")
    model2 = PanopticNet(cfg.model)
    model2.load_state_dict(ck["model"])
    opt2 = build_optimizer(model2, cfg.train)
    opt2.load_state_dict(ck["optimizer"])
    b = train_step(model2, batch, cfg.loss, 0.01, opt2).total
    assert a == b
    for (k, p), (_, q) in zip(model.named_parameters(), model2.named_parameters()):
        assert torch.equal(p, q), k


def test_evaluate_deterministic_and_random_lane_iou_low(synth_root):
    root, _ = synth_root
    torch.manual_seed(0)
    model = PanopticNet(small_model_config())
    val = load_manifest(root, "val")
    a = evaluate(model, val, (256, 160))
    b = evaluate(model, val, (256, 160))
    assert a.dumps() == b.dumps()
    assert a.num_images == 4
    assert a.lane_iou < 0.05
    assert a.param_count > 0


def test_evaluate_empty_split(tmp_path, caplog):
    torch.manual_seed(0)
    with caplog.at_level("WARNING"):
        report = evaluate(PanopticNet(small_model_config()), load_manifest(tmp_path, "test"), (256, 160))
    assert report.num_images == 0


def test_compute_loss_breakdown_identity(train_cache):
    torch.manual_seed(0)
    model = PanopticNet(small_model_config())
    total, bd = compute_loss(model, _batch(train_cache, 2), LossWeights())
    w = LossWeights()
    f = bd.as_floats()
    assert float(total.detach()) == pytest.approx(
        w.alpha1 * f.class_loss + w.alpha2 * f.obj_loss + w.alpha3 * f.box_loss + f.drivable_loss + f.lane_loss, rel=1e-6
    )


def test_fit_rejects_empty_manifest(tmp_path):
    with pytest.raises(ValueError):
        fit(_fit_cfg(), load_manifest(tmp_path, "train"), tmp_path / "w")


def test_copy_of_run_dir_is_self_contained(fitted, tmp_path):
    wd, _ = fitted
    shutil.copytree(wd, tmp_path / "copy")
    model, cfg = load_model(tmp_path / "copy" / "best.pt")
    assert cfg.train.total_epochs == 2
