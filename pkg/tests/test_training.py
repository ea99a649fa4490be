import math

import numpy as np
import pytest

from biskdet import numkernel as nk
from biskdet.detector import Detector, ModelConfig, load_checkpoint, save_checkpoint
from biskdet.experiments import model_config_for, toy_splits, toy_train_config
from biskdet.training import (
    NumericError, Optimizer, TrainConfig, epoch_batches, smoothed, train_model, train_step,
)


@pytest.fixture(scope="module")
def micro():
    """Toy splits shrunk to a few 32x32 images so full runs take seconds."""
    return toy_splits(image_size=(32, 32), sizes={"train": 12, "val": 4, "test": 4})


def micro_cfg(**kw):
    return toy_train_config(**{"epochs": 3, "batch_size": 4, "eval_every": 1, **kw})


def test_default_config_values():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.weight_decay, cfg.optimizer) == (350, 64, 0.0005, "sgd")
    assert cfg.loss == "focal" and (cfg.focal_alpha, cfg.focal_gamma) == (0.25, 2.0)
    for bad in ({"epochs": 0}, {"optimizer": "rmsprop"}, {"loss": "hinge"}, {"precision": "float16"},
                {"adaptive_fraction": 1.5}, {"weight_decay": -1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_cosine_schedule():
    model = Detector(ModelConfig(image_size=(32, 32)))
    opt = Optimizer(model, TrainConfig(epochs=4, learning_rate=0.2), total_steps=8)
    seen = []
    for _ in range(8):
        seen.append(opt.lr())
        opt.step_count += 1
    expect = [0.1 * (1 + math.cos(math.pi * s / 8)) for s in range(8)]
    np.testing.assert_allclose(seen, expect, rtol=1e-14)


def test_warmup_is_linear():
    model = Detector(ModelConfig(image_size=(32, 32)))
    opt = Optimizer(model, TrainConfig(epochs=10, learning_rate=0.1, warmup_epochs=2), total_steps=10)
    assert opt.lr() == pytest.approx(0.05)
    opt.step_count = 1
    assert opt.lr() == pytest.approx(0.1)


def _one_param_model():
    model = Detector(ModelConfig(image_size=(32, 32)))
    for _, p in model.named_parameters():
        p.grad = np.zeros_like(p.data)
    return model


def test_sgd_momentum_and_weight_decay_by_hand():
    model = _one_param_model()
    cfg = TrainConfig(epochs=1, learning_rate=0.1, momentum=0.9, weight_decay=0.01)
    opt = Optimizer(model, cfg, total_steps=1000)
    (name, p), = [(n, p) for n, p in model.named_parameters() if n.endswith("cls_w")]
    (bname, beta), = [(n, p) for n, p in model.named_parameters() if n.endswith("beta")][:1]
    w0, b0 = p.data.copy(), beta.data.copy()
    p.grad = np.ones_like(p.data)
    beta.grad = np.ones_like(beta.data)
    lr0 = opt.lr()
    opt.step()
    v1 = 1.0 + 0.01 * w0
    np.testing.assert_allclose(p.data, w0 - lr0 * v1, rtol=1e-13)
    # swish beta is excluded from weight decay
    np.testing.assert_allclose(beta.data, b0 - lr0 * 1.0, rtol=1e-13)
    w1 = p.data.copy()
    lr1 = opt.lr()
    opt.step()
    v2 = 0.9 * v1 + 1.0 + 0.01 * w1
    np.testing.assert_allclose(p.data, w1 - lr1 * v2, rtol=1e-13)


def test_adam_after_switch():
    model = _one_param_model()
    cfg = TrainConfig(epochs=1, optimizer="sgd_then_adaptive", adaptive_fraction=0.0, learning_rate=0.1,
                      adaptive_lr=0.003, weight_decay=0.0)
    opt = Optimizer(model, cfg, total_steps=100)
    (_, p), = [(n, p) for n, p in model.named_parameters() if n.endswith("cls_w")]
    w0 = p.data.copy()
    p.grad = np.full_like(p.data, 2.0)
    lr = opt.step()
    # first bias-corrected Adam step moves each weight by about lr_adaptive
    np.testing.assert_allclose(p.data, w0 - lr * 0.03 * 2.0 / (2.0 + 1e-8), rtol=1e-12)
    assert opt.switch_step == 0 and opt.adam_steps == 1


def test_epoch_batches_cover_each_epoch():
    for epoch in range(3):
        batches = epoch_batches(10, 4, seed=1, epoch=epoch)
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    assert not np.array_equal(epoch_batches(10, 10, 1, 0)[0], epoch_batches(10, 10, 1, 1)[0])


def test_smoothing_is_moving_average():
    values = [4.0, 2.0, 3.0, 1.0]
    out = smoothed(values)
    assert len(out) == 4 and out[0] == pytest.approx(4.0)
    assert np.all(np.diff(smoothed([5.0, 4.0, 3.0, 2.0, 1.0])) <= 0)


def test_smoke_run_learns(micro, tmp_path):
    res = train_model(micro_cfg(epochs=6), micro.train, micro.val, model=Detector(micro.model_cfg),
                      out_dir=tmp_path)
    losses = [r["loss"] for r in res.curves]
    assert all(np.isfinite(losses)) and losses[-1] < losses[0]
    assert all("val_map" in r for r in res.curves)
    header = (tmp_path / "curves.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,lr,loss,cls,box,val_map")
    assert (tmp_path / "final.ckpt").exists()


def test_resume_reproduces_uninterrupted_run(micro, tmp_path):
    cfg = micro_cfg(epochs=4, checkpoint_every=2)
    full = train_model(cfg, micro.train, model=Detector(micro.model_cfg), out_dir=tmp_path / "a")
    train_model(cfg, micro.train, model=Detector(micro.model_cfg), out_dir=tmp_path / "b", stop_after=2)
    resumed = train_model(cfg, micro.train, out_dir=tmp_path / "c", resume=tmp_path / "b" / "final.ckpt")
    a, b = full.model.state_dict(), resumed.model.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "c" / "final.ckpt").read_bytes()


def test_same_seed_same_checkpoint_bytes(micro, tmp_path):
    for name in ("x", "y"):
        train_model(micro_cfg(epochs=2, adversarial=True), micro.train, model=Detector(micro.model_cfg),
                    out_dir=tmp_path / name)
    assert (tmp_path / "x" / "final.ckpt").read_bytes() == (tmp_path / "y" / "final.ckpt").read_bytes()


def test_checkpoint_forward_equivalence(micro, tmp_path):
    model = Detector(micro.model_cfg)
    save_checkpoint(tmp_path / "m.ckpt", model, epoch=3)
    back, opt, meta = load_checkpoint(tmp_path / "m.ckpt")
    x = micro.test.images[:2]
    a, b = model(x), back(x)
    assert a.logits.data.tobytes() == b.logits.data.tobytes()
    assert a.offsets.data.tobytes() == b.offsets.data.tobytes()
    assert meta["epoch"] == 3 and opt == {}
    assert back.cfg == model.cfg


def test_checkpoint_rejects_tampered_config(tmp_path):
    from biskdet import blob

    save_checkpoint(tmp_path / "m.ckpt", Detector(ModelConfig(image_size=(32, 32))))
    tensors, meta = blob.load(tmp_path / "m.ckpt")
    meta["config"]["box_scale"] = 0.2
    blob.save(tmp_path / "bad.ckpt", tensors, meta)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_nonfinite_loss_raises(micro):
    model = Detector(micro.model_cfg)
    model.head.cls_w.data[...] = np.nan
    opt = Optimizer(model, micro_cfg(), 10)
    d = micro.train
    with pytest.raises(NumericError):
        train_step(model, opt, d.images[:2], d.labels[:2], d.targets[:2], micro_cfg())


def test_float32_training_keeps_dtype(micro):
    res = train_model(micro_cfg(epochs=1, precision="float32"), micro.train, model=Detector(micro.model_cfg))
    assert all(p.data.dtype == np.float32 for p in res.model.parameters())


def test_model_config_from_training_statistics():
    imgs = np.random.default_rng(0).uniform(size=(3, 32, 32, 3))
    cfg = model_config_for(imgs, [np.array([[0.5, 0.5, 0.25, 0.5]])] * 3, k=1)
    np.testing.assert_allclose(cfg.input_mean, imgs.mean(axis=(0, 1, 2)))
    assert cfg.anchors.aspect_ratios == [2.0]


def test_model_gradient_matches_finite_difference(micro):
    """Whole detector loss against central differences on a handful of weights."""
    from dataclasses import replace

    model = Detector(replace(micro.model_cfg, head_depth=2))
    d = micro.train
    x, lab, tgt = d.images[:2], d.labels[:2], d.targets[:2]

    def loss(_t):
        out = model(x)
        return model.loss(out, lab, tgt, kind="focal")[0]

    params = dict(model.named_parameters())
    for name in ("backbone.stages.0.0.beta", "backbone.stages.2.0.depthwise", "fusion.blocks.0.skips.1",
                 "head.beta.1", "head.box_b"):
        # entries with gradients near 1e-6 need the larger step to stay clear of roundoff
        rep = nk.finite_difference_check(loss, params[name], h=1e-5)
        assert rep.passed, (name, rep.max_rel_error)
