import json
from dataclasses import replace

import pytest
import torch

from mumis.data import load_shapes20_dataset
from mumis.modelzoo import (
    DESK_ARCH,
    ModelCheckpoint,
    TrainConfig,
    TrainingError,
    build_model,
    evaluate_accuracy,
    predict_logits,
    train,
)

from helpers import FORGET_CLASS, blobs

FAST = TrainConfig(epochs=3, lr=0.05, batch_size=32, lr_milestones=[2])


@pytest.mark.parametrize("arch,kw", [("convnet", {"width": 4}), ("convnet", {"width": 4, "activation": "tanh"}), ("mlp", {}), ("linear", {})])
def test_build_model_shapes(arch, kw):
    m = build_model(arch, (1, 8, 8), 7, **kw)
    assert m(torch.zeros(2, 1, 8, 8)).shape == (2, 7)


def test_build_model_errors():
    with pytest.raises(ValueError):
        build_model("resnet", (1, 8, 8), 3)
    with pytest.raises(ValueError):
        build_model("convnet", (1, 8, 8), 3, activation="swish")


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(lr=0), dict(momentum=1.0), dict(weight_decay=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_is_deterministic():
    ds = blobs()
    a = train(ds, ds.train_idx, FAST, "mlp")
    b = train(ds, ds.train_idx, FAST, "mlp")
    assert a.digest() == b.digest()
    c = train(ds, ds.train_idx, replace(FAST, seed=1), "mlp")
    assert c.digest() != a.digest()


def test_train_learns_blobs():
    ds = blobs()
    ckpt = train(ds, ds.train_idx, FAST, "mlp")
    assert evaluate_accuracy(ckpt, ds, ds.test_idx) > 90
    assert ckpt.train_recipe["epochs"] == 3
    assert ckpt.label_space == [0, 1, 2]


def test_train_accuracy_floor():
    ds = blobs()
    with pytest.raises(TrainingError, match="floor|accuracy"):
        train(ds, ds.train_idx, replace(FAST, epochs=1, lr=1e-6, min_train_acc=99.9), "linear")


def test_train_diverges_loudly():
    ds = blobs()
    with pytest.raises(TrainingError, match="non-finite"):
        train(ds, ds.train_idx, replace(FAST, lr=1e30, momentum=0.0), "linear")


def test_train_rejects_empty():
    ds = blobs()
    with pytest.raises(ValueError):
        train(ds, [], FAST, "mlp")


def test_checkpoint_round_trip(tmp_path, digits):
    ds = digits
    ckpt = train(ds, ds.train_idx[:128], replace(FAST, epochs=1), "convnet", arch_kwargs={"width": 2})
    ckpt.extra["note"] = "x"
    ckpt.save(tmp_path / "c")
    meta = json.loads((tmp_path / "c" / "meta.json").read_text())
    assert meta["digest"] == ckpt.digest()
    again = ModelCheckpoint.load(tmp_path / "c")
    assert again.digest() == ckpt.digest()
    assert again.norm_stats_digest() == ckpt.norm_stats_digest()
    assert again.extra == ckpt.extra and again.extra["note"] == "x"
    x = ds.images[:5]
    assert torch.equal(predict_logits(again, x), predict_logits(ckpt, x))


def test_checkpoint_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        ModelCheckpoint.load(tmp_path)
    ds = blobs()
    ckpt = train(ds, ds.train_idx, FAST, "mlp").save(tmp_path / "c")
    meta = json.loads((ckpt / "meta.json").read_text())
    meta["schema_version"] = 99
    (ckpt / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="schema"):
        ModelCheckpoint.load(ckpt)


def test_with_model_keeps_metadata():
    ds = blobs()
    ckpt = train(ds, ds.train_idx, FAST, "mlp")
    model = ckpt.to_model()
    with torch.no_grad():
        next(model.parameters()).add_(1.0)
    new = ckpt.with_model(model, unlearn={"method": "mumis"})
    assert new.digest() != ckpt.digest()
    assert new.train_recipe == ckpt.train_recipe
    assert new.extra["unlearn"] == {"method": "mumis"}
    assert "unlearn" not in ckpt.extra


def test_predict_logits_restores_mode():
    m = build_model("convnet", (1, 8, 8), 3, width=2).train()
    predict_logits(m, torch.zeros(4, 1, 8, 8))
    assert m.training


def test_evaluate_accuracy_empty():
    ds = blobs()
    with pytest.raises(ValueError):
        evaluate_accuracy(build_model("mlp", (1, 2, 2), 3), ds, [])


def test_coarse_training_uses_superclass_count():
    ds = load_shapes20_dataset()
    ckpt = train(ds, ds.train_idx[:200], replace(FAST, epochs=1), "mlp", granularity="coarse")
    assert ckpt.num_classes == ds.num_coarse
    assert ckpt.granularity == "coarse"


@pytest.mark.slow
def test_desk_pretrain_meets_floor(desk):
    pre = desk.pretrain
    assert evaluate_accuracy(pre, desk.dataset, desk.dataset.train_idx) >= 95
    assert evaluate_accuracy(pre, desk.dataset, desk.dataset.test_idx) >= 90
    assert pre.arch_tag == DESK_ARCH[0] and pre.arch_kwargs == DESK_ARCH[1]


@pytest.mark.slow
def test_desk_retrain_never_saw_forget_class(desk):
    ret = desk.retrain((FORGET_CLASS,))
    ds = desk.dataset
    assert evaluate_accuracy(ret, ds, ds.class_indices([FORGET_CLASS], "test")) == 0.0
    others = ds.test_idx[ds.labels.numpy()[ds.test_idx] != FORGET_CLASS]
    assert evaluate_accuracy(ret, ds, others) >= 95


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="retrain TA counts the forgotten tenth of the test set as errors")
def test_desk_retrain_ta_within_three_points_of_pretrain(desk):
    ds = desk.dataset
    pre_ta = evaluate_accuracy(desk.pretrain, ds, ds.test_idx)
    ret_ta = evaluate_accuracy(desk.retrain((FORGET_CLASS,)), ds, ds.test_idx)
    assert abs(pre_ta - ret_ta) <= 3
