import time

import numpy as np
import pytest
import torch

from ivoct_plaque.augmentation import AugmentConfig
from ivoct_plaque.dataset import Label
from ivoct_plaque.evaluation import evaluate
from ivoct_plaque.models import (
    Backbone,
    CheckpointVersionError,
    ClassAbsenceWarning,
    CorruptCheckpoint,
    ModelConfig,
    PretrainedWeightsUnavailable,
    TrainConfig,
    TrainingDiverged,
    backbone_l2_distance,
    build_backbone,
    build_model,
    class_probabilities,
    load_checkpoint,
    parameter_count,
    predict_labels,
    predict_proba,
    save_backbone_weights,
    save_checkpoint,
    train,
)

from conftest import make_manifest

SMALL = ModelConfig(input_size=(54, 54))
AUG = AugmentConfig(representation="polar", resize_to=(60, 60), crop_to=(54, 54))


def small_tc(**kw):
    return TrainConfig(**{"epochs": 2, "batch_size": 4, "representation": "polar", **kw})


@pytest.fixture
def tiny_set(tmp_path):
    return make_manifest(tmp_path, {"A": ["plaque", "no_plaque", "plaque"], "B": ["no_plaque", "plaque", "no_plaque"]},
                         shape=(48, 64))


def test_small_test_shape_and_budget():
    model = build_model(ModelConfig())
    assert parameter_count(model) < 1_000_000
    net = model.network.eval()
    x = torch.rand(4, 3, 270, 270)
    with torch.no_grad():
        assert net(x).shape == (4, 2)
    net.train()
    net(x).sum().backward()  # warm-up
    timings = []
    for _ in range(3):
        t = time.perf_counter()
        net.zero_grad()
        net(x).sum().backward()
        timings.append((time.perf_counter() - t) / len(x))
    per_image = min(timings)
    assert per_image < 0.05


def test_probabilities_sum_to_one_and_batch_independent(rng):
    model = build_model(SMALL, seed=1)
    imgs = [rng.random((60, 60)) for _ in range(5)]
    probs = class_probabilities(model, imgs, AUG)
    assert probs.shape == (5, 2)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    alone = class_probabilities(model, imgs[2:3], AUG)
    assert np.allclose(alone, probs[2:3], atol=1e-6)
    p = predict_proba(model, imgs, AUG)
    assert np.array_equal(p, probs[:, 1])
    assert predict_labels([0.5, 0.49]) == [Label.PLAQUE, Label.NO_PLAQUE]


def test_input_size_mismatch_is_reported(rng):
    model = build_model(SMALL)
    with pytest.raises(ValueError, match="does not match"):
        class_probabilities(model, [rng.random((60, 60))], AugmentConfig(representation="polar"))


def test_training_is_deterministic(tiny_set):
    runs = [train(build_model(SMALL, seed=3), tiny_set, AUG, small_tc()) for _ in range(2)]
    assert runs[0].history == runs[1].history
    for k, v in runs[0].parameters.items():
        assert torch.equal(v, runs[1].parameters[k])
    assert [h["epoch"] for h in runs[0].history] == [1, 2]
    assert 0.0 <= runs[0].final_train_accuracy <= 1.0


def test_class_absence_warns(tmp_path):
    m = make_manifest(tmp_path, {"A": ["plaque"] * 4}, shape=(48, 64))
    with pytest.warns(ClassAbsenceWarning, match="no_plaque"):
        train(build_model(SMALL), m, AUG, small_tc(epochs=1))


def test_divergence_is_raised(tiny_set):
    with pytest.raises(TrainingDiverged, match="epoch"):
        train(build_model(SMALL), tiny_set, AUG, small_tc(epochs=5, learning_rate=1e30, optimizer="sgd_momentum"))


def test_representation_mismatch_in_train(tiny_set):
    with pytest.raises(ValueError, match="representations disagree"):
        train(build_model(SMALL), tiny_set, AUG, small_tc(representation="cartesian"))


def test_checkpoint_round_trip(tmp_path, tiny_set, rng):
    model = train(build_model(SMALL, seed=2), tiny_set, AUG, small_tc())
    path = save_checkpoint(model, tmp_path / "ck" / "model.pt")
    back = load_checkpoint(path)
    imgs = [rng.random((60, 60)) for _ in range(4)]
    assert np.abs(predict_proba(back, imgs) - predict_proba(model, imgs)).max() <= 1e-6
    assert back.history == model.history and back.config == model.config
    assert back.representation.value == "polar"


def test_checkpoint_errors(tmp_path):
    model = build_model(SMALL)
    path = save_checkpoint(model, tmp_path / "m.pt")
    data = path.read_bytes()
    (tmp_path / "cut.pt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "cut.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "junk.pt")
    payload = torch.load(path, weights_only=True)
    payload["schema_version"] = 99
    torch.save(payload, tmp_path / "v99.pt")
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(tmp_path / "v99.pt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_missing_pretrained_weights(tmp_path):
    with pytest.raises(PretrainedWeightsUnavailable, match="pretrained=false"):
        build_model(ModelConfig(backbone="resnet50", pretrained=True), weights_cache=tmp_path)


def test_pretrained_differs_from_scratch(tmp_path):
    # Surrogate weights stand in for the ImageNet download (no network here).
    torch.manual_seed(123)
    backbone, _ = build_backbone("resnet50")
    save_backbone_weights(backbone, "resnet50", tmp_path)
    pre = build_model(ModelConfig(backbone="resnet50", pretrained=True), seed=0, weights_cache=tmp_path)
    scratch = build_model(ModelConfig(backbone="resnet50"), seed=0, weights_cache=tmp_path)
    assert backbone_l2_distance(pre, scratch) > 0
    loaded = pre.network.backbone.state_dict()
    for k, v in backbone.state_dict().items():
        assert torch.equal(v, loaded[k])
    # heads are fresh either way
    assert torch.equal(pre.network.head.weight, scratch.network.head.weight)
    assert pre.normalization[0] == (0.485, 0.456, 0.406)


def test_small_test_cannot_be_pretrained():
    with pytest.raises(ValueError, match="no pretrained"):
        ModelConfig(pretrained=True)


def test_lr_defaults():
    assert TrainConfig().lr_for(ModelConfig(backbone="resnet50", pretrained=True)) == 1e-4
    assert TrainConfig().lr_for(ModelConfig()) == 1e-3
    assert TrainConfig(learning_rate=0.5).lr_for(ModelConfig()) == 0.5


def test_freeze_backbone():
    model = build_model(ModelConfig(freeze_backbone=True))
    assert not any(p.requires_grad for p in model.network.backbone.parameters())
    assert all(p.requires_grad for p in model.network.head.parameters())


@pytest.mark.slow
@pytest.mark.parametrize("backbone", [b for b in Backbone if b is not Backbone.SMALL_TEST])
def test_large_backbone_head_contract(backbone):
    model = build_model(ModelConfig(backbone=backbone))
    desc = dict(model.network.describe())
    assert desc["dropout"] == "Dropout(p=0.5)"
    assert desc["head"].endswith("out=2)")
    net = model.network.eval()
    with torch.no_grad():
        assert net(torch.rand(1, 3, 270, 270)).shape == (1, 2)


def test_report_names_backbone(tmp_path, tiny_set):
    model = train(build_model(SMALL), tiny_set, AUG, small_tc(epochs=1))
    r = evaluate(load_checkpoint(save_checkpoint(model, tmp_path / "m.pt")), tiny_set)
    assert r.backbone == "small_test" and r.representation == "polar" and r.pretrained is False
    assert r.confusion.total == 6
