"""Backbone registry, binary classifier head, training, inference and checkpoints."""
import contextlib
import enum
import logging
import math
import os
import pickle
import warnings
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augmentation import AugmentConfig, RepresentationMismatch, apply_params, eval_transform, sample_params, substream
from .config import config_from_dict, config_to_dict
from .dataset import Label, Representation, load_image, validate_dataset
from . import geometry

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WEIGHTS_CACHE_ENV = "IVOCT_WEIGHTS_CACHE"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Class index order of the 2-logit head.
CLASSES = (Label.NO_PLAQUE, Label.PLAQUE)
PLAQUE_INDEX = 1
DECISION_THRESHOLD = 0.5


class Backbone(str, enum.Enum):
    RESNET50 = "resnet50"
    RESNET101 = "resnet101"
    INCEPTION_V3 = "inception_v3"
    INCEPTION_RESNET_V2 = "inception_resnet_v2"
    SMALL_TEST = "small_test"


class Optimizer(str, enum.Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"


class PretrainedWeightsUnavailable(FileNotFoundError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class ClassAbsenceWarning(UserWarning):
    pass


class CorruptCheckpoint(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone: Backbone = Backbone.SMALL_TEST
    pretrained: bool = False
    dropout_p: float = 0.5
    num_classes: int = 2
    input_size: tuple = (270, 270)
    freeze_backbone: bool = False

    def __post_init__(self):
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must be in [0, 1], got {self.dropout_p}")
        if self.num_classes != 2:
            raise ValueError("only binary (2-class) heads are supported")
        if self.backbone is Backbone.SMALL_TEST and self.pretrained:
            raise ValueError("SMALL_TEST has no pretrained weights")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 16
    learning_rate: float | None = None   # None: 1e-4 pretrained, 1e-3 scratch
    optimizer: Optimizer = Optimizer.ADAM
    momentum: float = 0.9
    seed: int = 0
    representation: Representation = Representation.CARTESIAN
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        object.__setattr__(self, "representation", Representation(self.representation))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def lr_for(self, model_config):
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-4 if model_config.pretrained else 1e-3


class SmallTestNet(nn.Module):
    """Four strided conv blocks + global average pooling; for desk-scale runs."""

    def __init__(self, widths=(16, 32, 64, 128)):
        super().__init__()
        layers = []
        c_in = 3
        for i, c_out in enumerate(widths):
            layers += [
                nn.Conv2d(c_in, c_out, 5 if i == 0 else 3, stride=2, padding=2 if i == 0 else 1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
                nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.num_features = c_in

    def forward(self, x):
        return torch.flatten(self.pool(self.features(x)), 1)


class PlaqueClassifier(nn.Module):
    """Backbone features -> dropout -> 2-output linear head."""

    def __init__(self, backbone, num_features, dropout_p=0.5, num_classes=2):
        super().__init__()
        self.backbone = backbone
        self.dropout = nn.Dropout(dropout_p)
        self.head = nn.Linear(num_features, num_classes)

    def forward(self, x):
        return self.head(self.dropout(self.backbone(x)))

    def describe(self):
        """Top-level structure as ``[(name, description), ...]`` in forward order."""
        out = [("backbone", type(self.backbone).__name__)]
        out.append(("dropout", f"Dropout(p={self.dropout.p})"))
        out.append(("head", f"Linear(in={self.head.in_features}, out={self.head.out_features})"))
        return out


def _resnet(depth):
    import torchvision

    net = getattr(torchvision.models, f"resnet{depth}")(weights=None)
    n = net.fc.in_features
    net.fc = nn.Identity()
    return net, n


def _inception_v3(pretrained):
    import torchvision

    # Google's weights expect [-1, 1] inputs; transform_input converts from
    # ImageNet-normalized tensors.
    net = torchvision.models.inception_v3(
        weights=None, aux_logits=False, init_weights=True, transform_input=pretrained
    )
    n = net.fc.in_features
    net.fc = nn.Identity()
    net.dropout = nn.Identity()
    return net, n


def _inception_resnet_v2():
    import timm

    net = timm.create_model("inception_resnet_v2", pretrained=False, num_classes=0)
    return net, net.num_features


def _small_test():
    net = SmallTestNet()
    return net, net.num_features


def build_backbone(backbone, pretrained=False):
    """Feature extractor without its classifier, plus its feature width."""
    backbone = Backbone(backbone)
    if backbone is Backbone.RESNET50:
        return _resnet(50)
    if backbone is Backbone.RESNET101:
        return _resnet(101)
    if backbone is Backbone.INCEPTION_V3:
        return _inception_v3(pretrained)
    if backbone is Backbone.INCEPTION_RESNET_V2:
        return _inception_resnet_v2()
    if backbone is Backbone.SMALL_TEST:
        return _small_test()
    raise ValueError(f"unknown backbone {backbone}")


def weights_cache_dir(cache_dir=None):
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(WEIGHTS_CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "ivoct_plaque" / "weights"


def weights_path(backbone, cache_dir=None):
    return weights_cache_dir(cache_dir) / f"{Backbone(backbone).value}.pt"


def save_backbone_weights(backbone_module, backbone, cache_dir=None):
    path = weights_path(backbone, cache_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(backbone_module.state_dict(), path)
    return path


def fetch_pretrained_weights(backbone, cache_dir=None):
    """Download ImageNet weights for ``backbone`` into the cache (needs network)."""
    import torchvision

    backbone = Backbone(backbone)
    if backbone is Backbone.SMALL_TEST:
        raise ValueError("SMALL_TEST has no pretrained weights")
    cache = weights_cache_dir(cache_dir)
    os.environ.setdefault("TORCH_HOME", str(cache / "hub"))
    tv = torchvision.models
    if backbone is Backbone.RESNET50:
        state = tv.resnet50(weights=tv.ResNet50_Weights.IMAGENET1K_V2).state_dict()
    elif backbone is Backbone.RESNET101:
        state = tv.resnet101(weights=tv.ResNet101_Weights.IMAGENET1K_V2).state_dict()
    elif backbone is Backbone.INCEPTION_V3:
        state = tv.inception_v3(weights=tv.Inception_V3_Weights.IMAGENET1K_V1).state_dict()
    else:
        import timm

        state = timm.create_model("inception_resnet_v2", pretrained=True, num_classes=0).state_dict()
    state = {k: v for k, v in state.items() if not k.startswith(("fc.", "AuxLogits."))}
    path = weights_path(backbone, cache)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return path


def _load_pretrained(net, backbone, cache_dir):
    path = weights_path(backbone, cache_dir)
    if not path.is_file():
        raise PretrainedWeightsUnavailable(
            f"no pretrained weights for {Backbone(backbone).value} at {path}; "
            f"populate the cache (set {WEIGHTS_CACHE_ENV}) or use pretrained=false"
        )
    state = torch.load(path, map_location="cpu", weights_only=True)
    net.load_state_dict(state)


@dataclass
class TrainedModel:
    config: ModelConfig
    network: PlaqueClassifier
    history: list = field(default_factory=list)
    train_config: TrainConfig | None = None
    augment: AugmentConfig | None = None
    normalization: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    final_train_accuracy: float | None = None

    @property
    def parameters(self):
        return self.network.state_dict()

    @property
    def representation(self):
        if self.train_config is not None:
            return self.train_config.representation
        return self.augment.representation if self.augment is not None else None


def _network(cfg, load_pretrained, cache_dir=None):
    backbone, n = build_backbone(cfg.backbone, cfg.pretrained)
    if cfg.pretrained and load_pretrained:
        _load_pretrained(backbone, cfg.backbone, cache_dir)
    net = PlaqueClassifier(backbone, n, cfg.dropout_p, cfg.num_classes)
    if cfg.freeze_backbone:
        for p in net.backbone.parameters():
            p.requires_grad_(False)
    return net


def build_model(cfg, seed=0, weights_cache=None):
    """Instantiate a classifier; pretrained backbones load from the weights cache.

    The head is always freshly initialized. ``seed`` fixes all random
    initialization without touching the global torch RNG.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _network(cfg, load_pretrained=True, cache_dir=weights_cache)
    norm = (IMAGENET_MEAN, IMAGENET_STD) if cfg.pretrained else ((0.0,) * 3, (1.0,) * 3)
    return TrainedModel(config=cfg, network=net, normalization=norm)


@contextlib.contextmanager
def strict_mode(enabled=True):
    """Single-threaded, deterministic kernels for bit-reproducible runs."""
    if not enabled:
        yield
        return
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)


def _to_tensor(batch, normalization):
    x = torch.as_tensor(np.stack(batch).astype(np.float32)).unsqueeze(1).expand(-1, 3, -1, -1)
    mean = torch.tensor(normalization[0], dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.tensor(normalization[1], dtype=torch.float32).view(1, 3, 1, 1)
    return (x - mean) / std


def _check_representations(manifest_rep, aug, tc):
    reps = {Representation(manifest_rep), aug.representation, tc.representation}
    if len(reps) != 1:
        raise RepresentationMismatch(
            f"representations disagree: manifest={Representation(manifest_rep).value}, "
            f"augment={aug.representation.value}, train={tc.representation.value}"
        )


def load_resized(manifest, size):
    """Decode and resize every frame once; the resize is the deterministic first step."""
    out = np.empty((len(manifest), *size), dtype=np.float32)
    for i, r in enumerate(manifest.records):
        out[i] = geometry.resize(load_image(manifest.resolve(r)), size)
    return out


def recalibrate_batchnorm(net, images, aug, normalization, batch_size=16):
    """Recompute BatchNorm running statistics on eval-transformed ``images``.

    The exponential running averages lag far behind the weights when the
    optimizer moves quickly, which can leave eval-mode outputs stuck on one
    class. A plain average over one ordered pass fixes that.
    """
    bns = [m for m in net.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns or not any(m.track_running_stats for m in bns):
        return
    saved = [m.momentum for m in bns]
    was_training = net.training
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    net.train()
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                chunk = images[start:start + batch_size]
                if len(chunk) < 2:
                    continue
                net(_to_tensor([geometry.center_crop(im, aug.crop_to) for im in chunk], normalization))
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom
        net.train(was_training)


def train(model, train_set, aug, tc, validate=True):
    """Fit ``model`` on ``train_set`` with cross-entropy; returns a new TrainedModel.

    Shuffling, dropout and augmentation draws are keyed by the seeds, so two
    runs in deterministic mode give identical parameters.
    """
    if train_set is None or len(train_set) == 0:
        raise ValueError("empty training manifest")
    _check_representations(train_set.representation, aug, tc)
    if validate:
        issues = validate_dataset(train_set)
        if issues:
            shown = "; ".join(str(i) for i in issues[:3])
            raise ValueError(f"{len(issues)} invalid training frames, e.g. {shown}")

    labels = np.array([int(r.label is Label.PLAQUE) for r in train_set.records], dtype=np.int64)
    for cls in CLASSES:
        if not (labels == CLASSES.index(cls)).any():
            warnings.warn(f"no {cls.value} frames in the training set", ClassAbsenceWarning, stacklevel=2)

    images = load_resized(train_set, aug.resize_to)
    if model.config.pretrained:
        normalization = (IMAGENET_MEAN, IMAGENET_STD)
    else:
        mean = float(images.mean(dtype=np.float64))
        std = float(images.std(dtype=np.float64)) or 1.0
        normalization = ((mean,) * 3, (std,) * 3)

    net = model.network
    params = [p for p in net.parameters() if p.requires_grad]
    lr = tc.lr_for(model.config)
    n = len(images)
    history = list(model.history)
    loss_fn = nn.CrossEntropyLoss()

    with strict_mode(tc.deterministic), torch.random.fork_rng(devices=[]):
        torch.manual_seed(tc.seed)
        if tc.optimizer is Optimizer.ADAM:
            opt = torch.optim.Adam(params, lr=lr)
        else:
            opt = torch.optim.SGD(params, lr=lr, momentum=tc.momentum)
        for epoch in range(tc.epochs):
            net.train()
            order = substream(tc.seed, 2, epoch).permutation(n)
            total_loss, correct = 0.0, 0
            for b, start in enumerate(range(0, n, tc.batch_size)):
                idx = order[start:start + tc.batch_size]
                batch = [
                    apply_params(images[i], aug, sample_params(aug, substream(aug.seed, 3, epoch, i)))
                    for i in idx
                ]
                x = _to_tensor(batch, normalization)
                y = torch.from_numpy(labels[idx])
                opt.zero_grad()
                logits = net(x)
                loss = loss_fn(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss {loss.item()} at epoch {epoch + 1}, batch {b + 1} (lr={lr})"
                    )
                loss.backward()
                opt.step()
                total_loss += loss.item() * len(idx)
                correct += int((logits.argmax(1) == y).sum())
            history.append({"epoch": len(history) + 1, "loss": total_loss / n, "accuracy": correct / n})
            log.info("epoch %d/%d loss %.4f acc %.3f", epoch + 1, tc.epochs, total_loss / n, correct / n)

        if not model.config.freeze_backbone:
            recalibrate_batchnorm(net, images, aug, normalization, tc.batch_size)

    trained = TrainedModel(
        config=model.config,
        network=net,
        history=history,
        train_config=tc,
        augment=aug,
        normalization=normalization,
    )
    with strict_mode(tc.deterministic):
        probs = _probabilities(trained, [images[i] for i in range(n)], aug, resized=True)
    preds = (probs[:, PLAQUE_INDEX] >= DECISION_THRESHOLD).astype(np.int64)
    trained.final_train_accuracy = float((preds == labels).mean())
    return trained


def _probabilities(model, imgs, aug, batch_size=32, resized=False):
    net = model.network
    net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(imgs), batch_size):
            chunk = imgs[start:start + batch_size]
            if resized:
                batch = [geometry.center_crop(im, aug.crop_to) for im in chunk]
            else:
                batch = [eval_transform(im, aug) for im in chunk]
            if any(b.shape != tuple(model.config.input_size) for b in batch):
                raise ValueError(
                    f"transformed shape {batch[0].shape} does not match model input {model.config.input_size}"
                )
            logits = net(_to_tensor(batch, model.normalization)).double()
            out.append(torch.softmax(logits, dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def class_probabilities(model, imgs, aug=None):
    """Softmax over both classes, shape ``(N, 2)``, columns ordered as CLASSES."""
    aug = aug or model.augment or AugmentConfig(representation=model.representation or Representation.CARTESIAN)
    return _probabilities(model, list(imgs), aug)


def predict_proba(model, imgs, aug=None):
    """Probability of PLAQUE per image after the evaluation transform."""
    return class_probabilities(model, imgs, aug)[:, PLAQUE_INDEX]


def predict_labels(probs):
    return [Label.PLAQUE if p >= DECISION_THRESHOLD else Label.NO_PLAQUE for p in probs]


def save_checkpoint(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "model_config": config_to_dict(model.config),
        "train_config": config_to_dict(model.train_config) if model.train_config else None,
        "augment_config": config_to_dict(model.augment) if model.augment else None,
        "normalization": [list(model.normalization[0]), list(model.normalization[1])],
        "history": model.history,
        "final_train_accuracy": model.final_train_accuracy,
        "state_dict": model.network.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, OSError, pickle.UnpicklingError, zipfile.BadZipFile, ValueError) as e:
        raise CorruptCheckpoint(f"{path}: corrupt checkpoint ({e.__class__.__name__}: {e})") from e
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CorruptCheckpoint(f"{path}: not a checkpoint (missing schema_version)")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise CheckpointVersionError(
            f"{path}: schema version {payload['schema_version']} != supported {SCHEMA_VERSION}"
        )
    try:
        cfg = config_from_dict(ModelConfig, payload["model_config"])
        tc = payload["train_config"] and config_from_dict(TrainConfig, payload["train_config"])
        aug = payload["augment_config"] and config_from_dict(AugmentConfig, payload["augment_config"])
        net = _network(cfg, load_pretrained=False)
        net.load_state_dict(payload["state_dict"])
    except (KeyError, TypeError, RuntimeError) as e:
        raise CorruptCheckpoint(f"{path}: corrupt checkpoint contents ({e})") from e
    mean, std = payload["normalization"]
    return TrainedModel(
        config=cfg,
        network=net,
        history=list(payload["history"]),
        train_config=tc or None,
        augment=aug or None,
        normalization=(tuple(mean), tuple(std)),
        final_train_accuracy=payload.get("final_train_accuracy"),
    )


def parameter_count(model):
    return sum(p.numel() for p in model.network.parameters())


def backbone_l2_distance(a, b):
    """L2 distance between two backbones' floating-point parameters."""
    sa, sb = a.network.backbone.state_dict(), b.network.backbone.state_dict()
    total = 0.0
    for k, v in sa.items():
        if v.is_floating_point():
            total += float(((v.double() - sb[k].double()) ** 2).sum())
    return math.sqrt(total)
