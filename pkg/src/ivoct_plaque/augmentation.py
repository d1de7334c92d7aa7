"""Seeded train/eval transforms for polar and cartesian B-scans.

Training: resize -> (rotate | temporal flip) -> random crop.
Evaluation: resize -> center crop.

Randomness comes only from an explicit ``numpy.random.Generator``; use
:func:`substream` to derive independent per-sample generators.
"""
from dataclasses import dataclass

import numpy as np

from . import geometry
from .dataset import Representation


class RepresentationMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    representation: Representation = Representation.CARTESIAN
    resize_to: tuple = (300, 300)
    crop_to: tuple = (270, 270)
    flip_probability: float = 0.5
    rotation_range: tuple = (0.0, 360.0)
    seed: int = 0
    fill: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "representation", Representation(self.representation))
        object.__setattr__(self, "resize_to", tuple(int(v) for v in self.resize_to))
        object.__setattr__(self, "crop_to", tuple(int(v) for v in self.crop_to))
        object.__setattr__(self, "rotation_range", tuple(float(v) for v in self.rotation_range))
        if len(self.resize_to) != 2 or len(self.crop_to) != 2:
            raise ValueError("resize_to and crop_to must be (rows, cols)")
        if any(c > r or c < 1 for c, r in zip(self.crop_to, self.resize_to)):
            raise ValueError(f"crop_to {self.crop_to} must fit inside resize_to {self.resize_to}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        lo, hi = self.rotation_range
        if not (0.0 <= lo <= hi <= 360.0):
            raise ValueError(f"rotation_range must lie within [0, 360), got {self.rotation_range}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class AugmentParams:
    """One draw of the random training parameters."""
    angle: float = 0.0
    flip: bool = False
    offset: tuple = (0, 0)


def substream(seed, *key):
    """Counter-based generator for the stream identified by ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def temporal_flip(p):
    """Reverse the acquisition (column) axis of a polar image."""
    p = np.asarray(p)
    return p[:, ::-1].copy()


def random_rotation(c, angle, fill=0.0):
    return geometry.rotate(c, angle, fill=fill)


def random_crop_offset(shape, size, rng):
    max_r = shape[0] - size[0]
    max_c = shape[1] - size[1]
    if max_r < 0 or max_c < 0:
        raise ValueError(f"crop {tuple(size)} does not fit image {tuple(shape)}")
    return int(rng.integers(0, max_r + 1)), int(rng.integers(0, max_c + 1))


def random_crop(img, size, rng):
    img = np.asarray(img)
    offset = random_crop_offset(img.shape, size, rng)
    return geometry.crop(img, offset, size)


def _check(img, cfg, representation):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if representation is not None and Representation(representation) is not cfg.representation:
        raise RepresentationMismatch(
            f"image is {Representation(representation).value} but config expects {cfg.representation.value}"
        )
    if cfg.representation is Representation.CARTESIAN and img.shape[0] != img.shape[1]:
        raise RepresentationMismatch(f"cartesian config got non-square image {img.shape}")
    return img


def sample_params(cfg, rng):
    """Draw rotation/flip then crop offset, in that order."""
    angle, flip = 0.0, False
    if cfg.representation is Representation.CARTESIAN:
        lo, hi = cfg.rotation_range
        angle = float(rng.uniform(lo, hi))
    else:
        flip = bool(rng.random() < cfg.flip_probability)
    offset = random_crop_offset(cfg.resize_to, cfg.crop_to, rng)
    return AugmentParams(angle=angle, flip=flip, offset=offset)


def apply_params(resized, cfg, params):
    """Random stage of the training pipeline on an already resized image."""
    if cfg.representation is Representation.CARTESIAN:
        if params.flip:
            raise ValueError("cartesian pipelines never temporal-flip")
        out = random_rotation(resized, params.angle, fill=cfg.fill) if params.angle else resized
    else:
        if params.angle:
            raise ValueError("polar pipelines never rotate")
        out = temporal_flip(resized) if params.flip else resized
    return geometry.crop(out, params.offset, cfg.crop_to)


def train_transform(img, cfg, rng, representation=None):
    img = _check(img, cfg, representation)
    resized = geometry.resize(img, cfg.resize_to)
    return apply_params(resized, cfg, sample_params(cfg, rng))


def eval_transform(img, cfg, representation=None):
    img = _check(img, cfg, representation)
    return geometry.center_crop(geometry.resize(img, cfg.resize_to), cfg.crop_to)
