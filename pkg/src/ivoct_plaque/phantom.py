"""Synthetic polar IVOCT B-scans with controllable plaque and artifacts.

Each A-scan is: catheter reflections near depth 0, dark lumen up to a smooth
per-angle lumen radius, a bright wall-entry interface, then exponential decay
through three wall bands. Plaque frames get a contiguous angular sector with a
higher attenuation coefficient and a diffuse entry border. An optional guide
wire adds a saturated cap in the lumen and a near-zero shadow behind it.

Depths are fractions of the A-scan length. Attenuation coefficients are in
units of 1 / ``ATTENUATION_UNIT`` of that normalized depth.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import geometry
from .augmentation import substream
from .dataset import FrameRecord, Label, Manifest, Representation, save_image, write_manifest

log = logging.getLogger(__name__)

ATTENUATION_UNIT = 0.1
CATHETER_RINGS = ((0.02, 0.8), (0.045, 0.5))
RING_WIDTH = 0.003
INTERFACE_BOOST = 0.35
INTERFACE_WIDTH = 0.004
PLAQUE_BORDER_BLUR = 0.015
PLAQUE_WIDTH_RANGE = (40.0, 150.0)
WIRE_WIDTH = 15.0
WIRE_CAP = 0.008
WIRE_SHADOW = 0.01


@dataclass(frozen=True)
class PhantomSpec:
    num_patients: int = 41
    frames_per_patient: int = 70
    plaque_prevalence: float = 0.55
    depth_samples: int = 512
    num_ascans: int = 360
    guide_wire: bool = True
    noise_level: float = 0.1
    seed: int = 0
    mu_normal: float = 0.8
    mu_plaque: float = 1.6
    total_frames: int | None = None

    def __post_init__(self):
        if self.num_patients < 1 or self.frames_per_patient < 1:
            raise ValueError("num_patients and frames_per_patient must be positive")
        if not 0.0 <= self.plaque_prevalence <= 1.0:
            raise ValueError(f"plaque_prevalence must be in [0, 1], got {self.plaque_prevalence}")
        if self.depth_samples < geometry.MIN_DEPTH_SAMPLES or self.num_ascans < geometry.MIN_ASCANS:
            raise ValueError("depth_samples/num_ascans below polar image minimums")
        if not 0.0 <= self.noise_level <= 0.5:
            raise ValueError(f"noise_level must be in [0, 0.5], got {self.noise_level}")
        if self.mu_normal <= 0 or self.mu_plaque <= 0:
            raise ValueError("attenuation coefficients must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.total_frames is not None and not (
            0 < self.total_frames <= self.num_patients * self.frames_per_patient
        ):
            raise ValueError("total_frames must be in [1, num_patients * frames_per_patient]")

    def frame_counts(self):
        """Frames per patient; trailing patients give up frames to hit total_frames."""
        counts = [self.frames_per_patient] * self.num_patients
        if self.total_frames is not None:
            deficit = self.num_patients * self.frames_per_patient - self.total_frames
            i = self.num_patients - 1
            while deficit > 0:
                if counts[i] > 1:
                    counts[i] -= 1
                    deficit -= 1
                i = (i - 1) % self.num_patients
        return counts


@dataclass(frozen=True)
class PatientParams:
    base_radius: float
    wall_brightness: float
    intima: float
    media: float
    media_factor: float
    adventitia_factor: float
    harmonics: tuple          # (amplitude, phase) per harmonic order 1..3
    wire_angle: float         # degrees
    wire_depth: float         # fraction of the lumen radius
    mu_normal: float = 0.8
    mu_plaque: float = 1.6
    noise_level: float = 0.1
    guide_wire: bool = True
    prevalence: float = 0.5
    depth_samples: int = 512
    num_ascans: int = 360


@dataclass(frozen=True)
class PhantomFrame:
    polar: np.ndarray
    label: Label
    ground_truth: tuple | None     # (start_deg, width_deg) of the plaque sector
    lumen_radius: np.ndarray = field(repr=False)
    wire_sector: tuple | None = None


def draw_patient(spec, rng):
    harmonics = tuple(
        (float(rng.uniform(0.0, 0.08) / h), float(rng.uniform(0, 2 * np.pi))) for h in (1, 2, 3)
    )
    return PatientParams(
        base_radius=float(rng.uniform(0.18, 0.32)),
        wall_brightness=float(rng.uniform(0.7, 0.95)),
        intima=float(rng.uniform(0.02, 0.04)),
        media=float(rng.uniform(0.03, 0.06)),
        media_factor=float(rng.uniform(1.3, 1.7)),
        adventitia_factor=float(rng.uniform(0.7, 0.9)),
        harmonics=harmonics,
        wire_angle=float(rng.uniform(0.0, 360.0)),
        wire_depth=float(rng.uniform(0.5, 0.8)),
        mu_normal=spec.mu_normal,
        mu_plaque=spec.mu_plaque,
        noise_level=spec.noise_level,
        guide_wire=spec.guide_wire,
        prevalence=spec.plaque_prevalence,
        depth_samples=spec.depth_samples,
        num_ascans=spec.num_ascans,
    )


def _angular_distance(a, b):
    d = np.mod(a - b, 360.0)
    return np.minimum(d, 360.0 - d)


def _in_sector(angles, start, width):
    return np.mod(angles - start, 360.0) < width


def generate_frame(params, rng):
    """Build one polar frame for a patient. All randomness comes from ``rng``."""
    D, K = params.depth_samples, params.num_ascans
    z = np.linspace(0.0, 1.0, D)[:, None]
    theta = 2 * np.pi * np.arange(K) / K
    angles = np.rad2deg(theta)

    has_plaque = bool(rng.random() < params.prevalence)
    jitter = [(a * rng.uniform(0.8, 1.2), ph + rng.normal(0.0, 0.2)) for a, ph in params.harmonics]
    radius = params.base_radius * (
        1.0 + sum(a * np.cos(h * theta + ph) for h, (a, ph) in enumerate(jitter, start=1))
    )
    wire_angle = float(np.mod(params.wire_angle + rng.normal(0.0, 10.0), 360.0))
    sector = None
    if has_plaque:
        width = float(rng.uniform(*PLAQUE_WIDTH_RANGE))
        start = float(rng.uniform(0.0, 360.0))
        sector = (start, width)

    plaque_cols = _in_sector(angles, *sector) if sector else np.zeros(K, dtype=bool)
    mu = np.where(plaque_cols, params.mu_plaque, params.mu_normal)[None, :]

    d = z - radius[None, :]
    inside = d >= 0
    dd = np.maximum(d, 0.0)
    optical_depth = (
        np.minimum(dd, params.intima)
        + params.media_factor * np.clip(dd - params.intima, 0.0, params.media)
        + params.adventitia_factor * np.maximum(dd - params.intima - params.media, 0.0)
    )
    tissue = params.wall_brightness * np.exp(-mu * optical_depth / ATTENUATION_UNIT)
    tissue *= 1.0 + INTERFACE_BOOST * np.exp(-dd / INTERFACE_WIDTH)
    tissue = np.where(inside, tissue, 0.0)
    if plaque_cols.any():
        sigma = PLAQUE_BORDER_BLUR * (D - 1)
        tissue[:, plaque_cols] = gaussian_filter1d(tissue[:, plaque_cols], sigma, axis=0, mode="nearest")

    rings = sum(a * np.exp(-0.5 * ((z - zc) / RING_WIDTH) ** 2) for zc, a in CATHETER_RINGS)
    img = np.maximum(tissue, rings)

    wire_sector = None
    if params.guide_wire:
        delta = _angular_distance(angles, wire_angle)
        cols = delta <= WIRE_WIDTH / 2
        wire_sector = (float(np.mod(wire_angle - WIRE_WIDTH / 2, 360.0)), WIRE_WIDTH)
        surface = params.wire_depth * radius[cols] + 0.01 * (delta[cols] / (WIRE_WIDTH / 2)) ** 2
        zc = z[:, 0][:, None]
        cap = (zc >= surface[None, :]) & (zc < surface[None, :] + WIRE_CAP)
        behind = zc >= surface[None, :] + WIRE_CAP
        sub = img[:, cols]
        sub = np.where(behind, sub * WIRE_SHADOW, sub)
        sub = np.where(cap, 1.0, sub)
        img[:, cols] = sub

    if params.noise_level > 0:
        speckle = np.maximum(0.0, 1.0 + params.noise_level * rng.standard_normal(img.shape))
        floor = 0.05 * params.noise_level * np.abs(rng.standard_normal(img.shape))
        img = img * speckle + floor
    img = np.clip(img, 0.0, 1.0)

    return PhantomFrame(
        polar=img,
        label=Label.PLAQUE if has_plaque else Label.NO_PLAQUE,
        ground_truth=sector,
        lumen_radius=radius,
        wire_sector=wire_sector,
    )


def patient_rng(spec, patient):
    return substream(spec.seed, 0, patient)


def frame_rng(spec, patient, frame):
    return substream(spec.seed, 1, patient, frame)


def iter_frames(spec):
    """Yield ``(patient_index, frame_index, PhantomFrame)`` in order, without writing."""
    for p, n in enumerate(spec.frame_counts()):
        params = draw_patient(spec, patient_rng(spec, p))
        for f in range(n):
            yield p, f, generate_frame(params, frame_rng(spec, p, f))


def generate_dataset(spec, out_dir, workers=1):
    """Render every frame of ``spec`` to PNG under ``out_dir`` and write manifest.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for p, n in enumerate(spec.frame_counts()):
        params = draw_patient(spec, patient_rng(spec, p))
        jobs.extend((params, p, f) for f in range(n))

    def render(job):
        params, p, f = job
        frame = generate_frame(params, frame_rng(spec, p, f))
        rel = f"images/P{p:03d}/F{f:04d}.png"
        save_image(out_dir / rel, frame.polar)
        return FrameRecord(f"P{p:03d}", f, rel, frame.label, Representation.POLAR)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(render, jobs))
    else:
        records = [render(j) for j in jobs]
    m = Manifest(records, out_dir.resolve())
    write_manifest(m, out_dir / "manifest.csv")
    log.info("wrote %d phantom frames for %d patients to %s", len(records), spec.num_patients, out_dir)
    return m
