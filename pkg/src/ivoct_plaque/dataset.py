"""Labeled B-scan manifests, image I/O and patient-level splitting."""
import csv
import enum
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_HEADER = ["patient_id", "frame_id", "image_path", "label", "representation"]


class Label(str, enum.Enum):
    PLAQUE = "plaque"
    NO_PLAQUE = "no_plaque"


class Representation(str, enum.Enum):
    POLAR = "polar"
    CARTESIAN = "cartesian"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    patient_id: str
    frame_id: int
    image_path: str
    label: Label
    representation: Representation


@dataclass(frozen=True)
class Manifest:
    records: tuple
    source_root: Path

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "source_root", Path(self.source_root))
        if not self.records:
            raise ManifestError("manifest is empty")
        reps = {r.representation for r in self.records}
        if len(reps) != 1:
            raise ManifestError(f"mixed representations in one manifest: {sorted(r.value for r in reps)}")
        seen = set()
        for r in self.records:
            key = (r.patient_id, r.frame_id)
            if key in seen:
                raise ManifestError(f"duplicate (patient_id, frame_id) {key}")
            seen.add(key)

    def __len__(self):
        return len(self.records)

    @property
    def representation(self):
        return self.records[0].representation

    @property
    def patients(self):
        return sorted({r.patient_id for r in self.records})

    def resolve(self, record):
        return self.source_root / record.image_path

    def labels(self):
        return [r.label for r in self.records]


@dataclass(frozen=True)
class SplitResult:
    train: Manifest
    test: Manifest
    seed: int


def load_manifest(path):
    """Read a manifest CSV. Row order is preserved."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: line 1: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        seen = set()
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}: line {lineno}: expected 5 fields, got {len(row)}")
            patient_id, frame_id, image_path, label, rep = row
            if not patient_id:
                raise ManifestError(f"{path}: line {lineno}: empty patient_id")
            try:
                frame_id = int(frame_id)
            except ValueError:
                raise ManifestError(f"{path}: line {lineno}: frame_id {frame_id!r} is not an integer") from None
            if frame_id < 0:
                raise ManifestError(f"{path}: line {lineno}: negative frame_id {frame_id}")
            try:
                label = Label(label)
            except ValueError:
                raise ManifestError(f"{path}: line {lineno}: unknown label {label!r}") from None
            try:
                rep = Representation(rep)
            except ValueError:
                raise ManifestError(f"{path}: line {lineno}: unknown representation {rep!r}") from None
            if (patient_id, frame_id) in seen:
                raise ManifestError(f"{path}: line {lineno}: duplicate (patient_id, frame_id) ({patient_id}, {frame_id})")
            seen.add((patient_id, frame_id))
            records.append(FrameRecord(patient_id, frame_id, image_path, label, rep))
    if not records:
        raise ManifestError(f"{path}: manifest has no records")
    return Manifest(records, path.parent.resolve())


def write_manifest(m, path):
    """Write ``m`` as CSV at ``path``; image paths are re-expressed relative to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out_root = path.parent.resolve()
    same_root = out_root == m.source_root.resolve()
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in m.records:
            if same_root:
                rel = r.image_path
            else:
                rel = Path(os.path.relpath(m.resolve(r).resolve(), out_root)).as_posix()
            w.writerow([r.patient_id, r.frame_id, rel, r.label.value, r.representation.value])
    return path


def patient_split(m, test_patients, seed):
    """Hold out ``test_patients`` whole patients, chosen by a seeded shuffle."""
    patients = m.patients
    if not 0 < test_patients < len(patients):
        raise ValueError(f"test_patients must be in [1, {len(patients) - 1}], got {test_patients}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    order = rng.permutation(len(patients))
    held_out = {patients[i] for i in order[:test_patients]}
    train = [r for r in m.records if r.patient_id not in held_out]
    test = [r for r in m.records if r.patient_id in held_out]
    return SplitResult(Manifest(train, m.source_root), Manifest(test, m.source_root), int(seed))


def class_balance(m):
    """Fraction of NO_PLAQUE frames."""
    if len(m.records) == 0:
        raise ValueError("empty manifest")
    return sum(r.label is Label.NO_PLAQUE for r in m.records) / len(m.records)


def load_image(path):
    """Load a single-channel PNG as float64 in [0, 1]."""
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im).astype(np.float64)
            if mode == "I" and arr.max(initial=0) > 65535:
                raise ValueError(f"{path}: 32-bit integer images are not supported")
            return arr / 65535.0
    raise ValueError(f"{path}: image mode {mode!r} is not single-channel grayscale")


def save_image(path, img, bits=16):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        arr = np.round(img * 65535.0).astype(np.uint16)
    elif bits == 8:
        arr = np.round(img * 255.0).astype(np.uint8)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def _shape_problem(shape, representation):
    if len(shape) != 2:
        return "not grayscale"
    if representation is Representation.CARTESIAN:
        if shape[0] != shape[1] or shape[0] < 8:
            return f"cartesian image must be square with side >= 8, got {shape}"
    elif shape[0] < 2 or shape[1] < 4:
        return f"polar image must be at least 2x4, got {shape}"
    return None


@dataclass(frozen=True)
class Issue:
    record: FrameRecord
    message: str

    def __str__(self):
        return f"{self.record.patient_id}/{self.record.frame_id} ({self.record.image_path}): {self.message}"


def validate_dataset(m, expected_shape=None):
    """Check every image of ``m``; returns one :class:`Issue` per bad record.

    ``expected_shape`` defaults to the most common shape among readable images.
    """
    issues = []
    shapes = {}
    for r in m.records:
        p = m.resolve(r)
        if not p.is_file():
            issues.append(Issue(r, "missing file"))
            continue
        try:
            with Image.open(p) as im:
                im.load()
                mode, size = im.mode, im.size
        except Exception as e:  # any decode failure is an issue, not an error
            issues.append(Issue(r, f"cannot decode: {e}"))
            continue
        if mode not in ("L", "I;16", "I;16B", "I;16L", "I"):
            issues.append(Issue(r, f"not grayscale (mode {mode})"))
            continue
        shape = (size[1], size[0])
        problem = _shape_problem(shape, r.representation)
        if problem:
            issues.append(Issue(r, problem))
            continue
        shapes[r] = shape
    if shapes:
        if expected_shape is None:
            expected_shape = Counter(shapes.values()).most_common(1)[0][0]
        expected_shape = tuple(expected_shape)
        for r, shape in shapes.items():
            if shape != expected_shape:
                issues.append(Issue(r, f"shape {shape} differs from expected {expected_shape}"))
    order = {r: i for i, r in enumerate(m.records)}
    issues.sort(key=lambda i: order[i.record])
    return issues


def convert_manifest(m, to, out_dir, side=600, depth_samples=512, num_ascans=360, fill=0.0):
    """Scan-convert every frame of ``m`` into ``out_dir`` and write its manifest.csv."""
    from . import geometry

    to = Representation(to)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for r in m.records:
        img = load_image(m.resolve(r))
        if r.representation is to:
            out = img
        elif to is Representation.CARTESIAN:
            out = geometry.polar_to_cartesian(img, side, fill)
        else:
            out = geometry.cartesian_to_polar(img, depth_samples, num_ascans)
        rel = Path("images") / r.patient_id / f"F{r.frame_id:04d}.png"
        save_image(out_dir / rel, out)
        records.append(FrameRecord(r.patient_id, r.frame_id, rel.as_posix(), r.label, to))
    converted = Manifest(records, out_dir.resolve())
    write_manifest(converted, out_dir / "manifest.csv")
    return converted
