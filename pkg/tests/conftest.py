import time

import numpy as np
import pytest

from ivoct_plaque.dataset import FrameRecord, Label, Manifest, Representation, save_image, write_manifest


def smooth_polar(rng, depth=96, ascans=128, harmonics=4):
    """Bandlimited random polar image in [0.1, 0.9]: low angular harmonics x smooth depth profiles."""
    z = np.linspace(0.0, 1.0, depth)[:, None]
    theta = 2 * np.pi * np.arange(ascans)[None, :] / ascans
    img = np.zeros((depth, ascans))
    for h in range(harmonics + 1):
        for kind in (np.cos, np.sin):
            if h == 0 and kind is np.sin:
                continue
            depth_profile = rng.normal() + rng.normal() * np.cos(np.pi * z * rng.uniform(0.5, 2.0))
            img += depth_profile * kind(h * theta) / (1 + h)
    img -= img.min()
    img /= img.max()
    return 0.1 + 0.8 * img


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_manifest(root, labels_by_patient, shape=(16, 12), representation=Representation.POLAR, seed=0):
    """Write random images for ``{patient: [label, ...]}`` and return the manifest."""
    gen = np.random.default_rng(seed)
    records = []
    for pid, labels in labels_by_patient.items():
        for f, lab in enumerate(labels):
            rel = f"img/{pid}_{f}.png"
            save_image(root / rel, gen.random(shape))
            records.append(FrameRecord(pid, f, rel, Label(lab), Representation(representation)))
    m = Manifest(records, root.resolve())
    write_manifest(m, root / "manifest.csv")
    return m


# Acceptance criteria report: one PASS/FAIL line per criterion.
_acceptance = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    ok = call.excinfo is None
    prev = _acceptance.get(number)
    _acceptance[number] = (title, (prev[1] if prev else True) and ok, call.duration + (prev[2] if prev else 0.0))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, ok, duration = _acceptance[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title} ({duration:.1f} s)")


@pytest.fixture
def stopwatch():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
