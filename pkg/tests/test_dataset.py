from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from ivoct_plaque.dataset import (
    FrameRecord,
    Label,
    Manifest,
    ManifestError,
    Representation,
    class_balance,
    convert_manifest,
    load_image,
    load_manifest,
    patient_split,
    save_image,
    validate_dataset,
    write_manifest,
)

from conftest import make_manifest

HEADER = "patient_id,frame_id,image_path,label,representation\n"


def write_csv(path, rows):
    path.write_text(HEADER + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


def synthetic_manifest(n_patients, frames, seed=0, root="/data"):
    gen = np.random.default_rng(seed)
    records = []
    for p in range(n_patients):
        for f in range(frames):
            lab = Label.PLAQUE if gen.random() < 0.55 else Label.NO_PLAQUE
            records.append(FrameRecord(f"pt{p:02d}", f, f"p{p}/f{f}.png", lab, Representation.POLAR))
    return Manifest(records, root)


def test_load_three_rows(tmp_path):
    path = write_csv(tmp_path / "m.csv", [
        "A,0,a0.png,plaque,polar",
        "A,1,a1.png,no_plaque,polar",
        "B,0,b0.png,plaque,polar",
    ])
    m = load_manifest(path)
    assert len(m) == 3
    assert m.patients == ["A", "B"]
    assert [r.label for r in m.records] == [Label.PLAQUE, Label.NO_PLAQUE, Label.PLAQUE]
    assert m.source_root == tmp_path.resolve()


def test_unknown_label_names_line(tmp_path):
    path = write_csv(tmp_path / "m.csv", ["A,0,a0.png,maybe,polar"])
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(path)


@pytest.mark.parametrize("rows, match", [
    (["A,0,a.png,plaque,polar", "A,0,b.png,plaque,polar"], "line 3: duplicate"),
    (["A,x,a.png,plaque,polar"], "line 2"),
    (["A,0,a.png,plaque"], "line 2"),
    (["A,0,a.png,PLAQUE,polar"], "unknown label"),
    (["A,0,a.png,plaque,spherical"], "unknown representation"),
    (["A,0,a.png,plaque,polar", "B,0,b.png,plaque,cartesian"], "mixed"),
])
def test_malformed_rows(tmp_path, rows, match):
    with pytest.raises(ManifestError, match=match):
        load_manifest(write_csv(tmp_path / "m.csv", rows))


def test_missing_file_and_bad_header(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.csv")
    (tmp_path / "h.csv").write_text("a,b,c\n")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(tmp_path / "h.csv")


def test_write_then_load_is_identity(tmp_path):
    m = make_manifest(tmp_path, {"A": ["plaque", "no_plaque"], "B": ["plaque"]})
    again = load_manifest(tmp_path / "manifest.csv")
    assert again == m


def test_write_elsewhere_rebases_paths(tmp_path):
    m = make_manifest(tmp_path / "src", {"A": ["plaque"], "B": ["no_plaque"]})
    out = write_manifest(m, tmp_path / "splits" / "x.csv")
    again = load_manifest(out)
    assert [again.resolve(r).resolve() for r in again.records] == [m.resolve(r).resolve() for r in m.records]
    assert validate_dataset(again) == []


def test_split_clinical_sizes():
    m = synthetic_manifest(41, 7)
    s = patient_split(m, 6, seed=3)
    assert len(s.test.patients) == 6
    assert len(s.train.patients) == 35
    assert not set(s.train.patients) & set(s.test.patients)


def test_split_two_patients():
    m = synthetic_manifest(2, 5)
    s = patient_split(m, 1, seed=0)
    assert len(s.test.patients) == 1 and len(s.train.patients) == 1
    assert len(s.test) == 5 and len(s.train) == 5


def test_split_is_deterministic_and_row_order_independent(tmp_path):
    m = synthetic_manifest(10, 3)
    a, b = patient_split(m, 3, seed=42), patient_split(m, 3, seed=42)
    assert a == b
    write_manifest(a.test, tmp_path / "a.csv")
    write_manifest(b.test, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    shuffled = Manifest(list(reversed(m.records)), m.source_root)
    assert patient_split(shuffled, 3, seed=42).test.patients == a.test.patients


def test_split_range_errors():
    m = synthetic_manifest(4, 2)
    for k in (0, 4, -1):
        with pytest.raises(ValueError):
            patient_split(m, k, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 15), st.integers(1, 4), st.integers(0, 2**64 - 1), st.data())
def test_split_partition_property(n_patients, frames, seed, data):
    m = synthetic_manifest(n_patients, frames)
    k = data.draw(st.integers(1, n_patients - 1))
    s = patient_split(m, k, seed)
    train, test = set(s.train.records), set(s.test.records)
    assert train | test == set(m.records)
    assert not train & test
    assert not set(s.train.patients) & set(s.test.patients)
    assert len(s.test.patients) == k
    # every frame of a patient lands on one side
    for p in m.patients:
        sides = {r in test for r in m.records if r.patient_id == p}
        assert len(sides) == 1


def test_class_balance_examples():
    recs = [FrameRecord("A", i, f"{i}.png", Label.PLAQUE if i < 9 else Label.NO_PLAQUE, Representation.POLAR)
            for i in range(20)]
    assert class_balance(Manifest(recs, "/")) == pytest.approx(0.55)
    allp = [FrameRecord("A", i, f"{i}.png", Label.PLAQUE, Representation.POLAR) for i in range(3)]
    assert class_balance(Manifest(allp, "/")) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_class_balance_complements_plaque_fraction(flags):
    recs = [FrameRecord("A", i, f"{i}.png", Label.PLAQUE if f else Label.NO_PLAQUE, Representation.POLAR)
            for i, f in enumerate(flags)]
    b = class_balance(Manifest(recs, "/"))
    assert 0.0 <= b <= 1.0
    exact = 1 - Fraction(sum(flags), len(flags))
    assert b == float(exact)


def test_validate_clean_and_broken(tmp_path):
    m = make_manifest(tmp_path, {"A": ["plaque", "no_plaque", "plaque"]})
    assert validate_dataset(m) == []

    (tmp_path / m.records[1].image_path).unlink()
    issues = validate_dataset(m)
    assert len(issues) == 1 and issues[0].record == m.records[1]
    assert "missing" in issues[0].message


def test_validate_rgb_and_shape(tmp_path):
    m = make_manifest(tmp_path, {"A": ["plaque", "no_plaque", "plaque"]}, shape=(16, 12))
    Image.fromarray(np.zeros((16, 12, 3), dtype=np.uint8)).save(tmp_path / m.records[0].image_path)
    save_image(tmp_path / m.records[2].image_path, np.zeros((20, 12)))
    issues = validate_dataset(m)
    assert [i.record for i in issues] == [m.records[0], m.records[2]]
    assert "not grayscale" in issues[0].message
    assert "shape" in issues[1].message


def test_validate_cartesian_must_be_square(tmp_path):
    m = make_manifest(tmp_path, {"A": ["plaque"]}, shape=(16, 12), representation="cartesian")
    assert len(validate_dataset(m)) == 1


def test_image_io_round_trip(tmp_path):
    img = np.random.default_rng(0).random((20, 30))
    save_image(tmp_path / "a.png", img)
    assert np.abs(load_image(tmp_path / "a.png") - img).max() <= 0.5 / 65535 + 1e-12
    save_image(tmp_path / "b.png", img, bits=8)
    back = load_image(tmp_path / "b.png")
    assert back.max() <= 1.0 and np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "c.png")
    with pytest.raises(ValueError, match="grayscale"):
        load_image(tmp_path / "c.png")


def test_convert_manifest_round_trip(tmp_path):
    m = make_manifest(tmp_path / "polar", {"A": ["plaque", "no_plaque"]}, shape=(32, 64))
    cart = convert_manifest(m, "cartesian", tmp_path / "cart", side=64)
    assert cart.representation is Representation.CARTESIAN
    assert [r.label for r in cart.records] == [r.label for r in m.records]
    assert load_image(cart.resolve(cart.records[0])).shape == (64, 64)
    assert validate_dataset(cart) == []
    back = convert_manifest(cart, "polar", tmp_path / "back", depth_samples=32, num_ascans=64)
    assert load_image(back.resolve(back.records[0])).shape == (32, 64)
    assert load_manifest(tmp_path / "back" / "manifest.csv") == back
