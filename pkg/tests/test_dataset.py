import numpy as np
import pytest

from telereg.datagen import generate_pair
from telereg.dataset import (
    DatasetError,
    build_dataset,
    list_samples,
    read_manifest,
    read_pair,
    write_pair,
)
from telereg.shapes import make_shape


@pytest.fixture(scope="module")
def shapes():
    return [(f"lamp{i}", make_shape("lamp", np.random.default_rng(i))) for i in range(2)]


def test_pair_round_trip(tmp_path, shapes):
    pair = generate_pair(shapes[0][1], np.random.default_rng(0), category="lamp", shape_id="lamp0")
    write_pair(tmp_path / "s", pair)
    back = read_pair(tmp_path / "s")
    for attr in ("p1", "p2", "r1o_gt", "r2o_gt"):
        assert np.array_equal(getattr(back, attr), getattr(pair, attr)), attr
    assert np.array_equal(back.m12_gt.q, pair.m12_gt.q) and np.array_equal(back.m21_gt.t, pair.m21_gt.t)
    for a, b in zip(back.gt_missing_rc_2, pair.gt_missing_rc_2):
        np.testing.assert_array_equal(a, b)
    assert back.category == "lamp"


def test_build_dataset_manifest(tmp_path, shapes):
    manifest = build_dataset(shapes, tmp_path, "lamp", 5, seed=3, workers=1)
    assert manifest == read_manifest(tmp_path)
    assert [s["id"] for s in manifest["samples"]] == [f"{k:05d}_lamp{k % 2}" for k in range(5)]
    assert sum(len(v) for v in manifest["splits"].values()) == 5
    assert {r.sample_id for r in list_samples(tmp_path)} == {s["id"] for s in manifest["samples"]}
    train = list_samples(tmp_path, "train")
    assert all(r.split == "train" for r in train)


def test_worker_count_does_not_change_output(tmp_path, shapes):
    build_dataset(shapes, tmp_path / "a", "lamp", 4, seed=1, workers=1)
    build_dataset(shapes, tmp_path / "b", "lamp", 4, seed=1, workers=2)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a)


def test_seed_changes_pairs(tmp_path, shapes):
    build_dataset(shapes[:1], tmp_path / "a", "lamp", 1, seed=1, workers=1)
    build_dataset(shapes[:1], tmp_path / "b", "lamp", 1, seed=2, workers=1)
    a = read_pair(list_samples(tmp_path / "a")[0].path)
    b = read_pair(list_samples(tmp_path / "b")[0].path)
    assert not np.array_equal(a.p1, b.p1)


def test_bad_inputs(tmp_path):
    with pytest.raises(DatasetError):
        build_dataset([], tmp_path, "lamp", 1, seed=0)
    with pytest.raises(DatasetError):
        read_manifest(tmp_path / "nowhere")
