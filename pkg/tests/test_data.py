import json

import numpy as np
import pytest

from dwshare.data import (KINDS, Dataset, SynthDomainSpec, batches, capacity, duplicate_count, generate_domain,
                          generate_synth, load_dataset, load_splits, save_dataset)
from dwshare.errors import DataError, FormatError, InvalidArgumentError


@pytest.mark.parametrize("kind", KINDS)
def test_generators_are_deterministic_and_balanced(kind):
    spec = SynthDomainSpec(kind, 10, {"train": 60, "test": 20}, seed=4)
    a, b = generate_synth(spec, "train"), generate_synth(spec, "train")
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.shape == (60, 3, 32, 32) and a.images.dtype == np.float32
    assert 0 <= a.images.min() and a.images.max() <= 1
    assert np.bincount(a.labels, minlength=10).tolist() == [6] * 10
    splits = generate_domain(spec)
    assert duplicate_count(splits["train"], splits["test"]) == 0


@pytest.mark.parametrize("kind", KINDS)
def test_classes_differ_on_average(kind):
    ds = generate_synth(SynthDomainSpec(kind, 10, {"train": 200}, noise=0.0, seed=1), "train")
    means = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(10)])
    gaps = [np.abs(means[i] - means[j]).mean() for i in range(10) for j in range(i + 1, 10)]
    assert min(gaps) > 1e-3


def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        SynthDomainSpec("clouds")
    with pytest.raises(InvalidArgumentError):
        SynthDomainSpec("polygons", capacity("polygons") + 1)
    with pytest.raises(InvalidArgumentError):
        SynthDomainSpec("blobs", samples={"train": 0})


def test_batches_cover_epoch_once():
    ds = Dataset(np.zeros((10, 1, 2, 2), np.float32), np.arange(10) % 2, 2)
    seen = np.concatenate([y for _, y in batches(ds, 3, seed=0, epoch=1)])
    assert len(seen) == 10 and sorted(seen.tolist()) == sorted(ds.labels.tolist())
    sizes = [len(y) for _, y in batches(ds, 3, 0)]
    assert sizes == [3, 3, 3, 1]
    order1 = [x.sum() for x, _ in batches(ds, 10, 0, 0)]
    assert order1 == [x.sum() for x, _ in batches(ds, 10, 0, 0)]


def test_manifest_round_trip(tmp_path):
    splits = generate_domain(SynthDomainSpec("stripes", 4, {"train": 12, "test": 8}, name="s"))
    path = save_dataset(splits, tmp_path / "s")
    back = load_splits(path)
    assert set(back) == {"train", "test"}
    for k in splits:
        assert np.array_equal(back[k].images, splits[k].images)
        assert np.array_equal(back[k].labels, splits[k].labels)
        assert back[k].num_classes == 4


def test_loader_normalises_out_of_range_images(tmp_path):
    images = np.arange(2 * 3 * 4 * 4, dtype=np.float32).reshape(2, 3, 4, 4)
    path = save_dataset({"train": Dataset(images, np.array([0, 1]), 2)}, tmp_path, "raw")
    ds = load_dataset(path)
    assert ds.images.min() == 0 and ds.images.max() == 1


def test_manifest_errors_name_the_field(tmp_path):
    splits = {"train": Dataset(np.zeros((2, 1, 4, 4), np.float32), np.array([0, 1]), 2)}
    path = save_dataset(splits, tmp_path, "x")
    meta = json.loads(path.read_text())
    del meta["num_classes"]
    path.write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="num_classes"):
        load_dataset(path)
    meta["num_classes"] = 2
    meta["splits"]["train"]["count"] = 3
    path.write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="labels"):
        load_dataset(path)
    meta["splits"]["train"]["count"] = 2
    path.write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="splits.test"):
        load_dataset(path, "test")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nowhere.json")


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 5]), 3)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 4, 4)), np.array([0, 1]), 3)
