import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.config import Config
from app.core.dataset import Dataset, DatasetSplit, load_dataset, save_dataset, split_by_rate
from app.core.synthetic import SyntheticGenerator, generate, matching_count
from app.errors import ChecksumError, ConfigError, SpecError
from app.models import Split, SyntheticSpec
from app.utils import read_json

SMALL = SyntheticSpec(
    num_classes=3,
    labeled_per_class=3,
    unlabeled_per_class=5,
    validation_per_class=2,
    test_per_class=2,
    seed=4,
)


def _toy_dataset(n_unlabeled: int = 200) -> Dataset:
    shape = (1, 2, 2)

    def part(split, start, count, labeled=True):
        return DatasetSplit(
            split=split,
            images=np.zeros((count,) + shape),
            ids=np.arange(start, start + count),
            labels=np.zeros(count, dtype=int) if labeled else None,
        )

    return Dataset(
        labeled=part(Split.LABELED, 0, 4),
        unlabeled=part(Split.UNLABELED, 4, n_unlabeled, labeled=False),
        validation=part(Split.VALIDATION, 4 + n_unlabeled, 2),
        test=part(Split.TEST, 6 + n_unlabeled, 2),
        num_classes=2,
    )


def _nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    classes = np.unique(train_y)
    centroids = np.stack([train_x[train_y == label].mean(axis=0) for label in classes])
    distances = ((test_x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(classes[np.argmin(distances, axis=1)] == test_y))


def _first_and_second_order(images: np.ndarray):
    channels = images.shape[1]
    flat = images.reshape(len(images), channels, -1).transpose(0, 2, 1)
    rows, cols = np.triu_indices(channels)
    gap = flat.mean(axis=1)
    cov = np.stack([np.cov(x, rowvar=False, bias=True)[rows, cols] for x in flat])
    return gap, cov


def test_matching_count():
    assert matching_count(4) == 3
    assert matching_count(6) == 15
    assert matching_count(8) == 105


def test_generation_is_deterministic():
    first, second = generate(SMALL), generate(SMALL)

    for which in Split:
        np.testing.assert_array_equal(first.split(which).images, second.split(which).images)
        np.testing.assert_array_equal(first.split(which).ids, second.split(which).ids)


def test_split_sizes_and_disjoint_ids():
    dataset = generate(SMALL)

    assert dataset.counts() == {"labeled": 9, "unlabeled": 15, "validation": 6, "test": 6}
    assert dataset.image_shape == (8, 16, 16)
    assert dataset.unlabeled.labels is None
    all_ids = np.concatenate([dataset.split(which).ids for which in Split])
    assert np.unique(all_ids).size == all_ids.size


def test_signatures_are_distinct_perfect_matchings():
    generator = SyntheticGenerator(SyntheticSpec(seed=1))

    signatures = [tuple(signature) for signature in generator.signatures]

    assert len(set(signatures)) == 10
    for signature in generator.signatures:
        assert sorted(part for pair in signature for part in pair) == list(range(8))


def test_every_part_placed_once():
    generator = SyntheticGenerator(SMALL)

    for label in range(SMALL.num_classes):
        layout = generator.sample_layout(label)
        assert sorted(placement.part for placement in layout) == list(range(SMALL.num_parts))


def test_infeasible_specs_are_rejected():
    with pytest.raises(SpecError):
        SyntheticGenerator(SyntheticSpec(num_classes=4, num_parts=4))
    with pytest.raises(SpecError):
        SyntheticGenerator(SyntheticSpec(height=4, width=4))


def test_class_information_is_second_order():
    spec = SyntheticSpec(
        labeled_per_class=20, unlabeled_per_class=0, validation_per_class=0, test_per_class=20, seed=2
    )
    dataset = generate(spec)
    train_gap, train_cov = _first_and_second_order(dataset.labeled.images)
    test_gap, test_cov = _first_and_second_order(dataset.test.images)

    gap_accuracy = _nearest_centroid_accuracy(train_gap, dataset.labeled.labels, test_gap, dataset.test.labels)
    cov_accuracy = _nearest_centroid_accuracy(train_cov, dataset.labeled.labels, test_cov, dataset.test.labels)

    assert cov_accuracy >= 0.8
    assert gap_accuracy <= 0.3


def test_split_by_rate():
    dataset = _toy_dataset(200)

    none = split_by_rate(dataset, 0.0)
    half = split_by_rate(dataset, 0.5)

    assert len(none.unlabeled) == 0
    assert split_by_rate(dataset, 1.0) is dataset
    assert len(half.unlabeled) == 100
    assert np.all(np.diff(half.unlabeled.ids) > 0)
    assert set(half.unlabeled.ids) <= set(dataset.unlabeled.ids)
    assert half.labeled is dataset.labeled
    with pytest.raises(ConfigError):
        split_by_rate(dataset, 1.5)


@pytest.mark.asyncio
async def test_save_and_load_round_trip(tmp_path):
    dataset = generate(SMALL)

    await save_dataset(dataset, tmp_path)
    loaded = load_dataset(tmp_path)

    for which in Split:
        np.testing.assert_array_equal(loaded.split(which).images, dataset.split(which).images)
        np.testing.assert_array_equal(loaded.split(which).ids, dataset.split(which).ids)
    np.testing.assert_array_equal(loaded.labeled.labels, dataset.labeled.labels)
    assert loaded.unlabeled.labels is None
    assert loaded.spec == SMALL
    manifest = read_json(tmp_path / Config.MANIFEST_FILENAME)
    assert manifest["counts"] == {"n_l": 9, "n_u": 15, "K": 3}
    assert manifest["byte_order"] == "little"


@pytest.mark.asyncio
async def test_float32_storage(tmp_path):
    dataset = generate(SMALL)

    await save_dataset(dataset, tmp_path, storage="float32")
    loaded = load_dataset(tmp_path)

    np.testing.assert_allclose(loaded.test.images, dataset.test.images, rtol=1e-6, atol=1e-6)


@pytest.mark.asyncio
async def test_truncated_file_fails_checksum(tmp_path):
    await save_dataset(generate(SMALL), tmp_path)
    path = tmp_path / "test.images.bin"
    path.write_bytes(path.read_bytes()[:100])

    with pytest.raises(ChecksumError):
        load_dataset(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset(tmp_path)
