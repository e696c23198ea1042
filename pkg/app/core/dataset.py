"""
Dataset containers and the on-disk layout: one little-endian flat binary per split array plus
a manifest.json with the spec echo, counts, shapes and sha256 checksums.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from app.config import Config
from app.errors import ChecksumError, ConfigError, ContractError
from app.models import Split, SyntheticSpec
from app.utils import read_json, save_bytes, save_to_json, sha256_file

logger = logging.getLogger("Dataset")

SPLIT_ORDER = (Split.LABELED, Split.UNLABELED, Split.VALIDATION, Split.TEST)
STORAGE_DTYPES = {"float64": "<f8", "float32": "<f4"}


@dataclass
class DatasetSplit:
    split: Split
    images: np.ndarray
    ids: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if (self.labels is None) != (self.split is Split.UNLABELED):
            raise ContractError(f"{self.split.value} split must {'not ' if self.split is Split.UNLABELED else ''}carry labels")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def take(self, indices) -> "DatasetSplit":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetSplit(
            split=self.split,
            images=self.images[indices],
            ids=self.ids[indices],
            labels=None if self.labels is None else self.labels[indices],
        )

    @classmethod
    def empty(cls, split: Split, image_shape) -> "DatasetSplit":
        return cls(
            split=split,
            images=np.zeros((0,) + tuple(image_shape)),
            ids=np.zeros(0, dtype=np.int64),
            labels=None if split is Split.UNLABELED else np.zeros(0, dtype=np.int64),
        )


@dataclass
class Dataset:
    labeled: DatasetSplit
    unlabeled: DatasetSplit
    validation: DatasetSplit
    test: DatasetSplit
    num_classes: int
    spec: Optional[SyntheticSpec] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def split(self, which: Split) -> DatasetSplit:
        return getattr(self, which.value)

    @property
    def image_shape(self):
        return tuple(self.labeled.images.shape[1:])

    def counts(self) -> Dict[str, int]:
        return {which.value: len(self.split(which)) for which in SPLIT_ORDER}

    def validate(self) -> None:
        """Disjoint sample ids across splits and labels inside [0, K)."""
        seen = np.concatenate([self.split(which).ids for which in SPLIT_ORDER])
        if np.unique(seen).size != seen.size:
            raise ContractError("dataset splits share sample ids")
        for which in SPLIT_ORDER:
            labels = self.split(which).labels
            if labels is not None and labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ContractError(f"{which.value} labels outside [0, {self.num_classes})")

    def with_unlabeled(self, unlabeled: DatasetSplit) -> "Dataset":
        return Dataset(
            labeled=self.labeled,
            unlabeled=unlabeled,
            validation=self.validation,
            test=self.test,
            num_classes=self.num_classes,
            spec=self.spec,
            meta=dict(self.meta),
        )


def split_by_rate(dataset: Dataset, label_rate: float, seed: int = 0) -> Dataset:
    """
    Keep floor(label_rate * n_u) unlabeled samples, a fixed-seed subset in original order.
    Labeled, validation and test splits are shared, not copied.
    """
    if not 0.0 <= label_rate <= 1.0:
        raise ConfigError(f"label rate must lie in [0, 1], got {label_rate}")
    total = len(dataset.unlabeled)
    keep = min(total, int(math.floor(label_rate * total + 1e-9)))
    if keep == total:
        return dataset
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.permutation(total)[:keep])
    logger.info(f"Label rate {label_rate}: keeping {keep} of {total} unlabeled samples")
    return dataset.with_unlabeled(dataset.unlabeled.take(indices))


def _files(split: Split) -> Dict[str, str]:
    return {
        "images": f"{split.value}.images.bin",
        "labels": f"{split.value}.labels.bin",
        "ids": f"{split.value}.ids.bin",
    }


async def save_dataset(dataset: Dataset, directory: Path, storage: str = "float64") -> Path:
    """
    Write every split and the manifest into `directory` (created if missing).
    :param storage: "float64" (default) or "float32" for the image arrays.
    :return: Path of the manifest.
    """
    if storage not in STORAGE_DTYPES:
        raise ConfigError(f"unknown storage dtype {storage!r}, expected one of {sorted(STORAGE_DTYPES)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    splits = {}
    for which in SPLIT_ORDER:
        part = dataset.split(which)
        names = _files(which)
        arrays = {
            "images": part.images.astype(STORAGE_DTYPES[storage]),
            "ids": part.ids.astype("<i8"),
        }
        if part.labels is not None:
            arrays["labels"] = part.labels.astype("<i8")

        entry = {"count": len(part), "shape": list(part.images.shape), "files": {}}
        for key, array in arrays.items():
            path = directory / names[key]
            await save_bytes(array.tobytes(), path)
            entry["files"][key] = {"name": names[key], "sha256": sha256_file(path)}
        splits[which.value] = entry

    manifest = {
        "format": 1,
        "byte_order": "little",
        "dtype": storage,
        "num_classes": dataset.num_classes,
        "image_shape": list(dataset.image_shape),
        "counts": {"n_l": len(dataset.labeled), "n_u": len(dataset.unlabeled), "K": dataset.num_classes},
        "spec": None if dataset.spec is None else dataset.spec.model_dump(mode="json"),
        "meta": dataset.meta,
        "splits": splits,
    }
    manifest_path = directory / Config.MANIFEST_FILENAME
    await save_to_json(manifest, manifest_path, indent=2)
    return manifest_path


def _read_array(directory: Path, file_entry: Dict[str, str], dtype: str, shape) -> np.ndarray:
    path = directory / file_entry["name"]
    if not path.is_file():
        raise ChecksumError(f"missing dataset file {path}")
    if sha256_file(path) != file_entry["sha256"]:
        raise ChecksumError(f"checksum mismatch for {path}")
    array = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if array.size != expected:
        raise ChecksumError(f"{path} holds {array.size} values, manifest expects {expected}")
    return array.reshape(shape)


def load_dataset(directory: Path) -> Dataset:
    """Read a dataset written by save_dataset, verifying every checksum first."""
    directory = Path(directory)
    manifest_path = directory / Config.MANIFEST_FILENAME
    if not manifest_path.is_file():
        raise ConfigError(f"no dataset manifest at {manifest_path}")
    try:
        manifest = read_json(manifest_path)
        storage = STORAGE_DTYPES[manifest["dtype"]]
        split_entries = {which: manifest["splits"][which.value] for which in SPLIT_ORDER}
    except (ValueError, KeyError) as e:
        raise ChecksumError(f"corrupt manifest {manifest_path}: {e}") from e

    parts = {}
    for which, entry in split_entries.items():
        shape = tuple(entry["shape"])
        files = entry["files"]
        images = _read_array(directory, files["images"], storage, shape).astype(np.float64)
        ids = _read_array(directory, files["ids"], "<i8", (entry["count"],))
        labels = _read_array(directory, files["labels"], "<i8", (entry["count"],)) if "labels" in files else None
        parts[which.value] = DatasetSplit(split=which, images=images, ids=ids, labels=labels)

    dataset = Dataset(
        num_classes=int(manifest["num_classes"]),
        spec=None if manifest.get("spec") is None else SyntheticSpec.model_validate(manifest["spec"]),
        meta=manifest.get("meta", {}),
        **parts,
    )
    dataset.validate()
    logger.info(f"Loaded dataset from {directory}: {dataset.counts()}")
    return dataset
