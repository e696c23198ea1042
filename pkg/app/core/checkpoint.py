import logging
from pathlib import Path
from typing import Tuple

import numpy as np

from app.core.network import Network, build_network
from app.errors import ChecksumError, ConfigError
from app.models import ModelConfig, SopConfig, TrainMode
from app.utils import read_json, save_bytes, save_to_json, sha256_file

logger = logging.getLogger("Checkpoint")


def checkpoint_paths(prefix: Path) -> Tuple[Path, Path]:
    """`runs/x/best` -> (runs/x/best.bin, runs/x/best.json)."""
    prefix = Path(prefix)
    if prefix.suffix in (".bin", ".json"):
        prefix = prefix.with_suffix("")
    return prefix.with_name(prefix.name + ".bin"), prefix.with_name(prefix.name + ".json")


async def save_checkpoint(network: Network, prefix: Path) -> Path:
    """
    Flat little-endian float64 blob of all parameters in registration order, plus a JSON
    sidecar with names, shapes, groups, offsets and the model structure.
    :return: Path of the sidecar.
    """
    blob_path, sidecar_path = checkpoint_paths(prefix)
    entries, offset = [], 0
    for param in network.parameters:
        count = int(param.data.size)
        entries.append(
            {
                "name": param.name,
                "shape": list(param.data.shape),
                "group": param.group.value,
                "offset": offset,
                "count": count,
            }
        )
        offset += count

    blob = np.concatenate([param.data.reshape(-1) for param in network.parameters]).astype("<f8")
    await save_bytes(blob.tobytes(), blob_path)
    sidecar = {
        "byte_order": "little",
        "dtype": "float64",
        "mode": network.mode.value,
        "num_classes": network.num_classes,
        "input_shape": list(network.input_shape),
        "model": network.model_config.model_dump(mode="json"),
        "sop": network.sop_config.model_dump(mode="json"),
        "sha256": sha256_file(blob_path),
        "parameters": entries,
    }
    await save_to_json(sidecar, sidecar_path, indent=2)
    return sidecar_path


def load_checkpoint(prefix: Path) -> Network:
    blob_path, sidecar_path = checkpoint_paths(prefix)
    if not sidecar_path.is_file() or not blob_path.is_file():
        raise ConfigError(f"checkpoint {prefix} not found (expected {blob_path.name} and {sidecar_path.name})")
    sidecar = read_json(sidecar_path)
    if sha256_file(blob_path) != sidecar.get("sha256"):
        raise ChecksumError(f"checkpoint blob {blob_path} does not match its sidecar")

    network = build_network(
        TrainMode(sidecar["mode"]),
        ModelConfig.model_validate(sidecar["model"]),
        SopConfig.model_validate(sidecar["sop"]),
        tuple(sidecar["input_shape"]),
        int(sidecar["num_classes"]),
        np.random.default_rng(0),
    )
    values = np.fromfile(blob_path, dtype="<f8")
    state = {}
    for entry in sidecar["parameters"]:
        end = entry["offset"] + entry["count"]
        if end > values.size:
            raise ChecksumError(f"checkpoint blob {blob_path} is truncated at {entry['name']}")
        state[entry["name"]] = values[entry["offset"] : end].reshape(entry["shape"]).astype(np.float64)
    network.load_state_dict(state)
    logger.info(f"Loaded {sidecar['mode']} checkpoint from {prefix}")
    return network
