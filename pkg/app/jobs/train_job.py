import asyncio
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from app.config import Config, TrainJobConfig
from app.core.checkpoint import load_checkpoint, save_checkpoint
from app.core.dataset import Dataset
from app.core.trainer import Batch, FitResult, SSLTrainer, evaluate, reporting_sample_ids
from app.models import METRICS_COLUMNS, RunConfig, Split
from app.utils import dump_model, save_to_json, write_csv


class SSLTrainJob:
    """
    Trains one run configuration and writes its artifacts into the output directory:

    - resolved-config.json: the run document with every default filled in
    - metrics.csv: one row per evaluation point (iteration,L,H,val_acc,test_acc,ms)
    - final.bin / final.json and best.bin / best.json: checkpoints of the last and the
      validation-selected parameters
    - summary.json: best validation accuracy, matching test accuracy, iterations run
    """

    def __init__(self, run_config: RunConfig, dataset: Dataset, output_dir: Path):
        self.logger = logging.getLogger("SSLTrainJob")
        self.config = TrainJobConfig()
        self.run_config = run_config
        self.dataset = dataset
        self.output_dir = Path(output_dir)

    async def run(self) -> FitResult:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        await save_to_json(
            dump_model(self.run_config), self.output_dir / Config.RESOLVED_CONFIG_FILENAME, indent=2
        )

        trainer = SSLTrainer(self.dataset, self.run_config.train, self.run_config.model, self.run_config.sop)
        result = await asyncio.to_thread(trainer.fit)

        write_csv(
            [record.csv_row() for record in result.records],
            METRICS_COLUMNS,
            self.output_dir / Config.METRICS_FILENAME,
        )
        await save_checkpoint(trainer.network, self.output_dir / self.config.FINAL_CHECKPOINT)
        best = trainer.network.clone()
        best.load_state_dict(result.best_state)
        await save_checkpoint(best, self.output_dir / self.config.BEST_CHECKPOINT)
        await save_to_json(result.summary(), self.output_dir / "summary.json", indent=2)

        self.logger.info(
            f"Run finished after {result.iterations_run} iterations: best validation {result.best_val_acc} "
            f"(iteration {result.best_iteration}), test {result.test_acc}"
        )
        return result


def evaluate_checkpoint(checkpoint: Path, dataset: Dataset, split: Split = Split.TEST) -> Dict[str, object]:
    network = load_checkpoint(checkpoint)
    part = dataset.split(split)
    return {"split": split.value, "n": len(part), "accuracy": evaluate(network, part)}


class FeatureExportJob:
    """Writes the pooled feature vector of every sample of a split as label,f0..f{m-1} rows."""

    def __init__(
        self,
        checkpoint: Path,
        dataset: Dataset,
        output: Path,
        split: Split = Split.TEST,
        batch_size: int = 100,
    ):
        self.logger = logging.getLogger("FeatureExportJob")
        self.checkpoint = Path(checkpoint)
        self.dataset = dataset
        self.output = Path(output)
        self.split = split
        self.batch_size = batch_size

    def features(self) -> np.ndarray:
        network = load_checkpoint(self.checkpoint)
        part = self.dataset.split(self.split)
        chunks = []
        for start in range(0, len(part), self.batch_size):
            batch = Batch(part.images[start : start + self.batch_size], part.ids[start : start + self.batch_size])
            with reporting_sample_ids(batch):
                chunks.append(network.features(batch.images).data)
        if not chunks:
            return np.zeros((0, network.feature_dim))
        return np.concatenate(chunks)

    async def run(self, output: Optional[Path] = None) -> Path:
        output = Path(output) if output is not None else self.output
        part = self.dataset.split(self.split)
        features = await asyncio.to_thread(self.features)
        columns = ["label"] + [f"f{index}" for index in range(features.shape[1])]
        labels = part.labels if part.labels is not None else np.full(len(part), -1)
        rows = [
            {"label": int(label), **{f"f{index}": float(value) for index, value in enumerate(row)}}
            for label, row in zip(labels, features)
        ]
        write_csv(rows, columns, output)
        self.logger.info(f"Exported {len(rows)} feature rows of width {features.shape[1]} to {output}")
        return output

