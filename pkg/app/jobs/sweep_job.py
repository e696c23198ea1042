import asyncio
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from app.config import Config, SweepConfig
from app.core.dataset import Dataset, split_by_rate
from app.core.trainer import SSLTrainer
from app.errors import ConfigError
from app.models import RunConfig, SweepKind, TrainMode
from app.utils import dump_model, save_to_json, write_csv

RESULT_COLUMNS = ["seed", "best_val_acc", "test_acc", "iterations_run"]
KEY_COLUMNS = {
    SweepKind.LAMBDA: ["lambda"],
    SweepKind.LABEL_RATE: ["label_rate", "n_unlabeled", "mode"],
    SweepKind.BATCH: ["batch_labeled", "batch_unlabeled"],
    SweepKind.MODES: ["mode"],
}


class SweepJob:
    """
    Fans out one full training run per grid point and seed, and collects one CSV row per run.

    Kinds:
    - lambda: every value of the lambda grid (all must be > 0)
    - label_rate: floor(rate * n_u) unlabeled samples per rate; rate 0 trains sup_cov
    - batch: (labeled, unlabeled) mini-batch size pairs
    - modes: every training mode on the same data, for paired comparisons

    Runs are independent and execute in worker threads, at most SweepConfig.CONCURRENT_RUNS
    at a time. Rows come back in grid order regardless of completion order.
    """

    def __init__(
        self,
        run_config: RunConfig,
        dataset: Dataset,
        kind: SweepKind,
        output_dir: Optional[Path] = None,
    ):
        self.logger = logging.getLogger("SweepJob")
        self.config = SweepConfig()
        self.run_config = run_config
        self.dataset = dataset
        self.kind = SweepKind(kind)
        self.output_dir = Path(output_dir) if output_dir is not None else None

    @property
    def columns(self) -> List[str]:
        return KEY_COLUMNS[self.kind] + RESULT_COLUMNS

    def grid(self) -> List[Dict[str, Any]]:
        """Grid points (column values) crossed with the seeds."""
        spec = self.run_config.sweep
        if self.kind is SweepKind.LAMBDA:
            if any(value <= 0 for value in spec.lambda_grid):
                raise ConfigError(f"lambda sweep values must be > 0, got {spec.lambda_grid}")
            points = [{"lambda": value} for value in spec.lambda_grid]
        elif self.kind is SweepKind.LABEL_RATE:
            if any(not 0.0 <= rate <= 1.0 for rate in spec.label_rates):
                raise ConfigError(f"label rates must lie in [0, 1], got {spec.label_rates}")
            points = [{"label_rate": rate} for rate in spec.label_rates]
        elif self.kind is SweepKind.BATCH:
            if any(min(pair) < 1 for pair in spec.batch_grid):
                raise ConfigError(f"batch sizes must be >= 1, got {spec.batch_grid}")
            points = [{"batch_labeled": labeled, "batch_unlabeled": unlabeled} for labeled, unlabeled in spec.batch_grid]
        else:
            points = [{"mode": TrainMode(mode).value} for mode in spec.modes]

        if not points:
            raise ConfigError(f"empty {self.kind.value} grid")
        seeds = spec.seeds if spec.seeds else [self.run_config.train.seed]
        return [{**point, "seed": seed} for point in points for seed in seeds]

    def _run_point(self, point: Dict[str, Any]) -> Dict[str, Any]:
        train = self.run_config.train
        update: Dict[str, Any] = {"seed": point["seed"]}
        dataset = self.dataset
        row = dict(point)

        if self.kind is SweepKind.LAMBDA:
            update["lambda_"] = point["lambda"]
        elif self.kind is SweepKind.LABEL_RATE:
            dataset = split_by_rate(self.dataset, point["label_rate"], seed=point["seed"])
            mode = train.mode if len(dataset.unlabeled) else TrainMode.SUP_COV
            update["mode"] = mode
            row.update({"n_unlabeled": len(dataset.unlabeled), "mode": mode.value})
        elif self.kind is SweepKind.BATCH:
            update["batch_labeled"] = point["batch_labeled"]
            update["batch_unlabeled"] = point["batch_unlabeled"]
        else:
            update["mode"] = TrainMode(point["mode"])

        config = train.model_copy(update=update)
        result = SSLTrainer(dataset, config, self.run_config.model, self.run_config.sop).fit()
        row.update(
            {
                "best_val_acc": result.best_val_acc,
                "test_acc": result.test_acc,
                "iterations_run": result.iterations_run,
            }
        )
        self.logger.info(f"{self.kind.value} sweep point {point}: test {result.test_acc}")
        return row

    async def _run_limited(self, point: Dict[str, Any], semaphore: asyncio.Semaphore) -> Dict[str, Any]:
        async with semaphore:
            return await asyncio.to_thread(self._run_point, point)

    async def run(self) -> List[Dict[str, Any]]:
        grid = self.grid()
        self.logger.info(f"Starting {self.kind.value} sweep: {len(grid)} runs, {self.config.CONCURRENT_RUNS} at a time")
        semaphore = asyncio.Semaphore(self.config.CONCURRENT_RUNS)
        rows = await asyncio.gather(*(self._run_limited(point, semaphore) for point in grid))
        rows = [{column: row.get(column) for column in self.columns} for row in rows]

        if self.kind in (SweepKind.MODES, SweepKind.LABEL_RATE):
            key = "mode" if self.kind is SweepKind.MODES else "label_rate"
            means = pd.DataFrame(rows).groupby(key, sort=False)["test_acc"].mean()
            for value, accuracy in means.items():
                self.logger.info(f"mean test accuracy for {key}={value}: {accuracy:.4f}")

        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            await save_to_json(
                dump_model(self.run_config), self.output_dir / Config.RESOLVED_CONFIG_FILENAME, indent=2
            )
            write_csv(rows, self.columns, self.output_dir / Config.SWEEP_FILENAME)
        return rows
