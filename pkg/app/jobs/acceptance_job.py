import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from app.config import AcceptanceConfig
from app.core.dataset import Dataset
from app.errors import ConfigError
from app.jobs.sweep_job import SweepJob
from app.models import AcceptanceCheck, AcceptanceReport, RunConfig, SweepKind, TrainMode
from app.utils import save_to_json


def mode_means(rows: List[Dict[str, Any]]) -> Dict[str, float]:
    """Mean test accuracy per mode over the seeds of a modes sweep."""
    table = pd.DataFrame(rows)
    if table.empty or table["test_acc"].isna().any():
        raise ConfigError("acceptance needs a test accuracy for every run")
    return {str(mode): float(value) for mode, value in table.groupby("mode", sort=False)["test_acc"].mean().items()}


def check_acceptance(means: Dict[str, float], config: AcceptanceConfig = AcceptanceConfig) -> List[AcceptanceCheck]:
    missing = [mode.value for mode in TrainMode if mode.value not in means]
    if missing:
        raise ConfigError(f"acceptance needs every mode, missing {missing}")
    ours = means[TrainMode.OURS.value]

    def at_least(name: str, value: float, threshold: float) -> AcceptanceCheck:
        return AcceptanceCheck(name=name, value=value, threshold=threshold, passed=value >= threshold)

    sup = means[TrainMode.SUP.value]
    return [
        AcceptanceCheck(name="sup_max", value=sup, threshold=config.SUP_MAX, passed=sup <= config.SUP_MAX),
        at_least("sup_cov_min", means[TrainMode.SUP_COV.value], config.SUP_COV_MIN),
        at_least("ours_minus_sup_cov", ours - means[TrainMode.SUP_COV.value], config.SSL_MARGIN),
        at_least("ours_minus_ours_no_cov", ours - means[TrainMode.OURS_NO_COV.value], config.SSL_MARGIN),
        at_least("ours_minus_ent_cov", ours - means[TrainMode.ENT_COV.value], 0.0),
    ]


class AcceptanceJob:
    """
    Desk-scale acceptance gate: every mode trained on the same data for each seed, then
    relational checks on the per-mode mean test accuracy.
    First-order pooling stays near chance, second-order pooling clears SUP_COV_MIN, and the
    adversarial scheme beats its supervised and first-order counterparts by SSL_MARGIN and
    entropy minimization by any margin.
    """

    def __init__(self, run_config: RunConfig, dataset: Dataset, output_dir: Optional[Path] = None):
        self.logger = logging.getLogger("AcceptanceJob")
        self.config = AcceptanceConfig()
        seeds = run_config.sweep.seeds or list(self.config.SEEDS)
        sweep = run_config.sweep.model_copy(update={"modes": list(TrainMode), "seeds": seeds})
        self.run_config = run_config.model_copy(update={"sweep": sweep})
        self.dataset = dataset
        self.output_dir = Path(output_dir) if output_dir is not None else None

    async def run(self) -> AcceptanceReport:
        rows = await SweepJob(self.run_config, self.dataset, SweepKind.MODES, self.output_dir).run()
        means = mode_means(rows)
        checks = check_acceptance(means, self.config)
        report = AcceptanceReport(
            seeds=list(self.run_config.sweep.seeds),
            mode_means=means,
            checks=checks,
            passed=all(check.passed for check in checks),
        )
        for check in checks:
            log = self.logger.info if check.passed else self.logger.error
            log(f"{check.name}: {check.value:.4f} vs {check.threshold:.4f} {'ok' if check.passed else 'FAILED'}")

        if self.output_dir is not None:
            await save_to_json(
                report.model_dump(mode="json"), self.output_dir / self.config.REPORT_FILENAME, indent=2
            )
        return report
