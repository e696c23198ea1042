import os
import sys
from unittest.mock import AsyncMock, patch

import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.cli import main
from app.config import AcceptanceConfig
from app.core.synthetic import generate
from app.core.trainer import run_baseline
from app.errors import ConfigError
from app.jobs.acceptance_job import AcceptanceJob, check_acceptance, mode_means
from app.models import AcceptanceReport, SyntheticSpec, TrainMode
from app.utils import load_run_config

PASSING = {"sup": 0.12, "sup_cov": 0.85, "ent_cov": 0.86, "ours_no_cov": 0.15, "ours": 0.9}


def _rows(means, seeds=(0, 1)):
    return [{"mode": mode, "seed": seed, "test_acc": value} for seed in seeds for mode, value in means.items()]


def test_mode_means_averages_over_seeds():
    rows = [
        {"mode": "sup", "seed": 0, "test_acc": 0.1},
        {"mode": "sup", "seed": 1, "test_acc": 0.3},
        {"mode": "ours", "seed": 0, "test_acc": 0.8},
        {"mode": "ours", "seed": 1, "test_acc": 1.0},
    ]

    assert mode_means(rows) == pytest.approx({"sup": 0.2, "ours": 0.9})


def test_mode_means_needs_every_accuracy():
    with pytest.raises(ConfigError):
        mode_means([])
    with pytest.raises(ConfigError):
        mode_means([{"mode": "sup", "seed": 0, "test_acc": None}])


def test_passing_means_clear_every_check():
    checks = check_acceptance(mode_means(_rows(PASSING)))

    assert [check.name for check in checks] == [
        "sup_max",
        "sup_cov_min",
        "ours_minus_sup_cov",
        "ours_minus_ours_no_cov",
        "ours_minus_ent_cov",
    ]
    assert all(check.passed for check in checks)


@pytest.mark.parametrize(
    "mode, value, failing",
    [
        ("sup", 0.5, "sup_max"),
        ("sup_cov", 0.7, "sup_cov_min"),
        ("sup_cov", 0.89, "ours_minus_sup_cov"),
        ("ent_cov", 0.95, "ours_minus_ent_cov"),
    ],
)
def test_each_check_can_fail_on_its_own(mode, value, failing):
    checks = check_acceptance({**PASSING, mode: value})

    assert [check.name for check in checks if not check.passed] == [failing]


def test_missing_mode_is_rejected():
    means = dict(PASSING)
    del means["ent_cov"]

    with pytest.raises(ConfigError):
        check_acceptance(means)


def test_shipped_run_document_is_valid():
    config = load_run_config(AcceptanceConfig.RUN_DOCUMENT)

    assert config.sweep.seeds == AcceptanceConfig.SEEDS
    assert config.sweep.modes == list(TrainMode)
    assert config.data.num_classes == 10
    assert (
        config.data.labeled_per_class,
        config.data.unlabeled_per_class,
        config.data.validation_per_class,
        config.data.test_per_class,
    ) == (20, 200, 20, 50)
    assert config.model.logit_scale == 40.0
    assert config.train.lambda_ > 0


def test_job_runs_every_mode_on_default_seeds():
    config = load_run_config(AcceptanceConfig.RUN_DOCUMENT)
    config = config.model_copy(update={"sweep": config.sweep.model_copy(update={"modes": [TrainMode.OURS], "seeds": None})})

    job = AcceptanceJob(config, dataset=None)

    assert job.run_config.sweep.modes == list(TrainMode)
    assert job.run_config.sweep.seeds == AcceptanceConfig.SEEDS


def test_second_order_pooling_learns_what_average_pooling_cannot():
    config = load_run_config(AcceptanceConfig.RUN_DOCUMENT)
    spec = SyntheticSpec(
        num_classes=3,
        labeled_per_class=10,
        unlabeled_per_class=0,
        validation_per_class=10,
        test_per_class=20,
        seed=1,
    )
    dataset = generate(spec)
    train = config.train.model_copy(update={"iterations": 800, "eval_every": 200})

    sup_cov = run_baseline(TrainMode.SUP_COV, dataset, train, config.model, config.sop)
    sup = run_baseline(TrainMode.SUP, dataset, train, config.model, config.sop)

    assert sup_cov.test_acc >= 0.6
    assert sup.test_acc <= 0.6


@pytest.mark.skipif(not os.getenv("SOPLAB_ACCEPTANCE"), reason="full acceptance sweep, set SOPLAB_ACCEPTANCE=1")
@pytest.mark.asyncio
async def test_acceptance_sweep_passes(tmp_path):
    config = load_run_config(AcceptanceConfig.RUN_DOCUMENT)

    report = await AcceptanceJob(config, generate(config.data), tmp_path).run()

    means = report.mode_means
    assert means["sup_cov"] >= 0.80
    assert means["sup"] <= 0.35
    assert means["ours"] >= means["sup_cov"] + 0.02
    assert report.passed
    assert (tmp_path / AcceptanceConfig.REPORT_FILENAME).is_file()


def _report(means) -> AcceptanceReport:
    checks = check_acceptance(means)
    return AcceptanceReport(seeds=[0], mode_means=means, checks=checks, passed=all(c.passed for c in checks))


@pytest.mark.parametrize("means, code", [(PASSING, 0), ({**PASSING, "sup": 0.6}, 1)])
def test_accept_command_exit_codes(means, code, tmp_path):
    with patch.object(AcceptanceJob, "run", new=AsyncMock(return_value=_report(means))), patch(
        "app.cli.generate"
    ) as generate_mock:
        assert main(["accept", "--out", str(tmp_path / "accept")]) == code
    generate_mock.assert_called_once()
