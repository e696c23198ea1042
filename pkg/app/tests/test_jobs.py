import os
import sys
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.config import Config
from app.core.checkpoint import checkpoint_paths, load_checkpoint
from app.core.dataset import split_by_rate
from app.core.synthetic import generate
from app.core.trainer import run_baseline
from app.errors import ChecksumError, ConfigError
from app.jobs.bench_job import BENCH_COLUMNS, BenchJob
from app.jobs.gradcheck_job import GradCheckJob
from app.jobs.sweep_job import SweepJob
from app.jobs.train_job import FeatureExportJob, SSLTrainJob, evaluate_checkpoint
from app.models import METRICS_COLUMNS, RunConfig, Split, SweepKind, SyntheticSpec, TrainMode
from app.utils import read_json

RUN = RunConfig.model_validate(
    {
        "seed": 0,
        "data": {
            "num_classes": 3,
            "labeled_per_class": 3,
            "unlabeled_per_class": 4,
            "validation_per_class": 2,
            "test_per_class": 2,
        },
        "train": {"iterations": 2, "eval_every": 1, "batch_labeled": 3, "batch_unlabeled": 3, "lambda": 0.1},
    }
)


@pytest.fixture(scope="module")
def dataset():
    return generate(RUN.data)


def _with_sweep(**sweep) -> RunConfig:
    return RUN.model_copy(update={"sweep": RUN.sweep.model_copy(update=sweep)})


@pytest.mark.asyncio
async def test_lambda_sweep_rows(dataset, tmp_path):
    job = SweepJob(_with_sweep(lambda_grid=[0.1, 0.5], seeds=[0, 1]), dataset, SweepKind.LAMBDA, tmp_path)

    rows = await job.run()

    assert [(row["lambda"], row["seed"]) for row in rows] == [(0.1, 0), (0.1, 1), (0.5, 0), (0.5, 1)]
    table = pd.read_csv(tmp_path / Config.SWEEP_FILENAME)
    assert list(table.columns) == ["lambda", "seed", "best_val_acc", "test_acc", "iterations_run"]
    assert len(table) == 4
    assert (tmp_path / Config.RESOLVED_CONFIG_FILENAME).is_file()


def test_lambda_sweep_rejects_non_positive(dataset):
    job = SweepJob(_with_sweep(lambda_grid=[0.0, 0.1]), dataset, SweepKind.LAMBDA)

    with pytest.raises(ConfigError):
        job.grid()


def test_empty_grid_is_rejected(dataset):
    with pytest.raises(ConfigError):
        SweepJob(_with_sweep(batch_grid=[]), dataset, SweepKind.BATCH).grid()


@pytest.mark.asyncio
async def test_label_rate_zero_trains_supervised(dataset):
    job = SweepJob(_with_sweep(label_rates=[0.0, 1.0]), dataset, SweepKind.LABEL_RATE)

    rows = await job.run()

    assert [row["mode"] for row in rows] == ["sup_cov", "ours"]
    assert [row["n_unlabeled"] for row in rows] == [0, 12]
    supervised = run_baseline(TrainMode.SUP_COV, split_by_rate(dataset, 0.0), RUN.train)
    assert rows[0]["test_acc"] == supervised.test_acc
    assert rows[0]["best_val_acc"] == supervised.best_val_acc


@pytest.mark.asyncio
async def test_modes_and_batch_sweeps(dataset):
    modes = await SweepJob(_with_sweep(), dataset, SweepKind.MODES).run()
    batches = await SweepJob(_with_sweep(batch_grid=[(2, 2), (3, 1)]), dataset, SweepKind.BATCH).run()

    assert [row["mode"] for row in modes] == [mode.value for mode in TrainMode]
    assert [(row["batch_labeled"], row["batch_unlabeled"]) for row in batches] == [(2, 2), (3, 1)]
    assert all(row["iterations_run"] == 2 for row in modes + batches)


@pytest.mark.asyncio
async def test_train_job_writes_artifacts(dataset, tmp_path):
    result = await SSLTrainJob(RUN, dataset, tmp_path).run()

    metrics = pd.read_csv(tmp_path / Config.METRICS_FILENAME)
    assert list(metrics.columns) == METRICS_COLUMNS
    assert list(metrics["iteration"]) == [1, 2]
    for name in ("final", "best"):
        for path in checkpoint_paths(tmp_path / name):
            assert path.is_file()
    assert read_json(tmp_path / "summary.json")["iterations_run"] == 2
    assert read_json(tmp_path / Config.RESOLVED_CONFIG_FILENAME)["train"]["lambda"] == 0.1

    restored = load_checkpoint(tmp_path / "final")
    for name, value in result.final_state.items():
        np.testing.assert_array_equal(restored.state_dict()[name], value)
    evaluation = evaluate_checkpoint(tmp_path / "best", dataset, Split.TEST)
    assert evaluation["n"] == 6
    assert 0.0 <= evaluation["accuracy"] <= 1.0


@pytest.mark.asyncio
async def test_truncated_checkpoint_is_rejected(dataset, tmp_path):
    await SSLTrainJob(RUN, dataset, tmp_path).run()
    blob, _ = checkpoint_paths(tmp_path / "final")
    blob.write_bytes(blob.read_bytes()[:64])

    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "final")


@pytest.mark.asyncio
async def test_feature_export(dataset, tmp_path):
    await SSLTrainJob(RUN, dataset, tmp_path).run()

    output = await FeatureExportJob(tmp_path / "best", dataset, tmp_path / Config.FEATURES_FILENAME).run()

    table = pd.read_csv(output)
    assert table.shape == (6, 1 + 36)
    assert list(table["label"]) == list(dataset.test.labels)


@pytest.mark.asyncio
async def test_bench_rows(tmp_path):
    output = tmp_path / Config.BENCH_FILENAME

    rows = await BenchJob(dims=[4], iterations=[1, 5], repeats=3).run(output)

    assert [row["iterations"] for row in rows] == [1, 5]
    assert rows[1]["rel_err"] < rows[0]["rel_err"]
    assert rows[1]["rel_err"] <= 0.05
    assert list(pd.read_csv(output).columns) == BENCH_COLUMNS


def test_bench_needs_dimensions():
    with pytest.raises(ConfigError):
        BenchJob(dims=[])


def test_gradcheck_passes():
    report = GradCheckJob().check()

    assert report.passed
    assert report.max_rel_err <= 1e-4
    assert {layer.name for layer in report.layers} == {
        "features.0.conv2d.weight",
        "features.2.pointwise.weight",
        "classifier.weight",
    }


def test_gradcheck_detects_broken_relu_backward():
    with patch("app.core.tensor._relu_grad", lambda x, grad: grad):
        report = GradCheckJob().check()

    assert not report.passed


@pytest.mark.asyncio
async def test_gradcheck_report_file(tmp_path):
    output = tmp_path / "gradcheck.json"

    report = await GradCheckJob().run(output)

    assert read_json(output)["passed"] == report.passed


def test_synthetic_spec_from_run_config():
    assert isinstance(RUN.data, SyntheticSpec)
    assert RUN.data.seed == 0 and RUN.train.seed == 0


def test_jobs_log_under_their_own_names(dataset, tmp_path):
    jobs = [
        SSLTrainJob(RUN, dataset, tmp_path),
        FeatureExportJob(tmp_path / "final", dataset, tmp_path / Config.FEATURES_FILENAME),
        SweepJob(RUN, dataset, SweepKind.MODES),
        GradCheckJob(),
        BenchJob(dims=[4]),
    ]

    assert [job.logger.name for job in jobs] == [
        "SSLTrainJob",
        "FeatureExportJob",
        "SweepJob",
        "GradCheckJob",
        "BenchJob",
    ]
    assert all("logger" not in vars(type(job)) for job in jobs)
