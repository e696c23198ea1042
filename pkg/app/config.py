"""
This file contains the library, jobs and API main config, you can adjust the values without touching the code.
Run-specific settings (dataset spec, training protocol, model) live in the pydantic models of models.py
and are loaded from JSON run documents.
"""

import logging
import os
from pathlib import Path

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)

# Suppress httpx / uvicorn access logs by setting their logging level to WARNING
logging.getLogger("httpx").setLevel(logging.WARNING)
logging.getLogger("uvicorn.access").setLevel(logging.WARNING)


class Config:
    """Base configuration class with data directory setup."""

    PROJECT_DATA_DIR = Path(os.getenv("SOPLAB_DATA_DIR", os.path.join(os.getcwd(), "data")))
    RUNS_DIR: Path = PROJECT_DATA_DIR / "runs"

    RESOLVED_CONFIG_FILENAME = "resolved-config.json"
    METRICS_FILENAME = "metrics.csv"
    SWEEP_FILENAME = "sweep.csv"
    FEATURES_FILENAME = "features.csv"
    BENCH_FILENAME = "bench.csv"
    MANIFEST_FILENAME = "manifest.json"

    def __init__(self):
        """Initialize configuration and create the project data directory."""
        # Ensure the directory exists when the class is instantiated
        self.PROJECT_DATA_DIR.mkdir(exist_ok=True, parents=True)


class TensorConfig:
    # NaN/Inf detection after every forward op, set SOPLAB_CHECK_FINITE=0 for release runs
    CHECK_FINITE = os.getenv("SOPLAB_CHECK_FINITE", "1") != "0"
    DTYPE = "float64"


class TrainJobConfig(Config):
    FINAL_CHECKPOINT = "final"
    BEST_CHECKPOINT = "best"

    def __init__(self):
        super().__init__()
        self.RUNS_DIR.mkdir(exist_ok=True, parents=True)


class SweepConfig(Config):
    # Runs are independent, each one sequential inside its worker thread
    CONCURRENT_RUNS = int(os.getenv("SOPLAB_CONCURRENT_RUNS", "2"))
    LAMBDA_GRID = [0.025, 0.05, 0.1, 0.2, 0.5, 1.0]
    LABEL_RATES = [0.0, 0.25, 0.5, 0.75, 1.0]
    BATCH_GRID = [(10, 5), (10, 10), (10, 15), (20, 20)]


class GradCheckConfig(Config):
    STEP = 1e-5
    TOLERANCE = 1e-4
    INPUT_SHAPE = (3, 6, 6)
    NUM_CLASSES = 3
    BATCH_SIZE = 2
    LAMBDA = 0.5
    SEED = 7


class BenchConfig(Config):
    DIMENSIONS = [4, 8, 16, 32]
    ITERATIONS = [1, 5]
    REPEATS = 10
    SEED = 0


class ServerConfig(Config):
    HOST = "127.0.0.1"
    PORT = 8000
    MAX_PAGE_SIZE = 1000


class AcceptanceConfig(Config):
    # Run document of the desk-scale acceptance sweep, shipped with the repo
    RUN_DOCUMENT = Path(__file__).resolve().parent.parent / "configs" / "acceptance.json"
    SEEDS = [0, 1, 2, 3, 4]
    SUP_MAX = 0.35
    SUP_COV_MIN = 0.80
    SSL_MARGIN = 0.02
    REPORT_FILENAME = "acceptance-report.json"
