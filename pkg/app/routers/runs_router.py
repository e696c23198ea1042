import logging
from pathlib import Path
from typing import List

from fastapi import APIRouter, Depends, HTTPException, Request
from pandas.errors import EmptyDataError, ParserError

from app.config import Config
from app.utils import PaginationParams, paginate, read_csv_records, read_json

runs_router = APIRouter(prefix="/runs", tags=["Runs"])

logger = logging.getLogger("runs")


def _runs_dir(request: Request) -> Path:
    return Path(request.app.state.runs_dir)


def _run_dir(request: Request, run: str) -> Path:
    root = _runs_dir(request).resolve()
    path = (root / run).resolve()
    if path.parent != root or not path.is_dir():
        raise HTTPException(status_code=404, detail=f"Run {run} not found in {root}")
    return path


def _csv_rows(request: Request, run: str, filename: str) -> List[dict]:
    path = _run_dir(request, run) / filename
    if not path.is_file():
        raise HTTPException(status_code=404, detail=f"Run {run} has no {filename}")
    try:
        return read_csv_records(path)
    except (EmptyDataError, ParserError, UnicodeDecodeError) as e:
        # the file is probably still being written
        logger.warning(f"Cannot read {path}: {e}")
        raise HTTPException(status_code=503, detail=f"{filename} of run {run} is not readable yet, try again later")


@runs_router.get("", summary="List runs", description="Run directories and the artifacts each one holds")
@paginate
def list_runs(request: Request, pagination: PaginationParams = Depends()):
    root = _runs_dir(request)
    if not root.is_dir():
        raise HTTPException(status_code=404, detail=f"Runs directory {root} not found")
    artifacts = (
        Config.RESOLVED_CONFIG_FILENAME,
        Config.METRICS_FILENAME,
        Config.SWEEP_FILENAME,
        Config.FEATURES_FILENAME,
    )
    return [
        {"run": path.name, "artifacts": [name for name in artifacts if (path / name).is_file()]}
        for path in sorted(root.iterdir())
        if path.is_dir()
    ]


@runs_router.get("/{run}/config", summary="Resolved run config")
def get_config(run: str, request: Request):
    path = _run_dir(request, run) / Config.RESOLVED_CONFIG_FILENAME
    if not path.is_file():
        raise HTTPException(status_code=404, detail=f"Run {run} has no {Config.RESOLVED_CONFIG_FILENAME}")
    try:
        return read_json(path)
    except ValueError:
        raise HTTPException(status_code=503, detail=f"Config of run {run} is not readable yet, try again later")


@runs_router.get("/{run}/metrics", summary="Training metrics", description="Rows of metrics.csv")
@paginate
def get_metrics(run: str, request: Request, pagination: PaginationParams = Depends()):
    return _csv_rows(request, run, Config.METRICS_FILENAME)


@runs_router.get("/{run}/sweep", summary="Sweep table", description="Rows of sweep.csv")
@paginate
def get_sweep(run: str, request: Request, pagination: PaginationParams = Depends()):
    return _csv_rows(request, run, Config.SWEEP_FILENAME)


@runs_router.get("/{run}/features", summary="Exported features", description="Rows of features.csv")
@paginate
def get_features(run: str, request: Request, pagination: PaginationParams = Depends()):
    return _csv_rows(request, run, Config.FEATURES_FILENAME)
