import json
import os
import sys

import pytest
from fastapi.testclient import TestClient

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.config import Config
from app.models import METRICS_COLUMNS
from app.server import create_app
from app.utils import write_csv


@pytest.fixture
def client(tmp_path):
    run = tmp_path / "run-a"
    run.mkdir()
    rows = [
        {"iteration": 100 * i, "L": 1.0 / i, "H": 0.5, "val_acc": 0.5, "test_acc": None, "ms": 10.0}
        for i in range(1, 6)
    ]
    write_csv(rows, METRICS_COLUMNS, run / Config.METRICS_FILENAME)
    (run / Config.RESOLVED_CONFIG_FILENAME).write_text(json.dumps({"seed": 1}))
    (tmp_path / "run-b").mkdir()
    (tmp_path / "run-b" / Config.SWEEP_FILENAME).write_text("")
    return TestClient(create_app(tmp_path))


def test_root_redirects_to_docs(client):
    response = client.get("/", follow_redirects=False)

    assert response.status_code in (302, 307)
    assert response.headers["location"] == "/docs"


def test_list_runs(client):
    response = client.get("/runs")

    assert response.status_code == 200
    body = response.json()
    assert body["total_items"] == 2
    assert body["data"][0] == {
        "run": "run-a",
        "artifacts": [Config.RESOLVED_CONFIG_FILENAME, Config.METRICS_FILENAME],
    }


def test_metrics_are_paginated(client):
    response = client.get("/runs/run-a/metrics", params={"page": 2, "limit": 2})

    body = response.json()
    assert response.status_code == 200
    assert body["total_items"] == 5
    assert body["total_pages"] == 3
    assert body["has_more"] is True
    assert [row["iteration"] for row in body["data"]] == [300, 400]
    assert body["data"][0]["test_acc"] is None


def test_config(client):
    response = client.get("/runs/run-a/config")

    assert response.status_code == 200
    assert response.json() == {"seed": 1}


def test_missing_run_or_artifact(client):
    assert client.get("/runs/run-x/metrics").status_code == 404
    assert client.get("/runs/run-a/sweep").status_code == 404
    assert client.get("/runs/run-b/config").status_code == 404


def test_unreadable_csv_is_503(client):
    assert client.get("/runs/run-b/sweep").status_code == 503


def test_page_size_limit(client):
    assert client.get("/runs/run-a/metrics", params={"limit": 100000}).status_code == 422
