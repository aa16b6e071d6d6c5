"""
Tests for the ATE service endpoints, run in-process with FastAPI's TestClient.
"""
import logging

import numpy as np
import pytest
from fastapi.testclient import TestClient

import batle.main as main
from batle.config import NetworkConfig
from batle.services.network import init_params, save_checkpoint
from batle.services.numeric import RngStream
from tests.conftest import linear_dataset


@pytest.fixture(autouse=True)
def empty_store(monkeypatch):
    """Every test starts without a loaded checkpoint and without BATLE_CHECKPOINT."""
    monkeypatch.delenv("BATLE_CHECKPOINT", raising=False)
    monkeypatch.delenv("BATLE_MC_PASSES", raising=False)
    main.store.params = None
    main.store.path = None
    yield
    main.store.params = None
    main.store.path = None


@pytest.fixture
def client():
    return TestClient(main.app)


@pytest.fixture
def checkpoint(tmp_path):
    config = NetworkConfig(input_dim=3, shared_layer_widths=[6], head_layer_widths=[4], dropout_rate=0.2)
    return save_checkpoint(tmp_path / "model.json", init_params(config, RngStream(0)))


def covariates(n=5):
    return np.random.default_rng(0).normal(size=(n, 3)).tolist()


def test_health_check(client):
    response = client.get("/")
    assert response.status_code == 200
    data = response.json()
    assert data["status"] == "ok"
    assert data["service"] == main.SERVICE_NAME
    assert data["checkpoint_loaded"] is False
    assert "X-Response-Time" in response.headers


def test_ate_without_checkpoint(client):
    response = client.post("/ate", json={"covariates": covariates()})
    assert response.status_code == 503


def test_reload_without_env(client):
    assert client.post("/reload").status_code == 503


def test_reload_and_estimate(client, checkpoint, monkeypatch):
    monkeypatch.setenv("BATLE_CHECKPOINT", str(checkpoint))
    response = client.post("/reload")
    assert response.status_code == 200
    assert response.json()["status"] == "success"

    health = client.get("/").json()
    assert health["checkpoint_loaded"] is True
    assert health["network"]["input_dim"] == 3

    response = client.post("/ate", json={"covariates": covariates(), "passes": 4, "seed": 1})
    assert response.status_code == 200
    data = response.json()
    assert data["n"] == 5 and data["mc_passes"] == 4
    assert np.isfinite(data["tau_hat"])
    again = client.post("/ate", json={"covariates": covariates(), "passes": 4, "seed": 1}).json()
    assert again["tau_hat"] == data["tau_hat"]


def test_default_passes_from_env(client, checkpoint, monkeypatch):
    monkeypatch.setenv("BATLE_CHECKPOINT", str(checkpoint))
    monkeypatch.setenv("BATLE_MC_PASSES", "7")
    client.post("/reload")
    assert client.post("/ate", json={"covariates": covariates()}).json()["mc_passes"] == 7


def test_startup_loads_checkpoint(checkpoint, monkeypatch):
    monkeypatch.setenv("BATLE_CHECKPOINT", str(checkpoint))
    with TestClient(main.app) as client:
        assert client.get("/").json()["checkpoint"] == str(checkpoint)


def test_reload_failure(client, tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    monkeypatch.setenv("BATLE_CHECKPOINT", str(bad))
    response = client.post("/reload")
    assert response.status_code == 500
    assert "Reload failed" in response.json()["detail"]


@pytest.mark.parametrize(
    "body",
    [
        {"covariates": [[1.0, 2.0]]},
        {"covariates": [[1.0, 2.0, 3.0], [1.0]]},
        {"covariates": []},
        {"covariates": [[1.0, 2.0, 3.0]], "passes": 0},
    ],
)
def test_ate_rejects_bad_input(client, checkpoint, monkeypatch, body):
    monkeypatch.setenv("BATLE_CHECKPOINT", str(checkpoint))
    client.post("/reload")
    assert client.post("/ate", json=body).status_code == 422


def test_point_head_checkpoint_has_no_spread(client, tmp_path, monkeypatch):
    config = NetworkConfig(input_dim=3, shared_layer_widths=[6], head_layer_widths=[], point_outcomes=True)
    path = save_checkpoint(tmp_path / "point.json", init_params(config, RngStream(0)))
    monkeypatch.setenv("BATLE_CHECKPOINT", str(path))
    client.post("/reload")
    data = client.post("/ate", json={"covariates": covariates(), "passes": 5}).json()
    assert data["mean_sd0"] == 0.0 and data["mean_sd1"] == 0.0


def test_aipw_endpoint(client):
    data = linear_dataset(n=300, v=3, tau=2.0, seed=2)
    body = {
        "covariates": data.covariates.tolist(),
        "treatments": data.treatments.tolist(),
        "outcomes": data.outcomes.tolist(),
        "folds": 3,
    }
    response = client.post("/aipw", json=body)
    assert response.status_code == 200
    result = response.json()
    assert result["n"] == 300 and result["folds"] == 3
    assert abs(result["tau_hat"] - 2.0) < 0.5


def test_aipw_rejects_bad_input(client):
    x = covariates(30)
    assert client.post("/aipw", json={"covariates": x, "treatments": [1.0] * 30, "outcomes": [0.0] * 30}).status_code == 422
    assert client.post("/aipw", json={"covariates": x, "treatments": [1.0], "outcomes": [0.0]}).status_code == 422


def test_aipw_rejects_non_binary_treatments(client):
    data = linear_dataset(n=60, v=3, seed=2)
    treatments = data.treatments.tolist()
    treatments[:5] = [2.0] * 5
    body = {"covariates": data.covariates.tolist(), "treatments": treatments, "outcomes": data.outcomes.tolist()}
    response = client.post("/aipw", json=body)
    assert response.status_code == 422
    assert "0 or 1" in response.text


def test_requests_are_logged(client, caplog):
    caplog.set_level(logging.INFO, logger="batle.main")
    client.post("/ate", json={"covariates": covariates()})
    assert any("POST /ate -> 503" in record.getMessage() for record in caplog.records)
