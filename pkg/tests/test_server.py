import pytest
from fastapi.testclient import TestClient

from server import app


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def test_health(client):
    assert client.get("/health").json() == {"status": "ok"}


def test_diagnostics(client, run_dir):
    response = client.get("/runs/diagnostics", params={"run_dir": str(run_dir)})
    assert response.status_code == 200
    assert response.json()["chains"] == 2


def test_diagnostics_missing_run(client, tmp_path):
    response = client.get("/runs/diagnostics", params={"run_dir": str(tmp_path)})
    assert response.status_code == 404
    assert "diagnostics.json" in response.json()["detail"]


def test_predict(client, gated_runs, small_dataset):
    run_dir = gated_runs[0]
    H, S, I, Sx, Sy = small_dataset.X_raw[0].tolist()
    body = {"run_dir": str(run_dir), "H": H, "S": S, "I": I, "Sx": Sx + 1.0, "Sy": Sy, "seed": 3}
    response = client.post("/predict", json=body, params={"max_draws": 25})
    assert response.status_code == 200
    payload = response.json()
    series = payload["series"]
    assert len(series["mean"]) == small_dataset.n_times
    assert series["mean"][0] == 0.0
    assert payload["trace"][-1]["step"] == "predict_location_result"


def test_predict_is_seeded(client, gated_runs, small_dataset):
    run_dir = gated_runs[0]
    H, S, I, Sx, Sy = small_dataset.X_raw[1].tolist()
    body = {"run_dir": str(run_dir), "H": H, "S": S, "I": I, "Sx": Sx, "Sy": Sy, "seed": 5}
    first = client.post("/predict", json=body, params={"max_draws": 10}).json()["series"]
    second = client.post("/predict", json=body, params={"max_draws": 10}).json()["series"]
    assert first == second


def test_predict_validation(client, run_dir):
    response = client.post("/predict", json={"run_dir": str(run_dir), "H": 1.0})
    assert response.status_code == 422


def test_predict_refuses_unconverged_run(client, gated_runs, small_dataset):
    H, S, I, Sx, Sy = small_dataset.X_raw[0].tolist()
    body = {"run_dir": str(gated_runs[1]), "H": H, "S": S, "I": I, "Sx": Sx, "Sy": Sy}
    response = client.post("/predict", json=body, params={"max_draws": 10})
    assert response.status_code == 409
    assert "Rhat" in response.json()["detail"]

    forced = client.post("/predict", json={**body, "force": True}, params={"max_draws": 10})
    assert forced.status_code == 200
