import pytest
from fastapi.testclient import TestClient

from src.config import settings
from src.main import app

client = TestClient(app)


def test_health():
    assert client.get("/health").json()["status"] == "healthy"
    assert client.get("/").json()["service"] == "Khintchine Laboratory"


def test_count_r():
    response = client.post("/api/count-r", json={"Q": "10", "eps": ["1/2"], "box": [[0.0, 1.0]]})
    assert response.status_code == 200
    body = response.json()
    assert body["count"] == 35
    assert body["certified"] is True


def test_count_r_witnesses():
    response = client.post("/api/count-r", json={"Q": "10", "eps": ["1/2"], "box": [[0.0, 1.0]], "witnesses": True})
    witnesses = response.json()["witnesses"]
    assert len(witnesses) == 35
    assert set(witnesses[0]) == {"q", "a1", "b1"}


def test_count_r_errors():
    assert client.post("/api/count-r", json={"Q": "10", "eps": ["3/2"]}).status_code == 400
    assert client.post("/api/count-r", json={"Q": "ten", "eps": ["1/2"]}).status_code == 422
    assert client.post("/api/count-r", json={"chart": "torus", "Q": "10", "eps": ["1/2"]}).status_code == 422
    response = client.post("/api/count-r", json={"Q": "1000000", "eps": ["1/2"], "box": [[0.0, 1.0]]})
    assert response.status_code == 413
    assert response.json()["detail"]["error"] == "BudgetExceededError"


def test_minima():
    response = client.post("/api/minima", json={"rows": [["3", "0"], ["0", "1/3"]]})
    assert response.status_code == 200
    assert response.json()["lambdas"] == pytest.approx([1 / 3, 3])


def test_minima_singular():
    assert client.post("/api/minima", json={"rows": [["1", "2"], ["2", "4"]]}).status_code == 400


def test_regularize():
    response = client.post("/api/regularize", json={"psi": ["const:0.5"], "phi": "family:1,1", "horizon": 4})
    assert response.status_code == 200
    body = response.json()
    assert body["weights"] == [pytest.approx([1.0, 0.5, 0.5, 0.5])]
    assert body["q_star"] == 1


def test_regularize_default_horizon():
    response = client.post("/api/regularize", json={"psi": ["family:1,0.5"], "phi": "const:0.1"})
    assert response.status_code == 200
    weights = response.json()["weights"]
    assert len(weights[0]) == settings.TUPLE_HORIZON
    assert weights[0][0] == 1.0


def test_regularize_horizon_limit():
    assert client.post("/api/regularize", json={"psi": ["const:0.5"], "phi": "const:0.1", "horizon": 0}).status_code == 422


def test_experiment():
    config = {"kind": "counting_scaling", "box": [[0.0, 1.0]], "eps": [0.5], "Q_list": [10]}
    response = client.post("/api/experiment", json=config)
    assert response.status_code == 200
    body = response.json()
    assert body["records"][0]["count"] == 35
    assert body["passed"] is True


def test_experiment_invalid():
    assert client.post("/api/experiment", json={"kind": "counting_scaling"}).status_code == 422
