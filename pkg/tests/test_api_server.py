"""
Tests for the HTTP endpoints
"""

import json

import pytest

pytest.importorskip("httpx")

from fastapi.testclient import TestClient  # noqa: E402

from api_server import app  # noqa: E402
from iqcreach.certify import Certificate  # noqa: E402
from iqcreach.poly_core import parse_polynomial  # noqa: E402

from conftest import CONFIG_DIR  # noqa: E402

client = TestClient(app)
SCALAR = json.loads((CONFIG_DIR / "scalar.json").read_text())


def _certificate():
    """x^2 <= 1/4 under u = -x for x' = -x + d + u"""
    return Certificate(V=parse_polynomial("x^2", ("x",)), gamma=0.25, R=0.1, T=1.0,
                       controller={"u": parse_polynomial("-x", ("x",))}, plant_states=("x",)).to_dict()


def test_configs_are_listed():
    response = client.get("/api/configs")
    assert response.status_code == 200
    body = response.json()
    assert body["success"]
    assert {row["name"] for row in body["data"]} == {path.stem for path in CONFIG_DIR.glob("*.json")}


def test_unknown_config_is_a_bad_request():
    response = client.post("/api/certify", json={"config": "nope"})
    assert response.status_code == 400
    assert "nope" in response.json()["detail"]


def test_invalid_inline_problem_is_a_bad_request():
    problem = dict(SCALAR, plant=dict(SCALAR["plant"], R=0.0))
    response = client.post("/api/certify", json={"problem": problem})
    assert response.status_code == 400


def test_volume_without_a_certificate_is_not_found():
    response = client.post("/api/volume", json={"config": "gtm_delta_soft"})
    assert response.status_code == 404


def test_validate_an_inline_certificate():
    response = client.post("/api/validate", json={"problem": SCALAR, "certificate": _certificate()})
    assert response.status_code == 200
    body = response.json()
    assert body["success"]
    assert body["data"]["passed"]


def test_simulate_an_inline_certificate():
    response = client.post("/api/simulate", json={"config": "scalar", "certificate": _certificate(), "x0": [0.3]})
    body = response.json()
    assert body["success"]
    assert body["data"][0]["x"] == pytest.approx(0.3)
    assert body["data"][-1]["t"] == pytest.approx(1.0)


def test_simulate_checks_the_initial_state_length():
    response = client.post("/api/simulate", json={"config": "scalar", "certificate": _certificate(), "x0": [0.1, 0.2]})
    assert response.status_code == 400


def test_certificate_must_be_a_certificate_document():
    response = client.post("/api/volume", json={"config": "scalar", "certificate": {"format": "other"}})
    assert response.status_code == 400
