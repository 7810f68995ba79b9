import warnings

import numpy as np
import pytest
import yaml

with warnings.catch_warnings():
    warnings.filterwarnings("ignore", message="Using `httpx` with")
    from fastapi.testclient import TestClient

from smsdkl import __version__
from smsdkl.service.app import create_app


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app()) as c:
        yield c


def test_health(client):
    assert client.get("/health").json() == {"status": "ok", "version": __version__}


def test_check_single_and_unknown(client):
    res = client.post("/check", json={"names": ["form_switching"]}).json()
    assert res["passed"] and [r["name"] for r in res["results"]] == ["form_switching"]
    assert client.post("/check", json={"names": ["nope"]}).status_code == 422


def test_experiment_plot_and_diag(client, tiny_config, tmp_path):
    raw = yaml.safe_load(tiny_config.read_text())
    raw.update(algorithms=["sms_dkl", "random"], seeds=[0])
    out = tmp_path / "bundle"
    res = client.post("/experiments", json={"config": raw, "out_dir": str(out)}).json()
    assert res["variants"] == ["sms_dkl", "random", "random_wise"] and not res["errors"]
    assert (out / "manifest.json").exists()

    plots = client.post("/plot", json={"bundle": str(out)}).json()["files"]
    assert all(p.endswith(".svg") for p in plots)
    assert client.post("/plot", json={"bundle": str(tmp_path / "missing")}).status_code == 404

    hist = out / "runs" / "sms_dkl_seed0.csv"
    diag = client.post("/diag", json={"history": str(hist), "top_k": 3, "out_dir": str(tmp_path / "d")}).json()
    assert diag["T"] == 2 and diag["n"] == 8 and len(diag["corr"]) == 2
    assert diag["corr"][0][0] == pytest.approx(1.0)
    assert len(diag["embeddings"]) == 2 and len(diag["top_k_trajectory"]) == 2
    assert (tmp_path / "d" / "embedding_trace.csv").exists()


def test_experiment_rejects_bad_config(client, tmp_path):
    res = client.post("/experiments", json={"config": {"algorithms": []}, "out_dir": str(tmp_path)})
    assert res.status_code == 422


def test_diag_errors(client, tmp_path):
    assert client.post("/diag", json={"history": str(tmp_path / "none.csv")}).status_code == 404
    path = tmp_path / "short.csv"
    path.write_text("iter,chosen_t,x_json,y_1,inc_1,p_1,seconds\n0,,[0.5],0.1,0.1,,\n")
    assert client.post("/diag", json={"history": str(path)}).status_code == 422


def _session_payload(T=2):
    rng = np.random.default_rng(0)
    return {
        "space": [{"name": "x", "kind": "float", "lo": 0, "hi": 1}],
        "data": {"obs": rng.standard_normal((4, T, 1)).tolist(),
                 "labels": (rng.random((4, T)) < 0.5).astype(float).tolist()},
        "n_init": 2,
        "dkl": {"m_train": 5, "candidate_pool": 32, "hidden": 3, "set_width": 4, "head_width": 4,
                "feature_dim": 4},
    }


def test_session_lifecycle(client):
    made = client.post("/sessions", json=_session_payload()).json()
    sid = made["session_id"]
    assert made["T"] == 2 and len(made["initial_points"]) == 2
    assert client.post(f"/sessions/{sid}/ask").status_code == 409
    for x in made["initial_points"]:
        r = client.post(f"/sessions/{sid}/tell", json={"x": x, "y": [-(x[0] - 0.2) ** 2, -(x[0] - 0.8) ** 2]})
        assert r.status_code == 200
    assert r.json()["n_observations"] == 2
    assert client.post(f"/sessions/{sid}/tell", json={"x": [2.0], "y": [0, 0]}).status_code == 422
    assert client.post(f"/sessions/{sid}/tell", json={"x": [0.5], "y": [0]}).status_code == 422
    ask = client.post(f"/sessions/{sid}/ask").json()
    assert 0 <= ask["x"][0] <= 1 and ask["chosen_t"] in (1, 2)
    assert sum(ask["probs"]) == pytest.approx(1.0) and len(ask["acq_values"]) == 2
    assert client.delete(f"/sessions/{sid}").status_code == 200
    assert client.post(f"/sessions/{sid}/ask").status_code == 404
    assert client.delete(f"/sessions/{sid}").status_code == 404


def test_session_validation(client):
    bad = _session_payload()
    bad["space"] = []
    assert client.post("/sessions", json=bad).status_code == 422
    bad = _session_payload()
    bad["space"][0].update(lo=2, hi=1)
    assert client.post("/sessions", json=bad).status_code == 422
