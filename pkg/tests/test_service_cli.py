import base64
import json
import warnings

import numpy as np
import pytest
from click.testing import CliRunner

from edgeopc import io
from edgeopc.cli import main
from edgeopc.geometry import Polygon

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from edgeopc.service.app import app  # noqa: E402

SQUARE = {"polygons": [[[16, 14], [48, 14], [48, 46], [16, 46]]], "width": 64, "height": 64}


@pytest.fixture(scope="module")
def client():
    with TestClient(app) as c:
        yield c


@pytest.fixture(scope="module")
def kernel_b64(small_kernels):
    return base64.b64encode(io.kernels_to_bytes(small_kernels)).decode("ascii")


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200 and r.json()["status"] == "ok" and r.json()["threads"] >= 1


def test_optimize_endpoint(client, kernel_b64):
    body = {"layout": SQUARE, "kernels": {"file_b64": kernel_b64}, "config": {"iterations": 2, "th_epe": 5}}
    r = client.post("/optimize", json=body)
    assert r.status_code == 200, r.text
    res = r.json()
    assert len(res["logs"]) == 2
    assert io.parse_pgm(base64.b64decode(res["mask_pgm_b64"])).shape == (64, 64)
    assert set(res["metrics"]) >= {"l2", "pvb", "epe_count", "shots"}
    assert all(isinstance(v, int) for ring in res["geometry"]["polygons"] for pt in ring for v in pt)


def test_domain_errors_are_422(client, kernel_b64):
    body = {"layout": SQUARE, "kernels": {"file_b64": kernel_b64}, "config": {"iterations": 0}}
    r = client.post("/optimize", json=body)
    assert r.status_code == 422 and "iterations" in r.json()["detail"]
    r = client.post("/optimize", json={"layout": SQUARE, "kernels": {"file_b64": "@@"}})
    assert r.status_code == 422 and "base64" in r.json()["detail"]
    r = client.post("/check", json={"layout": {"polygons": [[[0, 0], [4, 0], [4, 4]]]}})
    assert r.status_code == 422


def test_check_endpoint(client):
    lines = {"polygons": [[[0, 0], [60, 0], [60, 300], [0, 300]], [[99, 0], [159, 0], [159, 300], [99, 300]]]}
    found = client.post("/check", json={"layout": lines}).json()["violations"]
    assert [(v["kind"], v["measured"], v["required"]) for v in found] == [("spacing", 39.0, 40.0)]
    assert client.post("/check", json={"layout": lines, "rules": {"min_spacing": 39}}).json()["violations"] == []


def test_metrics_endpoint_matches_target(client, kernel_b64):
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[15:47, 16:48] = 1
    body = {"mask_b64": base64.b64encode(io.pgm_bytes(mask)).decode(), "target": SQUARE,
            "kernels": {"file_b64": kernel_b64}, "config": {"th_epe": 5}}
    r = client.post("/metrics", json=body)
    assert r.status_code == 200, r.text
    assert r.json()["shots"] == 1
    body["mask_b64"] = base64.b64encode(io.pgm_bytes(mask[:32])).decode()
    assert client.post("/metrics", json=body).status_code == 422


def test_kernels_endpoint(client):
    r = client.post("/kernels", json={"size": 21, "n_kernels": 2, "cutoff": 0.1})
    ks = io.kernels_from_bytes(base64.b64decode(r.json()["file_b64"]))
    assert ks.n_kernels == 2 and ks.size == 21


@pytest.fixture
def files(tmp_path, small_kernels):
    io.save_kernels(tmp_path / "k.bin", small_kernels)
    (tmp_path / "layout.json").write_text(json.dumps(SQUARE))
    (tmp_path / "run.toml").write_text("[optimizer]\niterations = 2\nth_epe = 5\n")
    return tmp_path


def test_cli_optimize_writes_artifacts(files):
    out = files / "out"
    r = CliRunner().invoke(main, ["--threads", "1", "optimize", "--layout", str(files / "layout.json"),
                                  "--kernels", str(files / "k.bin"), "--config", str(files / "run.toml"),
                                  "--out", str(out), "--raw"])
    assert r.exit_code == 0, r.output
    assert {p.name for p in out.iterdir()} == set(io.OUTPUT_FILES) | {"mask.raw"}
    assert "L2" in r.output


def test_cli_missing_kernel_file(files):
    r = CliRunner().invoke(main, ["optimize", "--layout", str(files / "layout.json"),
                                  "--kernels", str(files / "none.bin"), "--out", str(files / "o")])
    assert r.exit_code != 0 and "kernel file not found" in r.output


def test_cli_check_exit_codes(files, tmp_path):
    io.save_layout(tmp_path / "narrow.json", [Polygon.rect(0, 0, 30, 300)])
    r = CliRunner().invoke(main, ["check", "--layout", str(tmp_path / "narrow.json")])
    assert r.exit_code == 1
    assert json.loads(r.stdout)[0]["kind"] == "width"
    io.save_layout(tmp_path / "wide.json", [Polygon.rect(0, 0, 60, 300)])
    r = CliRunner().invoke(main, ["check", "--layout", str(tmp_path / "wide.json")])
    assert r.exit_code == 0 and json.loads(r.stdout) == []


def test_cli_metrics_and_seeds(files, tmp_path):
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[15:47, 16:48] = 1
    io.save_pgm(tmp_path / "m.pgm", mask)
    r = CliRunner().invoke(main, ["metrics", "--mask", str(tmp_path / "m.pgm"), "--target", str(files / "layout.json"),
                                  "--kernels", str(files / "k.bin"), "--config", str(files / "run.toml"),
                                  "--out", str(tmp_path / "m.json")])
    assert r.exit_code == 0, r.output
    assert json.loads((tmp_path / "m.json").read_text())["shots"] == 1
    r = CliRunner().invoke(main, ["seeds", "--layout", str(files / "layout.json"), "--kernels", str(files / "k.bin")])
    assert r.exit_code == 0, r.output
    assert isinstance(json.loads(r.stdout), list)


def test_cli_fixture_and_kernels(tmp_path):
    r = CliRunner().invoke(main, ["fixture", "donut", "--out", str(tmp_path / "d.json")])
    assert r.exit_code == 0 and len(io.load_layout(tmp_path / "d.json")["polygons"]) == 2
    r = CliRunner().invoke(main, ["kernels", "--out", str(tmp_path / "k.bin"), "--size", "21", "--cutoff", "0.1"])
    assert r.exit_code == 0 and io.load_kernels(tmp_path / "k.bin").size == 21
    r = CliRunner().invoke(main, ["fixture", "spiral", "--out", str(tmp_path / "x.json")])
    assert r.exit_code != 0 and "unknown fixture" in r.output
