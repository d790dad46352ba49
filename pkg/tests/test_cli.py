"""CLI entry points over synthetic datasets."""

import json
import os
import socket
import threading
import time

import pytest

import synth
from slamkit.cli import main
from slamkit.control import ControlClient
from slamkit.vocabulary import Vocabulary

N_FRAMES = 15


@pytest.fixture(scope="module")
def rgbd_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    cfg, *_ = synth.make_tum_rgbd(str(root), n=N_FRAMES)
    return {"config": cfg, "root": str(root)}


def _run_dir(out_root):
    entries = os.listdir(out_root)
    assert len(entries) == 1
    return os.path.join(str(out_root), entries[0])


def _free_port():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return port


def _connect_when_up(port, timeout=30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            return ControlClient("127.0.0.1", port)
        except OSError:
            time.sleep(0.05)
    raise TimeoutError("control endpoint never came up")


def test_slam_headless(rgbd_dataset, tmp_path):
    rc = main(["slam", "--config", rgbd_dataset["config"], "--headless",
               "--out-root", str(tmp_path)])
    assert rc == 0
    run_dir = _run_dir(tmp_path)
    online = os.path.join(run_dir, "trajectories", "trajectory_online.txt")
    assert len(open(online).read().splitlines()) == N_FRAMES
    metrics = json.load(open(os.path.join(run_dir, "metrics",
                                          "metrics.json")))
    assert metrics["ate_rmse"] <= 0.05


def test_vo_mode(rgbd_dataset, tmp_path):
    rc = main(["vo", "--config", rgbd_dataset["config"], "--headless",
               "--max-frames", "10", "--out-root", str(tmp_path)])
    assert rc == 0
    run_dir = _run_dir(tmp_path)
    online = os.path.join(run_dir, "trajectories", "trajectory_online.txt")
    assert len(open(online).read().splitlines()) == 10
    # odometry keeps no map, so nothing is auto-saved
    assert not os.listdir(os.path.join(run_dir, "slam_state"))


def test_bad_config_exits_2(tmp_path, capsys):
    missing = str(tmp_path / "nope.yaml")
    assert main(["slam", "--config", missing, "--headless",
                 "--out-root", str(tmp_path / "out")]) == 2
    assert "error:" in capsys.readouterr().err


def test_max_frames_truncates(rgbd_dataset, tmp_path):
    rc = main(["slam", "--config", rgbd_dataset["config"], "--headless",
               "--max-frames", "6", "--out-root", str(tmp_path)])
    assert rc == 0
    online = os.path.join(_run_dir(tmp_path), "trajectories",
                          "trajectory_online.txt")
    assert len(open(online).read().splitlines()) == 6


def test_control_port_serves_a_live_run(rgbd_dataset, tmp_path):
    port = _free_port()
    box = {}

    def target():
        box["rc"] = main(["slam", "--config", rgbd_dataset["config"],
                          "--control-port", str(port),
                          "--out-root", str(tmp_path)])

    thread = threading.Thread(target=target, daemon=True)
    thread.start()
    client = _connect_when_up(port)
    try:
        hello = client.read_event()
        assert hello["type"] == "hello" and hello["mode"] == "slam"
        # without --headless the session idles at dataset end
        while True:
            snap = client.wait_for("snapshot")
            if snap["frame_index"] == N_FRAMES:
                break
        client.send("shutdown")
        thread.join(timeout=120)
        assert not thread.is_alive() and box["rc"] == 0
    finally:
        client.close()


def test_map_viewer_serves_a_saved_map(rgbd_dataset, tmp_path):
    rc = main(["slam", "--config", rgbd_dataset["config"], "--headless",
               "--out-root", str(tmp_path / "mapping")])
    assert rc == 0
    state = os.path.join(_run_dir(tmp_path / "mapping"), "slam_state")

    viewer_cfg = synth.write_config(
        str(tmp_path / "viewer.yaml"), "TUM_DATASET", "rgbd",
        rgbd_dataset["root"], "seq",
        os.path.join(rgbd_dataset["root"], "tum.yaml"),
        global_parameters=dict(synth.FAST_PARAMS),
        system_state={"load_state": True, "folder_path": state})

    port = _free_port()
    box = {}

    def target():
        box["rc"] = main(["map-viewer", "--config", viewer_cfg,
                          "--control-port", str(port),
                          "--out-root", str(tmp_path / "viewing")])

    thread = threading.Thread(target=target, daemon=True)
    thread.start()
    client = _connect_when_up(port)
    try:
        hello = client.read_event()
        assert hello["mode"] == "viewer"
        assert hello["num_frames"] == 0
        snap = client.wait_for("snapshot")
        assert snap["num_keyframes"] >= 3
        assert snap["points"]["count"] > 50
        client.send("shutdown")
        thread.join(timeout=60)
        assert not thread.is_alive() and box["rc"] == 0
    finally:
        client.close()


def test_eval_plan_builds_reports(rgbd_dataset, tmp_path):
    plan = {
        "group": "synthetic",
        "datasets": [{"config": rgbd_dataset["config"], "name": "circuit"}],
        "presets": {"baseline": {}, "lean": {"num_features": 450}},
        "max_frames": 12,
    }
    plan_path = tmp_path / "evaluation.json"
    plan_path.write_text(json.dumps(plan))
    out_root = tmp_path / "results"
    rc = main(["eval", "--config", str(plan_path),
               "--out-root", str(out_root)])
    assert rc == 0
    out = _run_dir(out_root)
    runs = json.load(open(os.path.join(out, "runs.json")))
    assert {(r["dataset"], r["preset"]) for r in runs} == {
        ("circuit", "baseline"), ("circuit", "lean")}
    assert all("rmse" in r["metrics"] for r in runs)
    csv_text = open(os.path.join(out, "report.csv")).read()
    assert "synthetic: Table RMSE" in csv_text
    assert "Average" in csv_text and "Std Dev" in csv_text
    assert "baseline" in csv_text and "lean" in csv_text
    assert os.path.exists(os.path.join(out, "report.html"))
    assert os.path.exists(os.path.join(out, "report.tex"))
    # each cell ran in its own directory with full outputs
    for preset in ("baseline", "lean"):
        metrics = os.path.join(out, f"circuit__{preset}", "metrics",
                               "metrics.json")
        assert os.path.exists(metrics)


def test_eval_missing_plan_exits_2(tmp_path, capsys):
    assert main(["eval", "--config", str(tmp_path / "nope.json"),
                 "--out-root", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_train_vocab_then_slam_with_it(rgbd_dataset, tmp_path):
    vocab_path = str(tmp_path / "synthetic.slkvoc")
    rc = main(["train-vocab", "--config", rgbd_dataset["config"],
               "--output", vocab_path, "--k", "6", "--depth", "2",
               "--step", "2"])
    assert rc == 0
    vocab = Vocabulary.load(vocab_path)
    assert vocab.num_words > 6

    cfg = synth.make_tum_rgbd(
        str(tmp_path / "data"), n=12,
        global_parameters={"vocabulary_path": vocab_path})[0]
    rc = main(["slam", "--config", cfg, "--headless",
               "--out-root", str(tmp_path / "out")])
    assert rc == 0
    metrics = json.load(open(os.path.join(
        _run_dir(tmp_path / "out"), "metrics", "metrics.json")))
    assert metrics["percent_lost"] == 0.0
