import json
import subprocess
import sys

import numpy as np
import pytest

from artcore.cli import main
from artcore.geometry import sim3_exp
from artcore.splatting import load_png
from artcore.trajectory import Trajectory, write_tum

FAST = ["--set", "synthetic.n_frames=9", "--set", "synthetic.period=60", "--set", "optim.K=2",
        "--set", "optim.global_budget=4"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "run.cfg"
    cfg.write_text("# small run\nwrite_images = true\nsynthetic.width = 48\nsynthetic.height = 36\n")
    code = main(["run", "--config", str(cfg), "--seed", "2", "--deterministic", "--no-loop-closure",
                 "--provider", "synthetic", "--out", str(out), *FAST])
    return code, out


def test_run_writes_artifacts(run_dir, capsys):
    code, out = run_dir
    assert code == 0
    for name in ("metrics.json", "trajectory.txt", "groundtruth.txt", "map.adgs", "trajectory.svg",
                 "graph.txt", "eval/frame_000007_render.png", "eval/frame_000007_target.png"):
        assert (out / name).exists(), name
    m = json.loads((out / "metrics.json").read_text())
    assert m["complete"] and m["loops"] == [] and m["timing"]["mapper_ms"] == 0.0
    assert load_png(out / "eval/frame_000007_target.png").shape == (36, 48, 3)


def test_eval_command(run_dir, capsys):
    _, out = run_dir
    code = main(["eval", "--traj-est", str(out / "trajectory.txt"), "--traj-gt", str(out / "groundtruth.txt")])
    assert code == 0
    res = json.loads(capsys.readouterr().out)
    assert res["pairs"] == 9 and res["ate_rmse"] < 1e-6


def test_eval_without_scale(tmp_path, capsys):
    rng = np.random.default_rng(0)
    gt = Trajectory(np.arange(6) / 30, [sim3_exp(rng.normal(0, 1, 7)) for _ in range(6)])
    shift = sim3_exp(np.r_[1.0, 2.0, 0, 0, 0, 0.3, 0])
    est = Trajectory(gt.timestamps, [shift @ T for T in gt.poses])
    write_tum(tmp_path / "gt.txt", gt)
    write_tum(tmp_path / "est.txt", est)
    assert main(["eval", "--traj-est", str(tmp_path / "est.txt"), "--traj-gt", str(tmp_path / "gt.txt"),
                 "--no-scale"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["scale"] == 1.0 and res["ate_rmse"] < 1e-9


def test_render_command(run_dir, tmp_path, capsys):
    _, out = run_dir
    png = tmp_path / "view.png"
    code = main(["render", "--map", str(out / "map.adgs"), "--pose", "0 0 0 0 0 0 1",
                 "--out", str(png), "--width", "40", "--height", "30", "--background", "1", "1", "1"])
    assert code == 0 and capsys.readouterr().out.strip() == str(png)
    img = load_png(png)
    assert img.shape == (30, 40, 3) and img.min() < 1.0


@pytest.mark.parametrize("argv", [
    ["run", "--set", "nonsense"],
    ["run", "--set", "optim.unknown=3"],
    ["run", "--set", "eval_stride=1"],
    ["run", "--config", "/nonexistent/run.cfg"],
    ["run", "--provider", "files"],
    ["eval", "--traj-est", "/nonexistent/a.txt", "--traj-gt", "/nonexistent/b.txt"],
    ["render", "--map", "/nonexistent/map.adgs", "--pose", "0 0 0 0 0 0 1", "--out", "x.png"],
    ["render", "--map", "m.adgs", "--pose", "1 2 3", "--out", "x.png"],
])
def test_bad_input_exits_2(argv, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert capsys.readouterr().err


def test_missing_dataset_exits_3(tmp_path, capsys):
    code = main(["run", "--provider", "files", "--set", f"data={tmp_path / 'absent'}",
                 "--out", str(tmp_path / "o")])
    assert code == 3 and "provider error" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "artcore", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "run" in res.stdout and "render" in res.stdout
    res = subprocess.run([sys.executable, "-m", "artcore", "launch"], capture_output=True, text=True)
    assert res.returncode == 2
