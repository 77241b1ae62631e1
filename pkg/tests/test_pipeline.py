import json
import threading

import numpy as np
import pytest

from artcore.artifacts import validate_metrics
from artcore.config import load_config
from artcore.mapping import MapOptimizer
from artcore.pipeline import (EXIT_INCOMPLETE, EXIT_OK, EXIT_PROVIDER, Pipeline, StageError,
                              make_provider)
from artcore.providers.base import ProviderError

FAST = {"optim.K": "2", "optim.global_budget": "4", "write_images": "false"}


def config(tmp_path, **kw):
    values = {"synthetic.n_frames": "9", "out": str(tmp_path), **FAST}
    values.update({k.replace("__", "."): str(v) for k, v in kw.items()})
    return load_config(None, {}, values).validate()


class Faulty:
    """Delegates to a real provider but fails to deliver one frame."""

    def __init__(self, inner, bad_id):
        self.inner, self.bad_id = inner, bad_id

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def frame(self, fid):
        if fid == self.bad_id:
            raise ProviderError("image file unreadable")
        return self.inner.frame(fid)


def run_with_timeout(pipe, seconds=120):
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("r", pipe.run(emit=False)), daemon=True)
    t.start()
    t.join(seconds)
    assert not t.is_alive(), "pipeline deadlocked"
    return box["r"]


@pytest.mark.parametrize("n", [1, 2, 5, 11])
def test_capacity_one_queues_never_deadlock(tmp_path, n):
    cfg = config(tmp_path, queue_capacity=1, synthetic__n_frames=n)
    r = run_with_timeout(Pipeline(cfg))
    assert r.complete and len(r.frame_classes) == n


def test_threaded_matches_deterministic(tmp_path):
    a = Pipeline(config(tmp_path / "a", deterministic="true")).run(emit=False)
    b = run_with_timeout(Pipeline(config(tmp_path / "b", queue_capacity=1)))
    assert a.keyframes == b.keyframes and a.frame_classes == b.frame_classes
    for P, Q in zip(a.trajectory.poses, b.trajectory.poses):
        assert P.s == Q.s and np.array_equal(P.q, Q.q) and np.array_equal(P.t, Q.t)
    assert a.psnr_per_frame == b.psnr_per_frame
    assert b.timing_ms["frontend_ms"] > 0 and a.timing_ms["frontend_ms"] == 0


def test_run_report_and_eval_isolation(tmp_path):
    cfg = config(tmp_path, synthetic__n_frames=17, deterministic="true")
    pipe = Pipeline(cfg)
    r = pipe.run()
    assert r.complete and r.exit_code == EXIT_OK
    assert r.eval_frames == [7, 15]
    assert not set(r.eval_frames) & r.supervised_frames
    assert not set(r.eval_frames) & set(pipe.optimizer.ledger.visits)
    assert set(r.psnr_per_frame) == {7, 15}
    assert r.ate_rmse < 1e-6
    assert sum(r.n_gaussians_per_level) == len(pipe.map)
    m = json.loads((tmp_path / "metrics.json").read_text())
    validate_metrics(m)
    assert m == json.loads(json.dumps(r.metrics()))
    assert (tmp_path / "map.adgs").exists() and (tmp_path / "trajectory.svg").exists()


def test_eval_frames_never_reach_the_optimizer(tmp_path, monkeypatch):
    seen = []
    orig = MapOptimizer.train_step

    def spy(self, fid, refine_pose=False):
        seen.append(fid)
        return orig(self, fid, refine_pose)

    monkeypatch.setattr(MapOptimizer, "train_step", spy)
    cfg = config(tmp_path, eval_stride=3, deterministic="true")
    r = Pipeline(cfg).run(emit=False)
    assert r.eval_frames == [2, 5, 8] and seen
    assert not set(seen) & set(r.eval_frames)


@pytest.mark.parametrize("deterministic", ["true", "false"])
def test_provider_failure_gives_partial_report(tmp_path, deterministic):
    cfg = config(tmp_path, deterministic=deterministic)
    pipe = Pipeline(cfg, Faulty(make_provider(cfg), 5))
    r = pipe.run()
    assert not r.complete and r.exit_code == EXIT_PROVIDER
    assert "frame 5" in r.error and "frontend" in r.error
    assert sorted(r.frame_classes) == [0, 1, 2, 3, 4]
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["complete"] is False and m["error"] == r.error


def test_stage_crash_is_incomplete(tmp_path, monkeypatch):
    def boom(self, *a, **k):
        raise RuntimeError("out of memory")

    monkeypatch.setattr(MapOptimizer, "streaming_step", boom)
    r = Pipeline(config(tmp_path, deterministic="true")).run(emit=False)
    assert not r.complete and r.exit_code == EXIT_INCOMPLETE
    assert r.error.startswith("mapper stage failed at frame 0")


def test_stage_error_message():
    e = StageError("backend", 12, ValueError("bad edge"))
    assert str(e) == "backend stage failed at frame 12: bad edge" and e.stage == "backend"
    assert str(StageError("mapper", None, ValueError("x"))) == "mapper stage failed: x"


def test_mapping_disabled(tmp_path):
    r = Pipeline(config(tmp_path, mapping="false", deterministic="true")).run()
    assert r.complete and r.psnr_per_frame == {} and sum(r.n_gaussians_per_level) == 0
    assert not (tmp_path / "map.adgs").exists()
