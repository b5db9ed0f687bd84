import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from handworld import cli
from handworld.errors import Diverged


def files_of(d):
    d = Path(d)
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert cli.main(["simulate", "--out", str(d), "--seed", "3", "--frames", "24"]) == 0
    return d


def test_simulate_writes_expected_layout(scene_dir):
    names = files_of(scene_dir)
    for f in ("cams_gt.tum", "cams_slam.tum", "hand_world.jsonl", "hand_camera.jsonl", "tracks.jsonl",
              "scene.meta"):
        assert f in names
    assert any(n.startswith("depth/") and n.endswith("_rel.pgm") for n in names)
    assert any(n.startswith("masks/") for n in names)
    meta = json.loads((scene_dir / "scene.meta").read_text())
    assert meta["spec"]["seed"] == 3


def test_reconstruct_eval_plot(scene_dir, tmp_path):
    out = tmp_path / "res"
    assert cli.main(["reconstruct", "--scene", str(scene_dir), "--out", str(out)]) == 0
    for f in ("cams_est.tum", "hand_world_est.jsonl", "alpha.txt"):
        assert (out / f).exists()
    assert cli.main(["eval", "--results", str(out), "--scene", str(scene_dir)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert set(report) == {"pa_mpjpe", "auc", "w_mpjpe", "wa_mpjpe", "rte", "accel", "ate", "ate_s", "fid"}
    plots = tmp_path / "plots"
    assert cli.main(["plot", "--results", str(out), "--scene", str(scene_dir), "--out", str(plots)]) == 0
    svg = (plots / "trajectory_topdown.svg").read_text()
    for pid in ("gt_cam", "est_cam", "gt_hand", "est_hand"):
        assert f'id="{pid}"' in svg
    header = (plots / "trajectories.csv").read_text().splitlines()[0]
    assert header.startswith("frame,")


def test_commands_are_byte_deterministic(tmp_path):
    runs = []
    for k in range(2):
        s, r = tmp_path / f"s{k}", tmp_path / f"r{k}"
        assert cli.main(["simulate", "--out", str(s), "--seed", "5", "--frames", "16"]) == 0
        assert cli.main(["reconstruct", "--scene", str(s), "--out", str(r)]) == 0
        assert cli.main(["eval", "--results", str(r), "--scene", str(s)]) == 0
        runs.append((files_of(s), files_of(r)))
    assert runs[0] == runs[1]


def test_gt_against_itself_reports_zero(scene_dir, tmp_path):
    res = tmp_path / "gt"
    res.mkdir()
    shutil.copy(scene_dir / "cams_gt.tum", res / "cams_est.tum")
    shutil.copy(scene_dir / "hand_world.jsonl", res / "hand_world_est.jsonl")
    (res / "alpha.txt").write_text("1.0\n")
    assert cli.main(["eval", "--results", str(res), "--scene", str(scene_dir)]) == 0
    rep = json.loads((res / "metrics.json").read_text())
    assert rep.pop("auc") == pytest.approx(1.0)
    assert all(abs(v) < 1e-9 for v in rep.values()), rep


def test_config_file_overrides(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("scene:\n  frames: 10\n  n_landmarks: 80\n")
    out = tmp_path / "s"
    assert cli.main(["--config", str(cfg), "simulate", "--out", str(out)]) == 0
    assert json.loads((out / "scene.meta").read_text())["spec"]["frames"] == 10


@pytest.mark.parametrize("text", ["bogus: 1\n", "reconstruct:\n  nope: 2\n", "scene:\n  frames: 1\n",
                                  "backend: cuda\n", "[1, 2\n", "loss:\n  bogus: 1\n"])
def test_bad_config_exit_code(tmp_path, text):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    assert cli.main(["--config", str(cfg), "simulate", "--out", str(tmp_path / "s")]) == cli.EXIT_CONFIG


def test_negative_loss_weight_is_config_error(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("loss:\n  translation: -1.0\n")
    assert cli.main(["--config", str(cfg), "train-infiller", "--out", str(tmp_path / "m.hwif")]) == cli.EXIT_CONFIG


def test_transformer_without_model_is_config_error(scene_dir, tmp_path):
    rc = cli.main(["reconstruct", "--scene", str(scene_dir), "--out", str(tmp_path), "--infill", "transformer"])
    assert rc == cli.EXIT_CONFIG


def test_io_errors_exit_code(scene_dir, tmp_path):
    assert cli.main(["reconstruct", "--scene", str(tmp_path / "missing"), "--out", str(tmp_path)]) == cli.EXIT_IO
    bad = tmp_path / "bad.hwif"
    bad.write_bytes(b"not a model")
    rc = cli.main(["reconstruct", "--scene", str(scene_dir), "--out", str(tmp_path / "r"),
                   "--infill", "transformer", "--model", str(bad)])
    assert rc == cli.EXIT_IO


def test_numerical_failure_exit_code(scene_dir, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise Diverged("forced")
    monkeypatch.setattr(cli, "reconstruct", boom)
    assert cli.main(["reconstruct", "--scene", str(scene_dir), "--out", str(tmp_path)]) == cli.EXIT_NUMERIC


def test_train_infiller_command(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("infiller:\n  d_model: 8\n  n_layers: 1\n  n_heads: 2\n  d_ffn: 8\n  window: 16\n"
                   "  crop: 16\n  batch: 2\ntraining:\n  n_sequences: 4\n  frames: 16\n")
    a, b = tmp_path / "a.hwif", tmp_path / "b.hwif"
    assert cli.main(["--config", str(cfg), "train-infiller", "--out", str(a), "--steps", "5"]) == 0
    assert cli.main(["--config", str(cfg), "train-infiller", "--out", str(b), "--steps", "5"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "handworld.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "simulate" in out.stdout and "train-infiller" in out.stdout
