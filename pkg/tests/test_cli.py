import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from nirburst.cli import main
from nirburst.imaging import read_png

TINY = ["--set", "scene_net.hidden_units=32", "--set", "scene_net.hidden_layers=2",
        "--no-figures", "--quiet"]


def tiny_interf():
    return ["--set", "interf_net.hidden_units=16", "--set", "interf_net.hidden_layers=2"]


@pytest.fixture(scope="module")
def bursts(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    for kind in ("rain", "translate", "additive_interf"):
        assert main(["synth", "--kind", kind, "--out", str(root / kind), "--frames", "3",
                     "--height", "16", "--width", "16", "--max-shift", "1", "--amplitude",
                     "0.5" if kind == "rain" else "0.1"]) == 0
    return root


def run_cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "nirburst", *args], capture_output=True, text=True,
                          env=env)


def test_exit_codes(tmp_path, bursts):
    r = run_cli("separate", "--task", "sharpen", "--input", str(bursts), "--output", str(tmp_path))
    assert r.returncode == 2
    r = run_cli("separate", "--task", "rain", "--input", str(tmp_path / "nope"),
                "--output", str(tmp_path / "o"))
    assert r.returncode == 1 and "does not exist" in r.stderr
    r = run_cli("fuse", "--cfa", "RGGB", "--input", str(bursts / "translate" / "frames"),
                "--output", str(tmp_path / "o"), "--iterations", "1")
    assert r.returncode == 2 and "16-bit" in r.stderr


def test_bad_thread_env(tmp_path, bursts, monkeypatch):
    monkeypatch.setenv("NIR_THREADS", "zero")
    rc = main(["fuse", "--input", str(bursts / "translate" / "frames"), "--output", str(tmp_path),
               "--iterations", "1", *TINY])
    assert rc == 2


def test_synth_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--kind", "fence", "--out", str(tmp_path / name), "--frames", "2",
                     "--height", "16", "--width", "16", "--seed", "4"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_metrics_identical_dirs(tmp_path, bursts, capsys):
    frames = bursts / "rain" / "frames"
    assert main(["metrics", "--ref", str(frames), "--test", str(frames),
                 "--output", str(tmp_path / "m.jsonl")]) == 0
    rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert len(rows) == 3
    for row in rows:
        assert row["psnr"] == "+inf" and row["ssim"] == 1.0 and row["ncc"] == 1.0 and row["si"] == 1.0


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_separate_outputs_manifest_and_replay(tmp_path, bursts):
    out = tmp_path / "run"
    args = ["separate", "--task", "rain", "--input", str(bursts / "rain" / "frames"),
            "--output", str(out), "--iterations", "6", "--ground-truth", str(bursts / "rain"),
            *TINY, *tiny_interf(), "--set", "motion_net.hidden_units=16",
            "--set", "motion_net.hidden_layers=2"]
    assert main(args) == 0
    names = {p.name for p in (out / "layers").iterdir()}
    assert {"frame_000_scene.png", "frame_000_interf.png", "frame_002_scene.png"} <= names
    assert (out / "frames_canon.png").exists() and (out / "model" / "scene.nirw").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["iterations"] == 6 and manifest["config"]["task"] == "rain"
    assert len(manifest["metrics"]) == 3 and "timing" in manifest
    assert (out / "train_log.jsonl").read_text().count("\n") == 6

    replay = tmp_path / "replay"
    assert main(["separate", "--task", "rain", "--manifest", str(out / "manifest.json"),
                 "--output", str(replay), "--no-figures", "--quiet"]) == 0
    assert (replay / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()


def test_config_precedence(tmp_path, bursts):
    cfg = tmp_path / "c.txt"
    cfg.write_text("train.iterations = 7\ntrain.lr = 0.0002\n# comment\nweights.tvflow = 0.5\n")
    out = tmp_path / "run"
    assert main(["fuse", "--input", str(bursts / "translate" / "frames"), "--output", str(out),
                 "--config", str(cfg), "--iterations", "3", *TINY]) == 0
    conf = json.loads((out / "manifest.json").read_text())["config"]
    assert conf["iterations"] == 3 and conf["lr"] == 0.0002 and conf["weights"]["tvflow"] == 0.5
    bad = tmp_path / "bad.txt"
    bad.write_text("train.nonsense = 1\n")
    assert main(["fuse", "--input", str(bursts / "translate" / "frames"), "--output", str(out),
                 "--config", str(bad), *TINY]) == 2


def test_render_matches_run_canonical(tmp_path, bursts):
    out = tmp_path / "run"
    assert main(["fuse", "--input", str(bursts / "translate" / "frames"), "--output", str(out),
                 "--iterations", "4", *TINY]) == 0
    assert main(["render", "--model", str(out / "model"), "--output", str(tmp_path / "r"),
                 "--name", "frames", "--scale", "1", "--canonical-only"]) == 0
    assert (tmp_path / "r" / "frames_canon.png").read_bytes() == (out / "frames_canon.png").read_bytes()
    assert main(["render", "--model", str(out / "model"), "--output", str(tmp_path / "r2"),
                 "--scale", "2", "--canonical-only"]) == 0
    big = read_png(tmp_path / "r2" / "render_canon.png")
    small = read_png(out / "frames_canon.png")
    assert abs(big.shape[0] - 2 * small.shape[0]) <= 1 and abs(big.shape[1] - 2 * small.shape[1]) <= 1


def test_fuse_flow_and_window(tmp_path, bursts):
    out = tmp_path / "run"
    assert main(["fuse", "--input", str(bursts / "translate" / "frames"), "--output", str(out),
                 "--motion", "flow-w", "--iterations", "2", "--window", "-1", "-1", "0", "1", *TINY,
                 "--set", "motion_net.hidden_units=16"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["motion_kind"] == "flow_w"
    assert manifest["canonical"]["window"] == [-1.0, -1.0, 0.0, 1.0]
    assert read_png(out / "frames_canon.png").shape == (16, 8, 3)


def test_jobs_over_several_bursts(tmp_path, bursts):
    root = tmp_path / "many"
    for name in ("b0", "b1"):
        shutil.copytree(bursts / "translate" / "frames", root / name)
    out = tmp_path / "out"
    assert main(["fuse", "--input", str(root), "--output", str(out), "--iterations", "2",
                 "--seed", "10", "--jobs", "2", *TINY]) == 0
    seeds = [json.loads((out / n / "manifest.json").read_text())["seed"] for n in ("b0", "b1")]
    assert seeds == [10, 11]


def test_report_command(tmp_path, bursts):
    out = tmp_path / "run"
    assert main(["separate", "--task", "moire", "--input", str(bursts / "additive_interf" / "frames"),
                 "--output", str(out), "--iterations", "3", "--quiet", *TINY[:4], *tiny_interf()]) == 0
    assert (out / "figures" / "loss.png").exists() and (out / "figures" / "layers.png").exists()
    assert main(["report", "--run", str(out), "--out", str(tmp_path / "figs")]) == 0
    assert (tmp_path / "figs" / "loss.png").stat().st_size > 1000
