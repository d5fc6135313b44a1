import json
import subprocess
import sys

import pytest

from compositor_lab.checkpoint import load_checkpoint
from compositor_lab.cli import main

TINY_CONFIG = """\
seed = 3
data.n = 16
data.split = 0.5,0.25,0.25
model.channels = 8,16
model.time_dim = 16
model.attn_dim = 8
model.groups = 4
model.token_dim = 16
train.steps = 2
train.batch_size = 2
train.log_every = 1
sampler.steps = 3
sampler.n = 2
eval.limit = 2
eval.early_step = 2
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv("COMPOSITOR_LAB_CACHE", raising=False)
    (tmp_path / "run.cfg").write_text(TINY_CONFIG)
    return tmp_path


def run(workdir, *args):
    return main(["--config", str(workdir / "run.cfg"), *args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.cfg").write_text(TINY_CONFIG)
    assert run(d, "gen-scenes") == 0
    assert run(d, "train", "--stage", "all") == 0
    return d


def test_usage_errors_exit_1(workdir, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["--jobs", "0", "gen-scenes"]) == 1
    assert run(workdir, "train") == 1  # --stage is required
    assert run(workdir, "train", "--stage", "S7") == 1
    assert "error:" in capsys.readouterr().err


def test_config_errors_exit_1(workdir):
    (workdir / "bad.cfg").write_text("train.s3.alhpa = 0.25\n")
    assert main(["--config", str(workdir / "bad.cfg"), "gen-scenes"]) == 1
    assert main(["--config", str(workdir / "missing.cfg"), "gen-scenes"]) == 1


def test_runtime_errors_exit_2(workdir):
    assert run(workdir, "train", "--stage", "S1") == 2  # no dataset yet
    assert run(workdir, "eval", "--mode", "empty") == 2  # no checkpoint
    (workdir / "junk.bin").write_bytes(b"not a checkpoint")
    assert run(workdir, "eval", "--mode", "empty", "--ckpt", str(workdir / "junk.bin")) == 2


def test_help_via_console_script():
    out = subprocess.run([sys.executable, "-m", "compositor_lab.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-scenes", "run-pipeline", "train", "merge", "sample", "eval"):
        assert cmd in out.stdout


def test_gen_scenes_and_pipeline(workdir):
    assert run(workdir, "gen-scenes") == 0
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert len(manifest["records"]) == 16
    assert (workdir / "data" / "config.resolved").exists()
    assert run(workdir, "run-pipeline", "--limit", "3") == 0
    assert (workdir / "pipeline" / "config.resolved").exists()


def test_cache_env_moves_dataset(workdir, monkeypatch):
    monkeypatch.setenv("COMPOSITOR_LAB_CACHE", str(workdir / "cache"))
    assert run(workdir, "gen-scenes", "--n", "4") == 0
    assert (workdir / "cache" / "data" / "manifest.json").exists()
    assert not (workdir / "data").exists()


def test_train_all_outputs(trained):
    runs = trained / "runs"
    for tag in ("S1", "S2", "S3", "S4", "S5", "S6", "merged"):
        assert (runs / f"ckpt_{tag}.bin").exists()
    assert load_checkpoint(runs / "ckpt_S6.bin").stage_tag == "S6"
    lines = (runs / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,stage,L_d,L_m,lr"
    assert {l.split(",")[1] for l in lines[1:]} == {"S1", "S2", "S3", "S4", "S5", "S6"}
    assert (runs / "config.resolved").exists()


def test_stagewise_training(trained, tmp_path):
    out = str(tmp_path / "stages")
    assert run(trained, "train", "--stage", "S1", "--out", out) == 0
    assert run(trained, "train", "--stage", "S2", "--out", out) == 0
    assert run(trained, "train", "--stage", "S3", "--out", out) == 2  # merge not run yet
    s1, s2 = str(tmp_path / "stages" / "ckpt_S1.bin"), str(tmp_path / "stages" / "ckpt_S2.bin")
    merged = str(tmp_path / "stages" / "ckpt_merged.bin")
    assert run(trained, "merge", "--a", s1, "--b", s2, "--output", merged) == 0
    assert run(trained, "merge", "--alpha", "2", "--a", s1, "--b", s2) == 1
    assert run(trained, "train", "--stage", "S3", "--out", out) == 0
    assert run(trained, "train", "--stage", "S4", "--init", s1, "--out", out) == 2  # incompatible


def test_sample_outputs(trained, tmp_path):
    out = tmp_path / "s"
    assert run(trained, "sample", "--bbox", "10,20,30,40", "--n", "2", "--trajectory", "--out", str(out)) == 0
    names = sorted(p.name for p in out.iterdir())
    assert len(names) == 8 and sum(n.endswith(".traj.png") for n in names) == 2
    meta = json.loads(out.joinpath(next(n for n in names if n.endswith(".json"))).read_text())
    assert meta["bbox"] == [10, 20, 30, 40] and meta["steps"] == 3 and meta["stage"] == "S6"
    assert "seconds" in meta["timings"]
    assert run(trained, "sample", "--bbox", "1,2,3", "--out", str(out)) == 1
    assert run(trained, "sample", "--bbox", "30,20,10,40", "--out", str(out)) == 1
    assert run(trained, "sample", "--index", "99", "--out", str(out)) == 1
    s1 = str(trained / "runs" / "ckpt_S1.bin")
    assert run(trained, "sample", "--bbox", "10,20,30,40", "--ckpt", s1, "--out", str(out)) == 2


def test_eval_outputs(trained):
    for mode in ("empty", "bbox"):
        assert run(trained, "eval", "--mode", mode) == 0
        d = trained / "runs" / f"eval_{mode}"
        report = json.loads((d / "report.json").read_text())
        assert report["mode"] == mode and report["n_predictions_per_image"] == 2
        assert len(report["per_image"]) == 2
        assert (d / "report.csv").exists() and (d / "config.resolved").exists()
    assert not (trained / "runs" / "eval_bbox" / "contact.png").exists()
    assert run(trained, "eval", "--mode", "bbox", "--sheet", "--out", str(trained / "sheet")) == 0
    assert (trained / "sheet" / "contact.png").exists()
