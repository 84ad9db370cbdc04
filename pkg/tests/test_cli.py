import numpy as np
import pytest

from liornet import cli
from liornet.core import read_labels, read_scan

SMALL = ["--synth.count=2", "--synth.snow_count=20", "--io.snow_ids=1"]
TRAIN = ["--train.max_steps=2", "--train.batch_size=2", "--train.crop_w=64",
         "--net.depth=2", "--net.base_channels=4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", out, *SMALL) == 0
    return out


def bins(d):
    return sorted(str(p) for p in d.glob("*.bin"))


def test_synth_writes_pairs(scenes):
    assert [p.split("/")[-1] for p in bins(scenes)] == ["scene_000000.bin", "scene_000001.bin"]
    c = read_scan(scenes / "scene_000000.bin")
    labels = read_labels(scenes / "scene_000000.label", (1,))
    assert len(labels) == len(c) and labels.sum() > 0
    assert (scenes / "config.ini").exists()


def test_split_overrides_aliases():
    rest, ov = cli.split_overrides(["train", "x.bin", "--epochs", "2", "--seed=7", "--loss.alpha=2"])
    assert rest == ["train", "x.bin"]
    assert ov == ["train.epochs=2", "train.seed=7", "loss.alpha=2"]


def test_pseudolabel_deterministic(scenes, tmp_path):
    for d in ("a", "b"):
        assert run("pseudolabel", *bins(scenes), "--out", tmp_path / d, *SMALL) == 0
    for name in ("scene_000000.label", "scene_000000.prov", "scene_000001.prov"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_project(scenes, tmp_path):
    assert run("project", *bins(scenes), "--out", tmp_path) == 0
    assert len(list(tmp_path.glob("*.rimg"))) == 2


def test_filter_then_eval(scenes, tmp_path, capsys):
    assert run("filter", "lior", *bins(scenes), "--out", tmp_path / "lior") == 0
    assert run("eval", "--pred", tmp_path / "lior", "--gt", scenes, "--name", "lior",
               "--out", tmp_path / "ev", *SMALL) == 0
    report = (tmp_path / "ev" / "report.txt").read_text()
    assert "lior" in report and "±" in report
    kv = (tmp_path / "ev" / "metrics.kv").read_text()
    assert "scan.scene_000000.tp=" in kv and "lior.precision.mean=" in kv


def test_dlior_stream(scenes, tmp_path):
    assert run("filter", "dlior", *bins(scenes), "--out", tmp_path) == 0
    assert len(list(tmp_path.glob("*.label"))) == 2


def test_train_twice_identical_then_infer(scenes, tmp_path):
    for d in ("a", "b"):
        assert run("train", *bins(scenes), "--out", tmp_path / d, "--epochs", 2, "--seed", 7, *TRAIN) == 0
    log = (tmp_path / "a" / "loss.tsv").read_text()
    assert log == (tmp_path / "b" / "loss.tsv").read_text()
    assert log.splitlines()[0].startswith("epoch\tL1")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()

    assert run("infer", tmp_path / "a" / "model.ckpt", *bins(scenes), "--out", tmp_path / "inf", *TRAIN) == 0
    probs = np.frombuffer((tmp_path / "inf" / "scene_000000.prob").read_bytes(), "<f4")
    assert len(probs) == len(read_scan(scenes / "scene_000000.bin"))

    # the echoed config reproduces the run on its own
    assert run("--config", tmp_path / "a" / "config.ini", "train", *bins(scenes), "--out", tmp_path / "c") == 0
    assert (tmp_path / "c" / "loss.tsv").read_text() == log


def test_bench(scenes, tmp_path, capsys):
    assert run("bench", *bins(scenes), "--filters", "ror,lior", "--out", tmp_path,
               "--bench.warmup=0", "--bench.reps=1") == 0
    text = (tmp_path / "bench.txt").read_text()
    assert "ror" in text and "Hz" in text


def test_missing_snow_ids_exit_code(scenes, tmp_path, capsys):
    assert run("eval", "--pred", scenes, "--gt", scenes) == 2
    assert "missing required key io.snow_ids" in capsys.readouterr().err


def test_unknown_key_exit_code(capsys):
    assert run("synth", "/nonexistent", "--train.bogus=1") == 2
    assert "valid keys in [train]" in capsys.readouterr().err


def test_missing_scan_is_stage_failure(tmp_path, capsys):
    assert run("pseudolabel", tmp_path / "none.bin", "--out", tmp_path) == 1
    assert "pseudolabel" in capsys.readouterr().err
