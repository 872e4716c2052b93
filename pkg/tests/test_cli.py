import csv
import json

import pytest

from talon.cli import main

SPEC = "length=360\nchannels=2\nseed=5\nblock=48\nregimes=linear-trend,sinusoid,ar1\n"
CONFIG = """\
data.synth = corpus.spec
window.L = 32
window.S = 8
window.period = 4
model.d = 8
model.layers = 1
model.heads = 2
model.max_positions = 16
optim.epochs = 1
optim.batch = 16
optim.max_steps = 3
train.stride = 8
split.counts = 240,40,80
eval.horizons = 8,16
"""


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "corpus.spec").write_text(SPEC)
    (tmp_path / "run.cfg").write_text(CONFIG)
    return tmp_path


@pytest.fixture(autouse=True)
def _in_workdir(workdir, monkeypatch):
    monkeypatch.chdir(workdir)  # config paths are relative to the working directory


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_train_eval_pipeline(workdir, capsys):
    data = workdir / "corpus.csv"
    code, out, _ = _run(capsys, "synth", "--spec", workdir / "corpus.spec", "--out", data)
    assert code == 0 and json.loads(out)["csv"] == str(data)
    with open(workdir / "corpus.labels.csv") as fh:
        labels = list(csv.DictReader(fh))
    assert len(labels) == 360 and {r["regime"] for r in labels} == {"linear-trend", "sinusoid", "ar1"}

    code, out, _ = _run(capsys, "train", "--config", workdir / "run.cfg", "--out", workdir / "run")
    assert code == 0 and json.loads(out)["steps"] == 3
    ckpt = workdir / "run" / "ckpt" / "model.tlnc"
    with open(workdir / "run" / "reports" / "loss_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "L", "L_MSE", "L_MoE", "L_align", "val_MSE"] and len(rows) == 3

    blobs = []
    for target in ("a", "b"):
        code, out, _ = _run(capsys, "eval", "--ckpt", ckpt, "--data", data, "--out", workdir / target)
        assert code == 0 and json.loads(out)["records"] == 2
        blobs.append((workdir / target / "reports" / "eval-one-for-all-corpus.jsonl").read_bytes())
    assert blobs[0] == blobs[1]
    record = json.loads(blobs[0].decode().splitlines()[0])
    assert {"mse", "mae", "horizon", "run_config", "build"} <= set(record)

    code, out, _ = _run(capsys, "analyze", "experts", "--ckpt", ckpt, "--data", data,
                        "--labels", workdir / "corpus.labels.csv", "--out", workdir / "a")
    hist = json.loads((workdir / "a" / "reports" / "experts-corpus.json").read_text())
    assert code == 0 and set(hist["per_regime"]) == {"0", "1", "2"}
    code, _, _ = _run(capsys, "zeroshot", "--ckpt", ckpt, "--target", data, "--out", workdir / "a")
    assert code == 0


def test_ablate_unknown_switch_is_usage_error(workdir, capsys):
    code, out, err = _run(capsys, "ablate", "--config", workdir / "run.cfg", "--switches", "w/o-sam,w/o-everything")
    assert code == 2 and out == ""
    payload = json.loads(err)
    assert payload["switch"] == "w/o-everything" and payload["error"] == "ConfigError"


def test_usage_and_io_errors(workdir, capsys):
    code, _, err = _run(capsys, "train")
    assert code == 2 and "error" in json.loads(err)
    code, _, err = _run(capsys, "eval", "--ckpt", workdir / "missing.tlnc", "--data", "x.csv")
    assert code == 1 and json.loads(err)["error"] == "FileNotFoundError"
    (workdir / "bad.cfg").write_text("model.colour = red\n")
    code, _, err = _run(capsys, "train", "--config", workdir / "bad.cfg")
    assert code == 2 and "model.colour" in json.loads(err)["message"]


def test_corrupt_checkpoint_is_runtime_error(workdir, capsys):
    bad = workdir / "bad.tlnc"
    bad.write_bytes(b"TLNC\x01")
    code, _, err = _run(capsys, "eval", "--ckpt", bad, "--data", workdir / "corpus.spec")
    assert code == 1 and "corrupt" in json.loads(err)["message"]


def test_threads_env_override(workdir, capsys, monkeypatch):
    monkeypatch.setenv("TALON_THREADS", "lots")
    code, _, err = _run(capsys, "synth", "--spec", workdir / "corpus.spec", "--out", workdir / "c.csv", "--threads", "2")
    assert code == 0  # synth never touches the thread pool
    code, _, err = _run(capsys, "train", "--config", workdir / "run.cfg")
    assert code == 2 and "TALON_THREADS" in json.loads(err)["message"]
