import json

import numpy as np
import pytest

from agegender import cli
from agegender.data import read_pnm
from agegender.models import build_model
from agegender.serialization import load_model, save_model
from agegender.training import strip_wall_clock

from helpers import small_attention_spec, tiny_resnet_spec


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- parsing and config ------------------------------------------------------------------

def test_precedence_flag_config_env_default(tmp_path, monkeypatch):
    parser = cli.build_parser()
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 7, "lr": 0.1}))
    monkeypatch.setenv("AAG_EPOCHS", "3")
    monkeypatch.setenv("AAG_BATCH_SIZE", "4")
    monkeypatch.setenv("AAG_DETACH_GENDER", "yes")
    args = parser.parse_args(["train", "--config", str(tmp_path / "c.json"), "--lr", "0.2"])
    cfg = cli.resolve(args)
    assert cfg["lr"] == 0.2            # flag beats file
    assert cfg["epochs"] == 7          # file beats env
    assert cfg["batch_size"] == 4      # env beats default
    assert cfg["detach_gender"] is True
    assert cfg["input_size"] == 64 and cfg["model"] == "attention-net"


def test_defaults_match_interface():
    cfg = cli.resolve(cli.build_parser().parse_args(["train"]))
    assert cfg["batch_size"] == 16 and cfg["lr"] == 0.005 and cfg["input_size"] == 64
    assert cfg["precision"] == "f32" and cfg["lambda_age"] == 1.0


def test_bad_arguments_exit_2(capsys, tmp_path):
    assert run(capsys, "train", "--model", "vgg")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "prepare", "--out", tmp_path)[0] == 2  # no dataset
    assert run(capsys, "train", "--config", tmp_path / "missing.json")[0] == 2


# -- prepare --------------------------------------------------------------------------------

def test_prepare_is_idempotent(capsys, tmp_path, utk_dir):
    code, out, _ = run(capsys, "prepare", "--dataset", utk_dir, "--out", tmp_path / "a")
    assert code == 0 and json.loads(out)["total"] == 60
    run(capsys, "prepare", "--dataset", utk_dir, "--out", tmp_path / "b")
    for f in ("split.json", "census.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    split = json.loads((tmp_path / "a" / "split.json").read_text())
    assert sum(len(split[k]) for k in ("train", "val", "test")) == 60
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["command"] == "prepare" and cfg["dataset"] == str(utk_dir)


def test_prepare_missing_dir_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "prepare", "--dataset", tmp_path / "nope", "--out", tmp_path / "o")
    assert code == 2 and "error" in err


# -- train ----------------------------------------------------------------------------------

def test_train_resnet_smoke_and_determinism(capsys, tmp_path, utk_dir):
    argv = ["train", "--dataset", utk_dir, "--model", "resnet-lite", "--epochs", 1, "--subset", 64,
            "--seed", 5]
    code, out, _ = run(capsys, *argv, "--out", tmp_path / "a")
    assert code == 0 and json.loads(out)["epochs"] == 1
    m = load_model(tmp_path / "a" / "final.aagw")
    assert m.spec.backbone == "resnet_lite" and m.spec.input_size == 64
    load_model(tmp_path / "a" / "best.aagw")
    # rerun from the stored config reproduces the weights bit for bit
    code, _, _ = run(capsys, "train", "--config", tmp_path / "a" / "config.json", "--out", tmp_path / "b")
    assert code == 0
    assert (tmp_path / "a" / "final.aagw").read_bytes() == (tmp_path / "b" / "final.aagw").read_bytes()
    logs = [[json.loads(l) for l in (tmp_path / d / "log.ndjson").read_text().splitlines()] for d in "ab"]
    assert strip_wall_clock(logs[0]) == strip_wall_clock(logs[1])


def test_train_attention_then_export_three_taps(capsys, tmp_path, utk_dir):
    code, _, _ = run(capsys, "train", "--dataset", utk_dir, "--model", "attention-net", "--epochs", 1,
                     "--subset", 16, "--input-size", 32, "--out", tmp_path / "t")
    assert code == 0
    img = sorted(utk_dir.iterdir())[0]
    code, out, _ = run(capsys, "export-attention", "--weights", tmp_path / "t" / "final.aagw",
                       "--out", tmp_path / "maps", "--", img)
    assert code == 0
    files = json.loads(out)["files"]
    pgms = [f for f in files if f.endswith(".pgm")]
    assert len(pgms) == 3
    for f in pgms:
        assert read_pnm(f).shape == (32, 32)


# -- eval / predict / export ------------------------------------------------------------------

@pytest.fixture
def weights(tmp_path):
    a = tmp_path / "a.aagw"
    save_model(a, build_model(small_attention_spec(input_size=32, seed=1)))
    r = tmp_path / "r.aagw"
    save_model(r, build_model(tiny_resnet_spec(input_size=32, seed=2)))
    five = tmp_path / "five.aagw"
    save_model(five, build_model(tiny_resnet_spec(input_size=32, num_age_buckets=5)))
    return a, r, five


def test_eval_single_and_identical_ensemble(capsys, tmp_path, utk_dir, weights):
    a = weights[0]
    base = ["eval", "--dataset", utk_dir, "--split", "train"]
    assert run(capsys, *base, "--weights", a, "--out", tmp_path / "one")[0] == 0
    assert run(capsys, *base, "--weights", a, a, "--out", tmp_path / "two")[0] == 0
    one = json.loads((tmp_path / "one" / "metrics.json").read_text())
    two = json.loads((tmp_path / "two" / "metrics.json").read_text())
    one.pop("label"), two.pop("label")
    assert one == two
    assert (tmp_path / "two" / "member0.json").exists()


def test_eval_mismatched_buckets_exit_2(capsys, tmp_path, utk_dir, weights):
    _, r, five = weights
    code, _, err = run(capsys, "eval", "--dataset", utk_dir, "--weights", r, five, "--out", tmp_path / "e")
    assert code == 2 and "buckets" in err


def test_predict_outputs(capsys, tmp_path, utk_dir, weights):
    a = weights[0]
    good = sorted(utk_dir.iterdir())[0]
    bad = tmp_path / "bad.jpg"
    bad.write_bytes(b"nope")
    code, out, _ = run(capsys, "predict", good, bad, "--weights", a)
    assert code == 0
    res = json.loads(out)
    assert [r["path"] for r in res] == [str(good), str(bad)]
    g, age = res[0]["gender"], res[0]["age"]
    assert g["label"] in ("male", "female") and abs(sum(g["probs"]) - 1) < 1e-5
    assert abs(sum(age["probs"]) - 1) < 1e-5
    lo, hi = (int(v) for v in age["label"].split("-"))
    assert hi - lo == 10 and lo == 10 * age["bucket"]
    assert "error" in res[1]
    assert run(capsys, "predict", "--weights", a, "--", bad)[0] == 1


def test_export_attention_on_resnet_exit_3(capsys, tmp_path, utk_dir, weights):
    img = sorted(utk_dir.iterdir())[0]
    code, _, err = run(capsys, "export-attention", "--weights", weights[1], "--out", tmp_path / "m", "--", img)
    assert code == 3 and "attention" in err


def test_corrupt_weights_exit_2(capsys, tmp_path):
    w = tmp_path / "w.aagw"
    w.write_bytes(b"AAGW\x09\x00\x00\x00")
    img = tmp_path / "1_0_0_x.png"
    assert run(capsys, "predict", img, "--weights", w)[0] == 2
