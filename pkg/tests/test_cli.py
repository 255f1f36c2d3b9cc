import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from lip2speech import cli
from lip2speech.config import ModelConfig, TrainConfig


def test_help_exits_zero(capsys):
    assert cli.dispatch(["--help"]) == 0
    assert "gen-synthetic" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    assert cli.dispatch(["preprocess", "--manifest", "m.jsonl", "--bogus"]) == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def test_unknown_subcommand():
    assert cli.dispatch(["teleport"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "lip2speech.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "sweep-units" in res.stdout


def _dirs_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_dirs_equal(a / d, b / d) for d in cmp.common_dirs)


def test_gen_synthetic_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.dispatch(["gen-synthetic", "--out", str(tmp_path / name), "--clips", "4",
                             "--seed", "7"]) == 0
    assert _dirs_equal(tmp_path / "a", tmp_path / "b")
    lines = (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 4 and {json.loads(l)["split"] for l in lines} == {"train", "val", "test"}


def _resolve(argv):
    args = cli.build_parser().parse_args(argv)
    return cli.resolve_configs(args)


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  d_model: 120\n  n_heads: 4\ntrain:\n  lr: 0.001\n  batch_size: 8\n")
    base = ["train", "--manifest", "m", "--out", "o"]
    m, t = _resolve(base)
    assert m == ModelConfig() and t == TrainConfig()
    m, t = _resolve(base + ["--preset", "lip2wav"])
    assert (m.d_model, m.n_heads, t.window_length) == (512, 8, 75)
    m, t = _resolve(base + ["--preset", "lip2wav", "--config", str(cfg)])
    assert (m.d_model, m.n_heads, t.lr, t.batch_size, t.window_length) == (120, 4, 0.001, 8, 75)
    m, t = _resolve(base + ["--preset", "lip2wav", "--config", str(cfg), "--d-model", "96",
                            "--set", "train.batch_size=3", "--set", "model.enc_layers=2"])
    assert (m.d_model, m.n_heads, m.enc_layers, t.batch_size, t.lr) == (96, 4, 2, 3, 0.001)


def test_bad_set_and_unknown_key(capsys):
    assert cli.dispatch(["train", "--manifest", "m", "--out", "o", "--set", "nodot=1"]) == 2
    assert cli.dispatch(["train", "--manifest", "m", "--out", "o", "--set", "model.nope=1"]) == 2
    assert "nope" in capsys.readouterr().err


def test_missing_cache_is_data_error(tmp_path, capsys, monkeypatch):
    cli.dispatch(["gen-synthetic", "--out", str(tmp_path), "--clips", "2", "--frames", "30"])
    monkeypatch.setenv("LIP2SPEECH_CACHE", str(tmp_path / "empty_cache"))
    code = cli.dispatch(["train", "--manifest", str(tmp_path / "manifest.jsonl"),
                         "--out", str(tmp_path / "run")])
    assert code == 4
    assert "preprocess" in capsys.readouterr().err


def test_unknown_backend_is_dependency_error(corpus, tmp_path):
    code = cli.dispatch(["fit-units", "--manifest", str(corpus["root"] / "manifest.jsonl"),
                         "--cache", str(tmp_path), "--backend", "nonexistent"])
    assert code == 3


@pytest.mark.slow
def test_full_pipeline(tmp_path):
    root = tmp_path / "d"
    man = str(root / "manifest.jsonl")
    tiny = ["--d-model", "32", "--n-heads", "4", "--frontend-channels", "4", "--K", "20",
            "--n-speakers", "2", "--batch-size", "2", "--window-length", "20",
            "--set", "model.enc_layers=1", "--set", "model.dec_layers=1"]
    assert cli.dispatch(["gen-synthetic", "--out", str(root), "--clips", "4", "--frames", "40"]) == 0
    assert cli.dispatch(["preprocess", "--manifest", man]) == 0
    assert cli.dispatch(["fit-units", "--manifest", man, "--clusters", "20"]) == 0
    assert cli.dispatch(["train", "--manifest", man, "--out", str(tmp_path / "run"),
                         "--epochs", "1"] + tiny) == 0
    ckpt = str(tmp_path / "run" / "last.pt")
    assert cli.dispatch(["synth", "--checkpoint", ckpt, "--video", str(root / "video/syn0000.npy"),
                         "--temperature", "0", "--out", str(tmp_path / "o.wav"),
                         "--dump-mel", str(tmp_path / "o.npy")]) == 0
    assert np.load(tmp_path / "o.npy").shape == (160, 80)
    assert cli.dispatch(["eval", "--checkpoint", ckpt, "--manifest", man,
                         "--report", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["intelligibility"]["wer"] == 0.0 and report["intelligibility"]["n_samples"] == 1
    assert "energy_mae" in report["energy"]
