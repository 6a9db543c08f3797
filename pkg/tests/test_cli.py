import json
import subprocess
import sys

import pytest
import torch
import yaml

from umd.cli import ABLATIONS, EXIT_CONFIG, EXIT_IO, main

TINY_SET = ["--set", "model.width=16", "--set", "model.enc_depth=1", "--set", "model.dec_depth=1",
            "--set", "model.n_heads=2", "--set", "sampler.n_steps=2"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--out", str(out), "--max_steps", "2", *TINY_SET]) == 0
    return out


def test_pretrain_outputs(pretrained):
    assert (pretrained / "pretrain.pt").is_file()
    cfg = yaml.safe_load((pretrained / "config.yaml").read_text())
    assert cfg["model.width"] == 16 and cfg["objective.r_t0"] == 0.5
    kinds = {json.loads(line)["kind"] for line in (pretrained / "metrics.jsonl").read_text().splitlines()}
    assert kinds == {"train", "epoch"}


def test_config_file_then_overrides(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("objective.r_t0: 0.2\nmodel.width: 16\n")
    code, out, _ = run(capsys, "pretrain", "--config", str(tmp_path / "c.yaml"), "--set", "objective.r_t0=0.3",
                       "--set", "model.enc_depth=1", "--set", "model.dec_depth=1", "--set", "model.n_heads=2",
                       "--seed", "5", "--out", str(tmp_path / "o"), "--max_steps", "1")
    assert code == 0 and json.loads(out)["ok"]
    cfg = yaml.safe_load((tmp_path / "o" / "config.yaml").read_text())
    assert (cfg["objective.r_t0"], cfg["model.width"], cfg["seed"]) == (0.3, 16, 5)


def test_probe(pretrained, tmp_path, capsys):
    code, out, _ = run(capsys, "probe", "--checkpoint", str(pretrained / "pretrain.pt"), "--shots", "5",
                       "--out", str(tmp_path))
    assert code == 0
    rec = json.loads(out.splitlines()[-1])
    assert rec["shots"] == 5 and 0 <= rec["accuracy"] <= 1
    assert (tmp_path / "config.yaml").is_file() and (tmp_path / "probe.jsonl").is_file()


def test_finetune_then_sample(pretrained, tmp_path, capsys):
    code, _, _ = run(capsys, "finetune", "--checkpoint", str(pretrained / "pretrain.pt"),
                     "--out", str(tmp_path / "ft"), "--max_steps", "2")
    assert code == 0
    code, _, _ = run(capsys, "sample", "--checkpoint", str(tmp_path / "ft" / "finetune.pt"), "--out",
                     str(tmp_path / "s"), "--cfg_scale", "1.5", "--steps", "2", "--eta", "0", "--label", "3", "--n", "2")
    assert code == 0
    meta = json.loads((tmp_path / "s" / "samples.json").read_text())
    assert meta["cfg_scale"] == 1.5 and meta["labels"] == [3, 3] and meta["model_evals"] == 4
    assert (tmp_path / "s" / "samples.png").is_file()
    assert torch.load(tmp_path / "s" / "samples.pt").shape == (2, 1, 16, 16)


def test_sample_label_outside_vocabulary(pretrained, tmp_path, capsys):
    code, _, err = run(capsys, "sample", "--checkpoint", str(pretrained / "pretrain.pt"), "--label", "3",
                       "--out", str(tmp_path))
    assert code == EXIT_CONFIG and json.loads(err)["error"] == "config"


def test_unconditional_sample(pretrained, tmp_path, capsys):
    code, _, _ = run(capsys, "sample", "--checkpoint", str(pretrained / "pretrain.pt"), "--n", "3",
                     "--out", str(tmp_path))
    assert code == 0
    assert json.loads((tmp_path / "samples.json").read_text())["labels"] is None


def test_error_exit_codes(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--set", "nope=1", "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    rec = json.loads(err)
    assert rec["exit_code"] == 2 and "nope" in rec["message"]
    code, _, err = run(capsys, "probe", "--checkpoint", str(tmp_path / "missing.pt"), "--out", str(tmp_path))
    assert code == EXIT_IO and len(err.strip().splitlines()) == 1
    (tmp_path / "file").write_text("")
    code, _, err = run(capsys, "pretrain", "--out", str(tmp_path / "file" / "sub"))
    assert code == EXIT_IO


def test_ablate_grid(tmp_path, capsys):
    assert list(ABLATIONS) == ["base", "x0_only", "eps_only", "low_r_t0", "high_m", "m_zero", "no_adaln"]
    code, out, _ = run(capsys, "ablate", "--out", str(tmp_path), "--rows", "base", "m_zero", "--max_steps", "2",
                       "--shots", "3", *TINY_SET)
    assert code == 0
    table = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["row"] for r in table] == ["base", "m_zero"]
    assert table[0]["enc_token_steps"] < table[1]["enc_token_steps"]
    assert (tmp_path / "m_zero" / "config.yaml").is_file()
    code, _, _ = run(capsys, "ablate", "--out", str(tmp_path), "--rows", "bogus")
    assert code == EXIT_CONFIG


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "umd.cli", "pretrain", "--set", "bad.key=1", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and json.loads(proc.stderr)["error"] == "config"
