import csv
import json
import os

import pytest
import torch

from bayeslora.checkpoint import CheckpointError, atomic_write, decode, encode
from bayeslora.cli import main
from bayeslora.config import ConfigError, dump_config, parse_config

TINY = """
[task]
n_pretrain = 300
n_train = 96
n_val = 48
n_test = 96
n_ood = 96

[method]
inducing_rows = 3
inducing_cols = 3

[train]
epochs = 2
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return str(path)


def test_config_round_trip():
    cfg = parse_config(TINY + "\n[run]\nmode = ablate-flow\nseeds = 1, 2\nflow_depths = 0, 2\n")
    assert cfg.run.seeds == (1, 2) and cfg.run.flow_depths == (0, 2) and cfg.train.epochs == 2
    again = parse_config(dump_config(cfg))
    assert again == cfg


def test_config_collects_every_violation():
    text = "[run]\nmode = train\nworkers = many\n[train]\nepochz = 3\n[extra]\na = 1\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    v = info.value.violations
    assert any("unknown section [extra]" in s for s in v)
    assert any("epochz" in s for s in v)
    assert any("workers" in s for s in v)


def test_config_requires_mode_and_valid_values():
    with pytest.raises(ConfigError, match="mode"):
        parse_config(TINY)
    with pytest.raises(ConfigError, match="needs a Bayesian method"):
        parse_config("[run]\nmode = ablate-rank\n[method]\nkind = map_lora\n")
    with pytest.raises(ConfigError, match="expected a boolean"):
        parse_config("[run]\nmode = train\n[method]\nfused = maybe\n")


def test_checkpoint_round_trip_and_corruption(tmp_path):
    tensors = {"a": torch.randn(2, 3, dtype=torch.float64), "n": torch.tensor([1, 2], dtype=torch.int64),
               "s": torch.tensor(3.5, dtype=torch.float64)}
    data = encode(tensors, {"k": [1, 2]})
    back, meta = decode(data)
    assert meta == {"k": [1, 2]} and all(torch.equal(back[k], tensors[k]) for k in tensors)
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(flipped))
    with pytest.raises(CheckpointError):
        decode(b"nope")
    with pytest.raises(CheckpointError, match="schema"):
        decode(encode(tensors, {}, schema="other"))
    target = tmp_path / "sub" / "x.bin"
    atomic_write(str(target), data)
    assert target.read_bytes() == data and os.listdir(target.parent) == ["x.bin"]


def test_train_then_eval_reproduces_metrics(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert main(["--config", tiny_config, "--mode", "train", "--out", str(out)]) == 0
    for name in ("metrics.csv", "timings.csv", "bins.csv", "history.jsonl", "checkpoint.bin", "config.ini",
                 "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["mode"] == "train" and "torch" in manifest["versions"]
    assert set(manifest["artifacts"]) >= {"metrics.csv", "checkpoint.bin"}
    trained = read_csv(out / "metrics.csv")

    assert main(["--config", tiny_config, "--mode", "eval", "--out", str(out)]) == 0
    evaluated = read_csv(out / "eval_metrics.csv")
    assert len(evaluated) == len(trained) == 2
    for a, b in zip(trained, evaluated):
        assert a["split"] == b["split"]
        for key in ("acc", "ece", "nll", "brier"):
            assert abs(float(a[key]) - float(b[key])) < 1e-9

    again = tmp_path / "again"
    assert main(["--config", tiny_config, "--mode", "train", "--out", str(again)]) == 0
    assert (again / "metrics.csv").read_text() == (out / "metrics.csv").read_text()


def test_map_recovery_table(tmp_path, tiny_config):
    out = tmp_path / "mr"
    assert main(["--config", tiny_config, "--mode", "map-recovery", "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "method,acc,ece,nll"
    assert [r["method"] for r in read_csv(out / "metrics.csv")] == ["map_lora", "degenerate",
                                                                    "bayes_lora(L=1,r=3,S=4)"]
    assert (out / "grid.csv").exists()


def test_sweep_and_hpo_modes(tmp_path, tiny_config):
    out = tmp_path / "sw"
    with open(tiny_config, "a") as fh:
        fh.write("\n[run]\nsweep_samples = 1, 2, 3\nsweep_repeats = 1\n"
                 "\n[hpo]\nrounds = 1\nn_init = 2\ncandidates = 8\nt_samples = 4\nepochs = 1\n")
    assert main(["--config", tiny_config, "--mode", "sweep-samples", "--out", str(out)]) == 0
    assert [r["s"] for r in read_csv(out / "metrics.csv")] == ["1", "2", "3"]
    assert len(read_csv(out / "sweep_fit.csv")) == 1
    out = tmp_path / "hpo"
    assert main(["--config", tiny_config, "--mode", "hpo", "--out", str(out)]) == 0
    assert len(read_csv(out / "archive.csv")) == 3
    assert (out / "pareto.csv").read_text().startswith("candidate,acc,nll,ece,lr,wd")


def test_exit_codes(tmp_path, tiny_config, capsys):
    out = tmp_path / "bad"
    assert main(["--config", tiny_config, "--out", str(out)]) == 2
    record = json.loads((out / "error.json").read_text())
    assert record["kind"] == "config" and any("mode" in v for v in record["violations"])
    assert json.loads(capsys.readouterr().err.strip())["exit_code"] == 2
    assert main(["--config", str(tmp_path / "missing.ini"), "--mode", "train"]) == 2
    out = tmp_path / "noeval"
    assert main(["--config", tiny_config, "--mode", "eval", "--out", str(out)]) == 1
    assert json.loads((out / "error.json").read_text())["kind"] == "runtime"
