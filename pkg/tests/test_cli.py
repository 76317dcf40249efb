import json
import math

import pytest

from redlab import tensor as T
from redlab.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main

TINY = {
    "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "vocab_size": 4, "max_seq_len": 8, "n_classes": 2},
    "peft": {"method": "red"},
    "train": {"lr": 0.01, "epochs": 2, "batch_size": 16, "seed": 0},
    "task": {"name": "parity", "vocab_size": 4, "seq_len": 8, "n_classes": 2,
             "n_train": 64, "n_valid": 32, "n_test": 32},
}


@pytest.fixture
def config(tmp_path):
    def write(**overrides):
        raw = json.loads(json.dumps(TINY))
        for section, vals in overrides.items():
            raw[section].update(vals)
        path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*.json')))}.json"
        path.write_text(json.dumps(raw))
        return str(path)

    return write


def test_audit_all_writes_tables(tmp_path, capsys):
    assert main(["audit-params", "--all", "--out", str(tmp_path)]) == EXIT_OK
    assert "FLAGGED" in capsys.readouterr().out
    data = json.loads((tmp_path / "table.json").read_text())
    assert data["rows"] and "roberta_base" in (tmp_path / "table.txt").read_text()


def test_audit_single_preset(capsys):
    assert main(["audit-params", "roberta_base"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "roberta_base" in out and "llama2_7b" not in out


def test_audit_unknown_preset():
    assert main(["audit-params", "bert_tiny"]) == EXIT_CONFIG


def test_audit_custom_descriptor(tmp_path, capsys):
    desc = tmp_path / "h.json"
    desc.write_text(json.dumps({"name": "mine", "n_layers": 3, "d_model": 32, "d_ff": 128}))
    assert main(["audit-params", "--descriptor", str(desc), "--rank", "2"]) == EXIT_OK
    assert "192" in capsys.readouterr().out  # 2 * 32 * 3 RED parameters


def test_audit_bad_descriptor(tmp_path):
    desc = tmp_path / "h.json"
    desc.write_text(json.dumps({"name": "bad", "n_layers": -1, "d_model": 32, "d_ff": 128}))
    assert main(["audit-params", "--descriptor", str(desc)]) == EXIT_CONFIG
    desc.write_text("{not json")
    assert main(["audit-params", "--descriptor", str(desc)]) == EXIT_CONFIG


def test_missing_config_exit_code_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["train", "--config", str(missing)]) == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_invalid_config_exit_code(config, capsys):
    path = config(train={"lr": -1.0})
    assert main(["train", "--config", path]) == EXIT_CONFIG
    assert path in capsys.readouterr().err


def test_train_writes_report_and_steps(config, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", config(), "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["trainable_params"] == 2 * 16 * 2
    losses = [float(line.split(",")[2]) for line in (out / "steps.csv").read_text().splitlines()[1:]]
    assert len(losses) == report["n_steps"] == 8 and all(math.isfinite(x) for x in losses)
    assert report["frozen_digest_before"] == report["frozen_digest_after"]
    for name in ("steps.csv", "config.json", "meta.json", "base.npz", "peft_best.npz"):
        assert (out / name).exists(), name


def test_train_rerun_is_byte_identical(config, tmp_path):
    path = config(peft={"method": "lora", "rank": 1, "alpha": 1})
    for d in ("a", "b"):
        assert main(["train", "--config", path, "--out", str(tmp_path / d)]) == EXIT_OK
    assert (tmp_path / "a" / "steps.csv").read_bytes() == (tmp_path / "b" / "steps.csv").read_bytes()
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_seed_flag_overrides_config(config, tmp_path):
    path = config()
    main(["train", "--config", path, "--out", str(tmp_path / "a")])
    main(["train", "--config", path, "--seed", "7", "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "b" / "config.json").read_text())["train"]["seed"] == 7
    assert (tmp_path / "a" / "steps.csv").read_bytes() != (tmp_path / "b" / "steps.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(config, tmp_path, capsys):
    # An absurd learning rate on full fine-tuning overflows float32 logits.
    path = config(peft={"method": "full_ft"}, train={"lr": 1e30, "warmup_ratio": 0.0})
    assert main(["train", "--config", path, "--out", str(tmp_path)]) == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_grad_check_passes(config, tmp_path, capsys):
    assert main(["grad-check", "--config", config(), "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "overall: pass" in out
    data = json.loads((tmp_path / "grad_check.json").read_text())
    names = [n for errs in data.values() for n in errs]
    assert names and all(n.startswith("red.") for n in names)


def test_grad_check_every_method(config, capsys):
    assert main(["grad-check", "--config", config(), "--all-methods"]) == EXIT_OK
    out = capsys.readouterr().out
    for label in ("lora", "adapter", "bitfit"):
        assert label in out
    assert "embed." not in out and "head." not in out


def test_grad_check_flags_broken_backward(config, monkeypatch):
    real = T.Mul.backward
    monkeypatch.setattr(T.Mul, "backward", lambda self, g: tuple(1.5 * x for x in real(self, g)))
    assert main(["grad-check", "--config", config()]) == EXIT_CHECK_FAILED


def test_grad_check_refuses_train_precision(config):
    assert main(["grad-check", "--config", config(), "--precision", "train"]) == EXIT_CONFIG


@pytest.mark.parametrize("suite, counts", [("components", [64, 32, 32]), ("positions", [64, 64, 128])])
def test_ablate_counts(config, tmp_path, suite, counts):
    assert main(["ablate", suite, "--config", config(train={"epochs": 1}), "--out", str(tmp_path)]) == EXIT_OK
    rows = json.loads((tmp_path / "table.json").read_text())["rows"]
    assert [r["trainable"] for r in rows] == counts
    assert all(r["trainable"] == r["formula"] for r in rows)
    if suite == "components":
        assert "bias_only - scaling_only" in (tmp_path / "table.txt").read_text()


def test_ablate_rank1_ordering(config, tmp_path):
    assert main(["ablate", "rank1", "--config", config(train={"epochs": 1}), "--out", str(tmp_path)]) == EXIT_OK
    rows = {r["method"].split("/")[0].split("(")[0]: r["trainable"]
            for r in json.loads((tmp_path / "table.json").read_text())["rows"]}
    assert rows["red"] < rows["lora"] < rows["adapter"]


def test_ablate_unknown_suite(config):
    assert main(["ablate", "widths", "--config", config()]) == EXIT_CONFIG
