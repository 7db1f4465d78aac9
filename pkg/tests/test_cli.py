import json
import os
from pathlib import Path

import pytest

from selectod import cli
from selectod import corpus as C

SMALL_SPEC = {"domains": ["restaurant", "hotel"], "dialogues_per_combination": 4, "seed": 5}
TINY_MODEL = {"d_model": 16, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1, "d_ff": 32}


def write(path, obj):
    Path(path).write_text(json.dumps(obj))
    return str(path)


def files_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.name != cli.MANIFEST_NAME}


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write(root / "spec.json", SMALL_SPEC)
    assert cli.main(["generate-corpus", "--config", spec, "--out", str(root / "corpus")]) == 0
    return root / "corpus"


def test_generate_corpus_outputs(corpus_dir):
    names = sorted(os.listdir(corpus_dir))
    assert cli.MANIFEST_NAME in names and len(names) == 6
    manifest = json.loads((corpus_dir / cli.MANIFEST_NAME).read_text())
    for key in ("command", "config", "seed", "code_version", "corpus_hash", "output_dir", "started_at", "finished_at"):
        assert key in manifest
    assert manifest["corpus_hash"] == C.corpus_hash(corpus_dir)


def test_generate_corpus_is_byte_identical(corpus_dir, tmp_path):
    spec = write(tmp_path / "spec.json", SMALL_SPEC)
    assert cli.main(["generate-corpus", "--config", spec, "--out", str(tmp_path / "again")]) == 0
    assert files_bytes(tmp_path / "again") == files_bytes(corpus_dir)
    assert cli.main(["generate-corpus", "--config", spec, "--seed", "6", "--out", str(tmp_path / "other")]) == 0
    assert files_bytes(tmp_path / "other") != files_bytes(corpus_dir)


def test_malformed_spec_names_field(tmp_path, capsys):
    spec = write(tmp_path / "bad.json", {**SMALL_SPEC, "dialogues_per_combination": -2})
    assert cli.main(["generate-corpus", "--config", spec, "--out", str(tmp_path / "c")]) == 1
    assert "dialogues_per_combination" in capsys.readouterr().err
    spec = write(tmp_path / "bad2.json", {**SMALL_SPEC, "domain": ["hotel"]})
    assert cli.main(["generate-corpus", "--config", spec, "--out", str(tmp_path / "c")]) == 1
    assert "domain" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path):
    assert cli.main(["generate-corpus", "--config", str(tmp_path / "missing.json")]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["generate-corpus", "--config", str(tmp_path / "broken.json")]) == 1
    with pytest.raises(SystemExit) as err:
        cli.main(["train"])
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        cli.main(["frobnicate"])
    assert err.value.code == 1


def test_oracle_eval_scores_100(corpus_dir, tmp_path, capsys):
    out = tmp_path / "oracle"
    assert cli.main(["eval", "--oracle-model", "--corpus", str(corpus_dir), "--split", "test", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["inform"] == summary["success"] == 100.0
    assert summary["bleu"] == pytest.approx(100.0)
    assert (out / "metrics.json").exists() and (out / cli.MANIFEST_NAME).exists()


def test_eval_missing_checkpoint_fails(corpus_dir, tmp_path):
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "nope"), "--corpus", str(corpus_dir)])
    assert code != 0


def train_config(tmp_path, corpus_dir, **train):
    return write(
        tmp_path / "train.json",
        {"corpus": str(corpus_dir), "model": TINY_MODEL, "train": {"epochs": 1, "batch_size": 4, "max_steps": 4, "max_decode_len": 8, **train}},
    )


def test_train_then_eval_and_report(corpus_dir, tmp_path):
    cfg = train_config(tmp_path, corpus_dir)
    run = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--variant", "differentiable", "--out", str(run)]) == 0
    log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    steps = [r for r in log if "event" not in r]
    assert steps and all(r["tau"] is not None for r in steps)
    assert json.loads((run / "config.json").read_text())["train"]["variant"] == "differentiable"
    assert (run / "best" / "manifest.json").exists() and (run / cli.MANIFEST_NAME).exists()

    ev = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(run / "best"), "--corpus", str(corpus_dir), "--max-len", "8", "--out", str(ev)]) == 0
    ev2 = tmp_path / "ev2"
    args = ["eval", "--checkpoint", str(run / "best"), "--corpus", str(corpus_dir), "--max-len", "8", "--drop-selection-heads", "--out", str(ev2)]
    assert cli.main(args) == 0
    a = json.loads((ev / "metrics.json").read_text())
    b = json.loads((ev2 / "metrics.json").read_text())
    assert a == b

    rep = tmp_path / "rep"
    assert cli.main(["report", str(ev), str(ev2), "--out", str(rep)]) == 0
    lines = (rep / "table.md").read_text().strip().splitlines()
    assert len(lines) == 4
    assert (rep / "metrics.png").exists() and (rep / "loss_curves.png").exists()

    cfg_none = train_config(tmp_path, corpus_dir)
    run_none = tmp_path / "run_none"
    assert cli.main(["train", "--config", cfg_none, "--out", str(run_none)]) == 0
    first = [json.loads(l) for l in (run_none / "train_log.jsonl").read_text().splitlines()][0]
    assert first["variant"] == "none" and first["tau"] is None

    assert cli.main(["train", "--config", cfg, "--resume", str(tmp_path / "gone"), "--out", str(tmp_path / "r2")]) == 1


def test_train_nan_injection_exits_two(corpus_dir, tmp_path):
    cfg = train_config(tmp_path, corpus_dir, inject_nan_step=2)
    run = tmp_path / "nan"
    assert cli.main(["train", "--config", cfg, "--variant", "after-encoder", "--out", str(run)]) == 2
    record = json.loads((run / "abort.json").read_text())
    assert record["step"] == 2 and record["component"] == "resp_nll"
    assert {"tau", "lr", "last_good_checkpoint"} <= set(record)


def test_train_config_errors(corpus_dir, tmp_path, capsys):
    bad = write(tmp_path / "t.json", {"corpus": str(corpus_dir), "train": {"learning_rate": 1}})
    assert cli.main(["train", "--config", bad]) == 1
    assert "learning_rate" in capsys.readouterr().err
    bad = write(tmp_path / "t2.json", {"model": {}})
    assert cli.main(["train", "--config", bad]) == 1


def test_gradcheck_refuses_float32(tmp_path, capsys):
    assert cli.main(["gradcheck", "--dtype", "float32", "--out", str(tmp_path)]) == 1
    assert "64-bit" in capsys.readouterr().err


def test_gradcheck_argmax_negative_control(tmp_path, capsys):
    assert cli.main(["gradcheck", "--argmax", "--out", str(tmp_path)]) == 0
    assert "EXPECTED-FAIL" in capsys.readouterr().out
    data = json.loads((tmp_path / "gradcheck.json").read_text())
    assert data["negative_control"]["selection_grad_norms"]["response_decoder"] == 0.0


def test_gradcheck_variant_passes(tmp_path):
    cfg = write(tmp_path / "g.json", {"n_samples": 40})
    assert cli.main(["gradcheck", "--config", cfg, "--variant", "after-encoder", "--out", str(tmp_path / "o")]) == 0
    data = json.loads((tmp_path / "o" / "gradcheck.json").read_text())
    assert data["checks"]["after_encoder"]["passed"]


def test_report_reproduces_reference_scores(tmp_path):
    rows = [
        {"model": "SimpleTOD", "variant": "-", "inform": 92.30, "success": 84.00, "bleu": 19.41},
        {"model": "RSTOD", "variant": "none", "inform": 89.20, "success": 80.50, "bleu": 19.14},
        {"model": "RSTOD", "variant": "after_encoder", "inform": 92.10, "success": 83.30, "bleu": 19.69},
        {"model": "RSTOD", "variant": "differentiable", "inform": 93.50, "success": 84.70, "bleu": 19.24},
    ]
    src = write(tmp_path / "table2.json", rows)
    assert cli.main(["report", src, "--no-plots", "--out", str(tmp_path / "r")]) == 0
    csv_rows = (tmp_path / "r" / "table.csv").read_text().strip().splitlines()[1:]
    assert [r.split(",")[-1] for r in csv_rows] == ["107.56", "103.99", "107.39", "108.34"]


def test_report_empty_list_fails(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 1
