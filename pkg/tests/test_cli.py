import json

import pytest

from mapctr.cli import ConfigError, main, resolve_config


@pytest.fixture
def workdir(tmp_path):
    spec = {"planted": {"num_fields": 4, "cardinality": 5, "rows": 1500, "num_rules": 2,
                        "clusters": 2, "boost": 2.0, "seed": 1}}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    cfg = {"model": {"d": 4, "width": 8, "depth": 1},
           "train": {"epochs": 2, "batch_size": 128},
           "pretrain": {"epochs": 1, "batch_size": 128, "k": 3},
           "finetune": {"epochs": 1, "batch_size": 128}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return tmp_path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _synth(capsys, d):
    code, out, _ = _run(capsys, "synth", "--spec", d / "spec.json", "--out", d / "data.bin")
    assert code == 0
    return json.loads(out)


def test_full_pipeline(workdir, capsys):
    d = workdir
    rep = _synth(capsys, d)
    assert rep["F"] == 4 and rep["M"] == 24 and rep["rows"] == 1500

    code, out, _ = _run(capsys, "train", "--config", d / "cfg.json", "--data", d / "data.bin",
                        "--out", d / "scratch.ckpt")
    assert code == 0
    rep = json.loads(out)
    assert rep["stage"] == "scratch" and len(rep["history"]) == 2
    assert rep["config"]["model"]["width"] == 8 and rep["config"]["train"]["lr"] == 1e-3

    for task in ("rfd", "mfp", "joint"):
        code, out, _ = _run(capsys, "pretrain", "--config", d / "cfg.json", "--data", d / "data.bin",
                            "--task", task, "--out", d / f"{task}.ckpt")
        assert code == 0
        assert json.loads(out)["config"]["pretrain"]["task"] == task

    code, out, _ = _run(capsys, "finetune", "--config", d / "cfg.json", "--data", d / "data.bin",
                        "--from", d / "rfd.ckpt", "--out", d / "ft.ckpt")
    assert code == 0
    assert json.loads(out)["stage"] == "finetuned"

    code, out, _ = _run(capsys, "eval", "--ckpt", d / "ft.ckpt", "--data", d / "data.bin")
    assert code == 0
    rep = json.loads(out)
    assert rep["split"] == "test" and 0.0 <= rep["auc"] <= 1.0 and rep["logloss"] > 0


def test_reports_are_byte_identical(workdir, capsys):
    _synth(capsys, workdir)
    argv = ["train", "--config", workdir / "cfg.json", "--data", workdir / "data.bin",
            "--out", workdir / "a.ckpt"]
    first = _run(capsys, *argv)[1]
    blob = (workdir / "a.ckpt").read_bytes()
    assert _run(capsys, *argv)[1] == first
    assert (workdir / "a.ckpt").read_bytes() == blob


def test_finetune_without_from_is_usage_error(workdir, capsys):
    code, _, err = _run(capsys, "finetune", "--data", workdir / "x.bin", "--out", workdir / "o")
    assert code == 2
    assert err.startswith("error usage:") and "--from" in err


def test_unknown_config_key_is_config_error(workdir, capsys):
    _synth(capsys, workdir)
    (workdir / "bad.json").write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    code, _, err = _run(capsys, "train", "--config", workdir / "bad.json", "--data",
                        workdir / "data.bin", "--out", workdir / "o")
    assert code == 2
    assert err == "error config: unknown config key train.learning_rate\n"
    with pytest.raises(ConfigError):
        resolve_config({"optimizer": {}})


def test_finetune_backbone_mismatch_exits_2(workdir, capsys):
    _synth(capsys, workdir)
    _run(capsys, "pretrain", "--config", workdir / "cfg.json", "--data", workdir / "data.bin",
         "--out", workdir / "p.ckpt")
    (workdir / "wide.json").write_text(json.dumps({"model": {"d": 4, "width": 16, "depth": 1}}))
    code, _, err = _run(capsys, "finetune", "--config", workdir / "wide.json", "--data",
                        workdir / "data.bin", "--from", workdir / "p.ckpt", "--out", workdir / "o")
    assert code == 2 and "mlp_width" in err


def test_missing_files_are_runtime_errors(workdir, capsys):
    code, _, err = _run(capsys, "eval", "--ckpt", workdir / "none.ckpt", "--data", workdir / "none.bin")
    assert code == 1 and err.startswith("error data:")


def test_eval_with_generator_scores(tmp_path, capsys):
    pairs = [[i, j] for i in range(1, 5) for j in range(1, 5) if i == j]
    spec = {"num_fields": 2, "cardinality": 4, "rows": 4000, "base_logit": -10.0,
            "rules": [{"fields": [0, 1], "pairs": pairs, "boost": 20.0}]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert _run(capsys, "synth", "--spec", tmp_path / "s.json", "--out", tmp_path / "d.bin")[0] == 0
    code, out, _ = _run(capsys, "eval", "--spec", tmp_path / "s.json", "--data", tmp_path / "d.bin")
    assert code == 0 and json.loads(out)["auc"] >= 0.99


def test_preprocess_csv(tmp_path, capsys):
    lines = ["click,site,hour"] + [f"{i % 2},s{i % 3},14102{100 + i % 24}" for i in range(200)]
    (tmp_path / "in.csv").write_text("\n".join(lines) + "\n")
    schema = {"header": True, "columns": {"click": "label", "site": "categorical",
                                          "hour": "timestamp-expand"}}
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    code, out, _ = _run(capsys, "preprocess", "--input", tmp_path / "in.csv", "--schema",
                        tmp_path / "schema.json", "--out", tmp_path / "d.bin")
    assert code == 0
    rep = json.loads(out)
    assert rep["rows"] == 200 and rep["F"] == 5
    assert rep["train"] + rep["val"] + rep["test"] == 200


def test_bench_command(workdir, capsys):
    _synth(capsys, workdir)
    code, out, _ = _run(capsys, "bench", "--config", workdir / "cfg.json", "--data", workdir / "data.bin",
                        "--task", "rfd", "--epochs", "1", "--warmup", "0")
    assert code == 0
    rep = json.loads(out)
    assert rep["task"] == "rfd" and rep["params_above_embedding"] > 0 and len(rep["epoch_times"]) == 1
