"""Command-line behaviour: parsing, exit codes, artifacts, determinism."""

import json
import os

import pytest

from tema import dataset as ds
from tema.cli import main

SWEEP_TINY = [
    "--dim", "32", "--local-count", "4",
    "--batch", "8", "--lr", "1e-3", "--seed", "3",
]
TINY = SWEEP_TINY + ["--channels", "2", "--epochs", "2"]


@pytest.fixture()
def data_path(tmp_path):
    path = tmp_path / "data.jsonl"
    ds.save_jsonl(path, ds.generate_synthetic(8, seed=3))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ------------------------------------------------------------------ parsing


def test_unknown_flag_is_usage_error(data_path):
    with pytest.raises(SystemExit) as err:
        main(["train", "--data", data_path, "--frobnicate"])
    assert err.value.code == 2


def test_missing_required_data_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["train"])
    assert err.value.code == 2


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["explode"])
    assert err.value.code == 2


def test_missing_epochs_is_runtime_error(capsys, data_path):
    code, _, err = run(capsys, "train", "--data", data_path)
    assert code == 1
    assert "epochs" in err


# ----------------------------------------------------------------- commands


def test_train_writes_checkpoint_and_artifacts(capsys, tmp_path, data_path):
    out = tmp_path / "run"
    code, stdout, _ = run(
        capsys, "train", "--data", data_path, *TINY, "--out", str(out)
    )
    assert code == 0
    assert stdout.startswith("# config:")
    assert (out / "checkpoint.tec1").exists()
    assert (out / "losses.tsv").exists()
    assert (out / "losses.png").exists()


def test_eval_requires_checkpoint(capsys, data_path):
    code, _, err = run(capsys, "eval", "--data", data_path)
    assert code == 1
    assert "checkpoint required" in err


def test_train_then_eval_and_retrieve(capsys, tmp_path, data_path):
    out = tmp_path / "run"
    assert run(capsys, "train", "--data", data_path, *TINY, "--out", str(out))[0] == 0
    ckpt = str(out / "checkpoint.tec1")

    code, stdout, _ = run(
        capsys, "eval", "--data", data_path, "--checkpoint", ckpt,
        "--out", str(tmp_path / "evalout"),
    )
    assert code == 0
    assert "R@1" in stdout
    assert (tmp_path / "evalout" / "metrics.tsv").exists()
    assert (tmp_path / "evalout" / "metrics.json").exists()
    assert (tmp_path / "evalout" / "metrics.png").exists()
    payload = json.loads((tmp_path / "evalout" / "metrics.json").read_text())
    assert all({"split", "category", "metric", "value"} <= set(row) for row in payload)

    records = ds.load_jsonl(data_path)
    code, stdout, _ = run(
        capsys, "retrieve", "--data", data_path, "--checkpoint", ckpt,
        "--id", records[0].id, "--topk", "5",
    )
    assert code == 0
    assert "rank" in stdout.splitlines()[1]


def test_eval_stdout_is_byte_identical(capsys, tmp_path, data_path):
    out = tmp_path / "run"
    run(capsys, "train", "--data", data_path, *TINY, "--out", str(out))
    ckpt = str(out / "checkpoint.tec1")
    first = run(capsys, "eval", "--data", data_path, "--checkpoint", ckpt)
    second = run(capsys, "eval", "--data", data_path, "--checkpoint", ckpt)
    assert first == second


def test_stats_prints_length_columns(capsys, data_path):
    code, stdout, _ = run(capsys, "stats", "--data", data_path)
    assert code == 0
    header = stdout.splitlines()[1].split("\t")
    assert header == ["split", "#Minimal", "#Maximal", "#Average"]


def test_gen_synth_roundtrips(capsys, tmp_path):
    path = tmp_path / "synth.jsonl"
    code, stdout, _ = run(
        capsys, "gen-synth", "--file", str(path), "--n", "5", "--seed", "9"
    )
    assert code == 0
    records = ds.load_jsonl(path)
    assert len(records) == 5
    assert records == ds.generate_synthetic(5, seed=9)


def test_gen_synth_respects_env_seed(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("TEMA_SEED", "17")
    path = tmp_path / "synth.jsonl"
    assert run(capsys, "gen-synth", "--file", str(path), "--n", "4")[0] == 0
    assert ds.load_jsonl(path) == ds.generate_synthetic(4, seed=17)


def test_sweep_emits_one_row_per_value(capsys, tmp_path, data_path):
    out = tmp_path / "sweepout"
    code, stdout, _ = run(
        capsys, "sweep", "--data", data_path, *SWEEP_TINY,
        "--epochs", "1", "--kappa", "0,0.3,0.6,0.9", "--out", str(out),
    )
    assert code == 0
    lines = [l for l in stdout.splitlines() if not l.startswith("#")]
    assert len(lines) == 1 + 4  # header plus one row per grid value
    assert (out / "sweep.tsv").exists()
    assert (out / "sweep.png").exists()


def test_sweep_over_channels(capsys, data_path):
    code, stdout, _ = run(
        capsys, "sweep", "--data", data_path, *SWEEP_TINY, "--epochs", "1",
        "--channels", "1,2",
    )
    assert code == 0
    lines = [l for l in stdout.splitlines() if not l.startswith("#")]
    assert len(lines) == 1 + 2


def test_sweep_requires_exactly_one_grid(capsys, data_path):
    code, _, err = run(capsys, "sweep", "--data", data_path, "--epochs", "1")
    assert code == 1
    assert "exactly one" in err


def test_count_params_matches_library(capsys):
    code, stdout, _ = run(
        capsys, "count-params", "--dim", "32", "--local-count", "4", "--channels", "2"
    )
    assert code == 0
    from tema.training import TrainConfig, build_model, count_macs, count_params

    cfg = TrainConfig(epochs=1, dim=32, local_count=4, channels=2)
    row = stdout.splitlines()[-1].split("\t")
    assert int(row[0]) == count_params(build_model(cfg))
    assert int(row[1]) == count_macs(cfg)


def test_gradcheck_small_model_passes(capsys):
    code, stdout, _ = run(
        capsys, "gradcheck", "--dim", "16", "--local-count", "2", "--channels", "2",
    )
    assert code == 0
    assert "PASS" in stdout
    assert "overall max relative error" in stdout


def test_config_file_with_flag_override(capsys, tmp_path, data_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({
        "epochs": 1, "batch_size": 8, "lr": 1e-3, "seed": 3,
        "dim": 32, "local_count": 4, "channels": 2,
        "weights": {"kappa": 0.6, "mu": 0.2, "tau": 0.07},
    }))
    code, stdout, _ = run(
        capsys, "train", "--data", data_path, "--config", str(config), "--channels", "3"
    )
    assert code == 0
    echoed = json.loads(stdout.splitlines()[0].removeprefix("# config: "))
    assert echoed["channels"] == 3  # flag wins over file
    assert echoed["dim"] == 32  # file wins over default


def test_commands_do_not_mutate_data_file(capsys, data_path):
    before = open(data_path, "rb").read()
    run(capsys, "stats", "--data", data_path)
    run(capsys, "train", "--data", data_path, *TINY)
    assert open(data_path, "rb").read() == before


def test_ablate_flag_reaches_training(capsys, data_path):
    code, stdout, _ = run(
        capsys, "train", "--data", data_path, *TINY, "--ablate", "pa,ortho=off"
    )
    assert code == 0
    echoed = json.loads(stdout.splitlines()[0].removeprefix("# config: "))
    assert echoed["ablation"]["disable_pa"] is True
    assert echoed["ablation"]["ortho_mode"] == "off"
