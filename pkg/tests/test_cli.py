"""Command-line entry points and their exit codes."""

import json

import pytest

from storymem.cli import main
from storymem.data import SyntheticTaskConfig
from storymem.harness import ExperimentConfig
from storymem.model import MemNetConfig
from storymem.training import TrainConfig


def cli_config():
    return ExperimentConfig(
        name="cli-needle",
        task=SyntheticTaskConfig(task="needle", vocab_size=80, feature_dim=16,
                                 train_count=30, val_count=10, test_count=10),
        model=MemNetConfig(proj_dim=8, cbp_dim=16, word_dim=16,
                           write_layers=((3, 2, 2),), read_layers=((2, 1, 2),)),
        train=TrainConfig(learning_rate=0.01, adagrad_initial_accumulator=1e-6,
                          batch_size=16, max_epochs=2, early_stop_patience=2),
        ensemble_mode="single",
        seed=0,
    )


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    cfg_path = root / "exp.json"
    cfg_path.write_text(json.dumps(cli_config().to_dict()) + "\n",
                        encoding="utf-8")
    out = root / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out


def test_train_writes_report_and_checkpoint(trained, capsys):
    cfg_path, out = trained
    assert (out / "report.json").exists()
    assert (out / "model.ckpt").exists()
    # run again through main to check the report lands on stdout
    assert main(["train", "--config", str(cfg_path)]) == 0
    text = capsys.readouterr().out
    assert "experiment: cli-needle" in text
    assert "accuracy:" in text


def test_eval_scores_saved_checkpoint(trained, tmp_path, capsys):
    cfg_path, out = trained
    ckpt = str(out / "model.ckpt")
    scores_path = tmp_path / "scores.json"
    rc = main(["eval", "--config", str(cfg_path), "--checkpoint", ckpt,
               "--split", "val,test", "--out", str(scores_path)])
    assert rc == 0
    scores = json.loads(capsys.readouterr().out)
    assert set(scores) == {"val", "test"}
    assert {"loss", "accuracy"} <= set(scores["val"])
    assert json.loads(scores_path.read_text(encoding="utf-8")) == scores
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", ckpt,
                 "--split", "dev"]) == 1
    assert "unknown split" in capsys.readouterr().err


def test_export_attention_command(trained, tmp_path, capsys):
    cfg_path, out = trained
    att_path = tmp_path / "att.json"
    rc = main(["export-attention", "--config", str(cfg_path),
               "--checkpoint", str(out / "model.ckpt"),
               "--split", "val", "--limit", "3", "--out", str(att_path)])
    assert rc == 0
    assert "wrote attention for 3 items" in capsys.readouterr().out
    rows = json.loads(att_path.read_text(encoding="utf-8"))
    assert len(rows) == 3 and "attention" in rows[0]


def test_sweep_command_prints_table(tmp_path, capsys):
    cfg = cli_config()
    cfg.task.train_count, cfg.task.val_count, cfg.task.test_count = 20, 5, 5
    cfg.train.max_epochs = 1
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()) + "\n", encoding="utf-8")
    sweep_path = tmp_path / "sweep.json"
    rc = main(["sweep", "--config", str(cfg_path), "--variants", "full,no_rw",
               "--seeds", "0", "--out", str(sweep_path)])
    assert rc == 0
    table = capsys.readouterr().out
    assert "variant" in table and "no_rw" in table
    assert len(json.loads(sweep_path.read_text(encoding="utf-8"))["cells"]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds-per-case", "1"]) == 0
    assert "total:" in capsys.readouterr().out


def test_gen_data_writes_file_dataset(tmp_path, capsys):
    out = tmp_path / "data"
    rc = main(["gen-data", "--out", str(out), "--task", "needle",
               "--train", "4", "--val", "2", "--test", "2",
               "--vocab-size", "80", "--feature-dim", "8",
               "--n-min", "8", "--n-max", "10"])
    assert rc == 0
    assert "wrote needle data" in capsys.readouterr().out
    assert (out / "vocab.txt").exists()
    assert len(list((out / "stories").glob("*.story"))) == 8
    for name in ("train.qa", "val.qa", "test.qa"):
        assert (out / name).exists()
    exp = ExperimentConfig.from_file(out / "experiment.json")
    assert exp.source == "files"
    exp.validate()


def test_bad_inputs_map_to_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"optimizer": "sgd"}), encoding="utf-8")
    assert main(["train", "--config", str(cfg_path)]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert "error:" in capsys.readouterr().err
