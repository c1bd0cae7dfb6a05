"""Experiment configs, reports, sweeps, receptive fields, gradient suite."""

import json

import numpy as np
import pytest

from storymem import fusion
from storymem import harness as H
from storymem import tensor as T
from storymem.data import (QAItem, SyntheticTaskConfig, generate_synthetic,
                           save_qa, save_story_features, save_vocab)
from storymem.errors import ConfigError
from storymem.fusion import EmbeddingTable
from storymem.harness import (ExperimentConfig, GradCaseResult,
                              GradSuiteResult, Report, ablation_sweep,
                              export_attention, load_experiment_data,
                              question_type_breakdown,
                              receptive_field_intervals, run_experiment,
                              run_gradient_suite, spans_overlap, sweep_table)
from storymem.model import MemNet, MemNetConfig
from storymem.training import TrainConfig


def tiny_experiment(**kw):
    """Needle experiment small enough to train inside a test."""
    base = dict(
        name="tiny-needle",
        task=SyntheticTaskConfig(task="needle", vocab_size=80, feature_dim=16,
                                 train_count=60, val_count=20, test_count=20),
        model=MemNetConfig(proj_dim=16, cbp_dim=64, word_dim=64,
                           write_layers=((3, 2, 2),), read_layers=((2, 1, 2),)),
        train=TrainConfig(learning_rate=0.01, adagrad_initial_accumulator=1e-6,
                          batch_size=16, max_epochs=3, early_stop_patience=3),
        modality="multimodal",
        ensemble_mode="single",
        seed=0,
    )
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# experiment config


def test_experiment_config_validates():
    tiny_experiment().validate()
    for bad in (dict(source="csv"), dict(modality="audio"),
                dict(table_mode="frozen"), dict(ensemble_mode="vote"),
                dict(ensemble_size=0), dict(precision=16)):
        with pytest.raises(ConfigError):
            tiny_experiment(**bad).validate()


def test_files_source_requires_all_paths():
    cfg = tiny_experiment(source="files", paths={"vocab": "v", "stories": "s"})
    with pytest.raises(ConfigError, match="paths missing"):
        cfg.validate()


def test_resolved_fills_sub_seeds_without_mutating():
    cfg = tiny_experiment(seed=5)
    assert cfg.task.seed is None and cfg.model.seed is None
    assert cfg.train.rng_seed is None
    res = cfg.resolved()
    assert res.task.seed is not None
    assert res.model.seed is not None
    assert res.train.rng_seed is not None
    assert cfg.task.seed is None          # original untouched


def test_config_round_trips_through_json():
    cfg = tiny_experiment(seed=3, table_mode="trainable")
    d = cfg.to_dict()
    back = ExperimentConfig.from_dict(json.loads(json.dumps(d)))
    assert back.to_dict() == d


def test_from_dict_rejects_unknown_keys():
    d = tiny_experiment().to_dict()
    with pytest.raises(ConfigError, match="unknown experiment config keys"):
        ExperimentConfig.from_dict({**d, "optimizer": "sgd"})
    bad_task = dict(d)
    bad_task["task"] = {**d["task"], "n_med": 3}
    with pytest.raises(ConfigError, match="unknown SyntheticTaskConfig keys"):
        ExperimentConfig.from_dict(bad_task)


def test_from_file_reads_json_and_yaml(tmp_path):
    import yaml

    cfg = tiny_experiment(seed=9)
    jpath = tmp_path / "exp.json"
    jpath.write_text(json.dumps(cfg.to_dict()), encoding="utf-8")
    ypath = tmp_path / "exp.yaml"
    ypath.write_text(yaml.safe_dump(cfg.to_dict()), encoding="utf-8")
    assert ExperimentConfig.from_file(jpath).to_dict() == cfg.to_dict()
    assert ExperimentConfig.from_file(ypath).to_dict() == cfg.to_dict()
    lpath = tmp_path / "list.json"
    lpath.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="must be a mapping"):
        ExperimentConfig.from_file(lpath)


# ---------------------------------------------------------------------------
# file-backed data loading


def write_tiny_files(tmp_path):
    task = SyntheticTaskConfig(task="needle", vocab_size=80, feature_dim=8,
                               train_count=4, val_count=2, test_count=2, seed=0)
    splits = generate_synthetic(task)
    story_dir = tmp_path / "stories"
    story_dir.mkdir()
    save_vocab(splits[0].vocab, tmp_path / "vocab.txt")
    for ds, name in zip(splits, ("train", "val", "test")):
        for story in ds.stories.values():
            save_story_features(story, story_dir / f"{story.story_id}.story",
                                ds.vocab)
        save_qa(ds.items, tmp_path / f"{name}.qa")
    paths = {
        "vocab": str(tmp_path / "vocab.txt"),
        "stories": str(story_dir),
        "train_qa": str(tmp_path / "train.qa"),
        "val_qa": str(tmp_path / "val.qa"),
        "test_qa": str(tmp_path / "test.qa"),
    }
    return splits, paths


def test_load_experiment_data_from_files(tmp_path):
    splits, paths = write_tiny_files(tmp_path)
    cfg = tiny_experiment(source="files", paths=paths)
    loaded = load_experiment_data(cfg)
    assert len(loaded) == 3

    def essence(items):
        # the QA wire format keeps everything except the item id, which
        # load_qa rebuilds from the file stem and line number
        return [(i.story_id, i.question, i.answers, i.correct_index, i.gt_span)
                for i in items]

    for orig, got, name in zip(splits, loaded, ("train", "val", "test")):
        assert essence(got.items) == essence(orig.items)
        assert [i.item_id for i in got.items] == \
            [f"{name}-{k:05d}" for k in range(1, len(got.items) + 1)]
        assert set(got.stories) >= {i.story_id for i in got.items}
    assert loaded[0].vocab.tokens == splits[0].vocab.tokens


def test_load_experiment_data_rejects_bad_files(tmp_path):
    _splits, paths = write_tiny_files(tmp_path)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ConfigError, match="no .story files"):
        load_experiment_data(tiny_experiment(
            source="files", paths={**paths, "stories": str(empty)}))
    orphan = QAItem("qx", "missing-story", question=("what", "is", "it"),
                    answers=tuple(("a",) for _ in range(5)), correct_index=0)
    save_qa([orphan], tmp_path / "orphan.qa")
    with pytest.raises(ConfigError, match="unknown story"):
        load_experiment_data(tiny_experiment(
            source="files", paths={**paths, "val_qa": str(tmp_path / "orphan.qa")}))


# ---------------------------------------------------------------------------
# receptive fields


def test_receptive_field_single_layer():
    # filter 8 stride 4 over 16 steps: SAME pads 2 on each side, so slot j
    # sees 4j-2 .. 4j+5 clipped into the story
    got = receptive_field_intervals(16, [(8, 4)])
    assert got == [(0, 5), (2, 9), (6, 13), (10, 15)]


def test_receptive_field_wide_layer_clamps_padding():
    got = receptive_field_intervals(1558, [(40, 30)])
    assert len(got) == 52
    assert got[0] == (0, 33)              # 6 rows of top padding removed
    assert got[51] == (1524, 1557)
    assert all(0 <= lo <= hi <= 1557 for lo, hi in got)
    naive = receptive_field_intervals(1558, [(40, 30)], clamp=False)
    assert naive[0] == (0, 39)            # pretends the padding is story


def test_receptive_field_chains_layers():
    got = receptive_field_intervals(16, [(3, 2), (2, 2)])
    assert got == [(0, 4), (4, 8), (8, 12), (12, 15)]


def test_spans_overlap():
    assert spans_overlap((0, 5), (5, 9))
    assert spans_overlap((3, 3), (0, 10))
    assert spans_overlap((2, 8), (4, 5))
    assert not spans_overlap((0, 4), (5, 9))
    assert not spans_overlap((7, 9), (0, 6))


# ---------------------------------------------------------------------------
# reports


def test_question_type_breakdown_counts():
    records = [
        {"question_type": "where", "is_correct": True},
        {"question_type": "where", "is_correct": False},
        {"question_type": "where", "is_correct": True},
        {"question_type": "when", "is_correct": False},
    ]
    got = question_type_breakdown(records)
    assert got["where"] == {"count": 3, "correct": 2, "accuracy": 2 / 3}
    assert got["when"] == {"count": 1, "correct": 0, "accuracy": 0.0}
    assert "what" not in got


def hand_report(**kw):
    base = dict(
        name="toy",
        config={"model": {"variant": "full", "proj_dim": 4,
                          "write_layers": [[3, 2, 2]],
                          "read_layers": [[2, 1, 2]]}},
        seed=0,
        accuracies={"train": 1.0, "val": 0.5, "test": 0.25},
        breakdown={"what": {"count": 4, "correct": 1, "accuracy": 0.25}},
        items=[],
        training={"mode": "single", "stop_reason": "max_epochs",
                  "best_epoch": 2, "best_val_loss": 1.25},
        n_parameters=17,
        wall_clock_sec=3.5,
        timestamp="2026-01-01T00:00:00+00:00",
    )
    base.update(kw)
    return Report(**base)


def test_report_canonical_form_drops_volatile_fields():
    a = hand_report()
    b = hand_report(wall_clock_sec=99.0, timestamp="2030-12-31T23:59:59+00:00")
    assert a.canonical_json() == b.canonical_json()
    assert a.to_dict() != b.to_dict()
    canon = a.canonical_dict()
    assert "wall_clock_sec" not in canon and "timestamp" not in canon
    assert canon["accuracies"] == a.accuracies


def test_report_text_and_save(tmp_path):
    rep = hand_report()
    text = rep.to_text()
    assert "experiment: toy" in text
    assert "variant=full" in text
    assert "val=0.5000" in text
    assert "what: 0.2500 (1/4)" in text
    assert "stopped by max_epochs" in text
    rep.save(tmp_path)
    assert (tmp_path / "report.txt").read_text(encoding="utf-8") == text
    loaded = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert loaded == json.loads(json.dumps(rep.to_dict()))


# ---------------------------------------------------------------------------
# running experiments

_RECORD_KEYS = {
    "item_id", "split", "question_type", "predicted", "correct_index",
    "is_correct", "confidence", "attention_slot", "attention_channel",
    "read_slots", "story_steps", "attended_steps", "gt_span", "span_overlap",
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    report = run_experiment(tiny_experiment(), out_dir=out)
    return report, out


def test_run_experiment_report_shape(tiny_run):
    report, _out = tiny_run
    assert set(report.accuracies) == {"train", "val", "test"}
    assert all(0.0 <= v <= 1.0 for v in report.accuracies.values())
    assert len(report.items) == 40        # val 20 + test 20
    by_split = {"val": 0, "test": 0}
    for rec in report.items:
        assert set(rec) == _RECORD_KEYS
        by_split[rec["split"]] += 1
        assert 0 <= rec["predicted"] <= 4
        assert 0 <= rec["attention_slot"] < rec["read_slots"]
        lo, hi = rec["attended_steps"]
        assert 0 <= lo <= hi < rec["story_steps"]
        assert isinstance(rec["span_overlap"], bool)   # needle has gt spans
        assert len(rec["confidence"]) == 5
        assert np.isclose(sum(rec["confidence"]), 1.0)
    assert by_split == {"val": 20, "test": 20}
    test_recs = [r for r in report.items if r["split"] == "test"]
    assert report.breakdown == question_type_breakdown(test_recs)
    test_acc = np.mean([r["is_correct"] for r in test_recs])
    assert np.isclose(report.accuracies["test"], test_acc)
    assert report.n_parameters > 0
    assert report.training["mode"] == "single"


def test_run_experiment_writes_artifacts(tiny_run):
    report, out = tiny_run
    for name in ("report.json", "report.txt", "metrics.jsonl", "model.ckpt"):
        assert (out / name).exists(), name
    lines = (out / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == report.training["epochs_run"]
    assert {"epoch", "train_loss", "val_loss"} <= set(json.loads(lines[0]))
    saved = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert saved == json.loads(json.dumps(report.to_dict()))


def test_run_experiment_is_reproducible(tiny_run):
    report, _out = tiny_run
    again = run_experiment(tiny_experiment())
    assert again.canonical_json() == report.canonical_json()


def test_run_experiment_restarts_mode(tmp_path):
    cfg = tiny_experiment(
        ensemble_mode="restarts",
        task=SyntheticTaskConfig(task="needle", vocab_size=80, feature_dim=16,
                                 train_count=30, val_count=10, test_count=10),
        train=TrainConfig(learning_rate=0.01,
                          adagrad_initial_accumulator=1e-6, batch_size=16,
                          max_epochs=2, early_stop_patience=2, restarts=2),
    )
    report = run_experiment(cfg, out_dir=tmp_path)
    assert report.training["mode"] == "restarts"
    assert report.training["chosen_restart"] in (0, 1)
    assert (tmp_path / "metrics_restart0.jsonl").exists()
    assert (tmp_path / "metrics_restart1.jsonl").exists()
    assert (tmp_path / "model.ckpt").exists()


# ---------------------------------------------------------------------------
# sweeps


def sweep_base():
    return tiny_experiment(
        name="sweep-check",
        task=SyntheticTaskConfig(task="needle", vocab_size=80, feature_dim=16,
                                 train_count=30, val_count=10, test_count=10),
        train=TrainConfig(learning_rate=0.01,
                          adagrad_initial_accumulator=1e-6, batch_size=16,
                          max_epochs=2, early_stop_patience=2),
    )


def test_ablation_sweep_collects_cells(tmp_path):
    out = tmp_path / "sweep.json"
    result = ablation_sweep(sweep_base(), ["full", "no_rw"], seeds=[0],
                            out_path=out)
    assert result["name"] == "sweep-check"
    assert [c["variant"] for c in result["cells"]] == ["full", "no_rw"]
    for cell in result["cells"]:
        assert cell["structure"] == "base"
        assert cell["seeds"] == [0]
        assert len(cell["accuracies"]) == 1
        assert cell["errors"] == []
        assert cell["mean"] == cell["accuracies"][0]
        assert cell["sd"] == 0.0
    table = sweep_table(result)
    assert "full" in table and "no_rw" in table and "1 ok" in table
    assert json.loads(out.read_text(encoding="utf-8")) == \
        json.loads(json.dumps(result))


def test_ablation_sweep_records_failures_per_cell():
    result = ablation_sweep(sweep_base(), ["not_a_variant"], seeds=[0])
    cell = result["cells"][0]
    assert cell["accuracies"] == []
    assert cell["mean"] is None
    assert len(cell["errors"]) == 1 and "seed 0" in cell["errors"][0]
    assert "all runs failed" in sweep_table(result)


def test_ablation_sweep_structures_override_model():
    # a structure whose write stride halves the slot count still runs
    result = ablation_sweep(
        sweep_base(), ["full"], seeds=[0],
        structures={"wide": {"write_layers": ((3, 4, 2),)}})
    cell = result["cells"][0]
    assert cell["structure"] == "wide"
    assert cell["errors"] == [] and len(cell["accuracies"]) == 1


# ---------------------------------------------------------------------------
# attention export


def test_export_attention_round_trips(tmp_path):
    task = SyntheticTaskConfig(task="needle", vocab_size=80, feature_dim=8,
                               train_count=6, val_count=2, test_count=2, seed=0)
    train_ds, _val, _test = generate_synthetic(task)
    cfg = MemNetConfig(proj_dim=8, cbp_dim=16, word_dim=16,
                       write_layers=((3, 2, 2),), read_layers=((2, 1, 2),),
                       seed=0)
    table = EmbeddingTable(train_ds.vocab, dim=16, seed=0)
    net = MemNet(cfg, table, visual_dim=8)
    items = net.prepare(train_ds.stories, train_ds.items, "text")[:3]
    params = net.init_params(0)
    path = tmp_path / "attention.json"
    rows = export_attention(net, params, items, path, mode="text")
    assert len(rows) == 3
    assert json.loads(path.read_text(encoding="utf-8")) == \
        json.loads(json.dumps(rows))
    for row, item in zip(rows, items):
        att = np.asarray(row["attention"])
        assert att.ndim == 2 and att.shape[1] == cfg.read_channels
        assert np.isclose(att.sum(), 1.0)
        assert 0 <= row["attention_slot"] < att.shape[0]
        assert 0 <= row["attention_channel"] < att.shape[1]
        lo, hi = row["attended_steps"]
        assert 0 <= lo <= hi < item.n_steps
        assert row["correct_index"] == item.correct_index


# ---------------------------------------------------------------------------
# gradient suite


def test_gradient_suite_result_accounting():
    ok = GradCaseResult("a", runs=3, max_rel_err=2e-6)
    bad = GradCaseResult("b", runs=2, max_rel_err=5e-3)
    suite = GradSuiteResult(cases=[ok, bad], tolerance=1e-4, elapsed_sec=1.0)
    assert suite.runs == 5
    assert suite.max_rel_err == 5e-3
    assert not suite.passed
    assert suite.worst() is bad
    text = suite.to_text()
    assert "FAIL" in text and "ok" in text and "total: 5 runs" in text
    good = GradSuiteResult(cases=[ok], tolerance=1e-4, elapsed_sec=1.0)
    assert good.passed and "FAIL" not in good.to_text()


def test_forced_path_contexts_restore_globals():
    saved_conv = T._CONV_DENSE_BACKWARD_LIMIT
    with H._force_conv_tap_path():
        assert T._CONV_DENSE_BACKWARD_LIMIT == 0
    assert T._CONV_DENSE_BACKWARD_LIMIT == saved_conv
    saved_sketch = fusion._DENSE_SKETCH_LIMIT
    with H._force_sketch_scatter_path():
        assert fusion._DENSE_SKETCH_LIMIT == 0
    assert fusion._DENSE_SKETCH_LIMIT == saved_sketch


def test_gradient_suite_quick_pass():
    res = run_gradient_suite(seed=0, seeds_per_case=1)
    assert res.passed, res.worst()
    assert res.max_rel_err <= 1e-4
    names = [c.name for c in res.cases]
    assert len(names) == len(set(names))
    assert {"end_to_end/full", "end_to_end/no_rw", "end_to_end/no_read",
            "end_to_end/no_query",
            "end_to_end/full_trainable_table"} <= set(names)
    assert {"conv2d_same/x_tap_path", "count_sketch/scatter_path",
            "cbp/first", "position_encode"} <= set(names)
    assert all(c.runs == 1 for c in res.cases)
    assert "total:" in res.to_text()
