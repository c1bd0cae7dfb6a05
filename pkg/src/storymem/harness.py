"""Experiment orchestration: configs, reports, sweeps, and checks.

One :class:`ExperimentConfig` pins everything a run needs (data, model
structure, optimizer, seeds); :func:`run_experiment` turns it into a
:class:`Report` whose canonical JSON form is bit-reproducible for a
fixed config.  The gradient suite and receptive-field helpers live here
too because they operate on whole configured models rather than single
ops.
"""

from __future__ import annotations

import json
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import fusion, model as M, tensor as T, training as R
from .data import (
    Dataset,
    QAItem,
    StorySource,
    StoryStep,
    SyntheticTaskConfig,
    UNKNOWN_TOKEN,
    Vocabulary,
    generate_synthetic,
    load_qa,
    load_story_features,
    load_vocab,
)
from .errors import ConfigError, StorymemError
from .fusion import CountSketchParams, EmbeddingTable, PositionEncoding
from .model import MemNet, MemNetConfig, PreparedItem, save_checkpoint
from .rng import STREAM_GRADCHECK, rng_for
from .tensor import Tensor, _same_padding, grad_check, grad_check_params
from .training import TrainConfig

SOURCE_SYNTHETIC = "synthetic"
SOURCE_FILES = "files"
_ENSEMBLE_MODES = ("single", "restarts", "bag", "ensemble")


def _dataclass_from_dict(cls, d: dict):
    known = {f.name for f in cls.__dataclass_fields__.values()}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return cls(**d)


@dataclass
class ExperimentConfig:
    """Everything one experiment depends on, in one serialisable record."""

    name: str = "experiment"
    source: str = SOURCE_SYNTHETIC
    task: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    paths: dict = field(default_factory=dict)
    model: MemNetConfig = field(default_factory=MemNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    modality: str = "text"
    table_mode: str = "hash"
    ensemble_mode: str = "restarts"
    ensemble_size: int = R.DEFAULT_ENSEMBLE_SIZE
    seed: int = 0
    precision: int = 64

    def validate(self):
        if self.source not in (SOURCE_SYNTHETIC, SOURCE_FILES):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.modality not in ("text", "multimodal"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.table_mode not in ("hash", "trainable"):
            raise ConfigError(f"unknown table mode {self.table_mode!r}")
        if self.ensemble_mode not in _ENSEMBLE_MODES:
            raise ConfigError(f"unknown ensemble mode {self.ensemble_mode!r}")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble size must be >= 1")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        self.model.validate()
        self.train.validate()
        if self.source == SOURCE_SYNTHETIC:
            self.task.validate()
        else:
            required = {"vocab", "stories", "train_qa", "val_qa", "test_qa"}
            missing = required - set(self.paths)
            if missing:
                raise ConfigError(f"paths missing {sorted(missing)}")

    def resolved(self) -> "ExperimentConfig":
        """Fill every unset sub-seed from the experiment seed."""
        return replace(
            self,
            task=self.task.resolved(self.seed),
            model=self.model.resolved(self.seed),
            train=self.train.resolved(self.seed),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "source": self.source,
            "task": asdict(self.task),
            "paths": dict(self.paths),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "modality": self.modality,
            "table_mode": self.table_mode,
            "ensemble_mode": self.ensemble_mode,
            "ensemble_size": self.ensemble_size,
            "seed": self.seed,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        task = d.pop("task", None)
        model_d = d.pop("model", None)
        train_d = d.pop("train", None)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown experiment config keys: {sorted(extra)}")
        cfg = cls(**d)
        if task is not None:
            cfg.task = _dataclass_from_dict(SyntheticTaskConfig, task)
        if model_d is not None:
            cfg.model = MemNetConfig.from_dict(model_d)
        if train_d is not None:
            cfg.train = TrainConfig.from_dict(train_d)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix in (".yaml", ".yml"):
            import yaml

            payload = yaml.safe_load(text)
        else:
            payload = json.loads(text)
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(payload)


def load_experiment_data(config: ExperimentConfig):
    """Returns (train, val, test) datasets for the configured source."""
    if config.source == SOURCE_SYNTHETIC:
        return generate_synthetic(config.task)
    vocab = load_vocab(config.paths["vocab"])
    stories = {}
    story_dir = Path(config.paths["stories"])
    for p in sorted(story_dir.glob("*.story")):
        stories[p.stem] = load_story_features(p, vocab)
    if not stories:
        raise ConfigError(f"no .story files under {story_dir}")
    splits = []
    for key in ("train_qa", "val_qa", "test_qa"):
        items = load_qa(config.paths[key])
        for item in items:
            if item.story_id not in stories:
                raise ConfigError(
                    f"item {item.item_id!r} references unknown story "
                    f"{item.story_id!r}"
                )
        splits.append(Dataset(stories=stories, items=items, vocab=vocab))
    return tuple(splits)


# ---------------------------------------------------------------------------
# receptive fields


def receptive_field_intervals(n: int, layers, clamp: bool = True) -> list:
    """Story-step interval each final slot can see through a conv stack.

    ``layers`` is a sequence of (filter, stride) pairs applied in order.
    With ``clamp=True`` the SAME padding offset is subtracted and the
    interval is clipped into the valid input range at every layer; with
    ``clamp=False`` the naive mapping slot*stride .. slot*stride+filter-1
    is chained instead (useful for seeing how much padding distorts).
    """
    layers = [(int(f), int(s)) for f, s in layers]
    lengths = [int(n)]
    for f, s in layers:
        lengths.append(T.same_output_length(lengths[-1], s))
    intervals = []
    for i in range(lengths[-1]):
        lo = hi = i
        for (f, s), n_in in zip(reversed(layers), reversed(lengths[:-1])):
            if clamp:
                _out, pad_top, _pad_bot = _same_padding(n_in, f, s)
                lo = max(lo * s - pad_top, 0)
                hi = min(hi * s - pad_top + f - 1, n_in - 1)
            else:
                lo = lo * s
                hi = hi * s + f - 1
        intervals.append((lo, hi))
    return intervals


def spans_overlap(a, b) -> bool:
    return not (a[1] < b[0] or a[0] > b[1])


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    name: str
    config: dict
    seed: int
    accuracies: dict
    breakdown: dict
    items: list
    training: dict
    n_parameters: int
    wall_clock_sec: float
    timestamp: str

    _VOLATILE = ("wall_clock_sec", "timestamp")

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "config": self.config,
            "seed": self.seed,
            "accuracies": self.accuracies,
            "breakdown": self.breakdown,
            "items": self.items,
            "training": self.training,
            "n_parameters": self.n_parameters,
            "wall_clock_sec": self.wall_clock_sec,
            "timestamp": self.timestamp,
        }
        return d

    def canonical_dict(self) -> dict:
        d = self.to_dict()
        for key in self._VOLATILE:
            d.pop(key)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True)

    def to_text(self) -> str:
        lines = [f"experiment: {self.name}"]
        m = self.config["model"]
        lines.append(
            f"model: variant={m['variant']} d={m['proj_dim']} "
            f"write={m['write_layers']} read={m['read_layers']}"
        )
        lines.append(f"seed: {self.seed}  parameters: {self.n_parameters}")
        accs = "  ".join(
            f"{split}={self.accuracies[split]:.4f}"
            for split in ("train", "val", "test")
            if split in self.accuracies
        )
        lines.append(f"accuracy: {accs}")
        if self.breakdown:
            lines.append("test accuracy by question type:")
            for qtype in sorted(self.breakdown):
                cell = self.breakdown[qtype]
                lines.append(
                    f"  {qtype}: {cell['accuracy']:.4f} "
                    f"({cell['correct']}/{cell['count']})"
                )
        tr = self.training
        if "stop_reason" in tr:
            lines.append(
                f"training: {tr['mode']}, stopped by {tr['stop_reason']} "
                f"(best epoch {tr['best_epoch']}, val loss {tr['best_val_loss']:.6f})"
            )
        else:
            lines.append(f"training: {tr['mode']} with {tr['members']} members")
        lines.append(f"wall clock: {self.wall_clock_sec:.1f}s  at {self.timestamp}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        (out_dir / "report.txt").write_text(self.to_text(), encoding="utf-8")


def question_type_breakdown(records) -> dict:
    """Per question type counts and accuracy; types never seen are absent."""
    out = {}
    for rec in records:
        cell = out.setdefault(rec["question_type"], {"count": 0, "correct": 0})
        cell["count"] += 1
        cell["correct"] += int(rec["is_correct"])
    for cell in out.values():
        cell["accuracy"] = cell["correct"] / cell["count"]
    return out


def _item_record(net: MemNet, members, item: PreparedItem, split: str,
                 mode: str) -> dict:
    if len(members) == 1:
        result = net.forward(members[0], item, mode)
        predicted = result.y
        confidence = result.z.data
        attention = result.attention.data
    else:
        predicted, confidence = R.ensemble_predict(net, members, item, mode)
        attention = net.forward(members[0], item, mode).attention.data
    flat = int(np.argmax(attention))
    slot, channel = divmod(flat, attention.shape[1])
    layers = net.config.effective_conv_layers()
    interval = receptive_field_intervals(item.n_steps, layers)[slot]
    record = {
        "item_id": item.item_id,
        "split": split,
        "question_type": item.question_type,
        "predicted": predicted,
        "correct_index": item.correct_index,
        "is_correct": bool(item.correct_index is not None
                           and predicted == item.correct_index),
        "confidence": [float(v) for v in confidence],
        "attention_slot": slot,
        "attention_channel": channel,
        "read_slots": int(attention.shape[0]),
        "story_steps": item.n_steps,
        "attended_steps": [int(interval[0]), int(interval[1])],
        "gt_span": None if item.gt_span is None else list(item.gt_span),
        "span_overlap": None,
    }
    if item.gt_span is not None:
        record["span_overlap"] = spans_overlap(interval, item.gt_span)
    return record


def run_experiment(config: ExperimentConfig, out_dir=None) -> Report:
    """Generate/load data, fit per the configured strategy, evaluate, report."""
    config = config.resolved()
    config.validate()
    start = time.perf_counter()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    train_ds, val_ds, test_ds = load_experiment_data(config)
    dtype = np.float32 if config.precision == 32 else np.float64
    table = EmbeddingTable(
        train_ds.vocab,
        dim=config.model.word_dim,
        trainable=(config.table_mode == "trainable"),
        seed=config.model.seed,
        dtype=dtype,
    )
    first_story = next(iter(train_ds.stories.values()))
    visual_dim = first_story.visual_dim or 1
    net = MemNet(config.model, table, visual_dim=visual_dim, dtype=dtype)
    mode = config.modality
    prep_train = net.prepare(train_ds.stories, train_ds.items, mode)
    prep_val = net.prepare(val_ds.stories, val_ds.items, mode)
    prep_test = net.prepare(test_ds.stories, test_ds.items, mode)

    train_cfg = config.train
    mdir = str(out_dir) if out_dir is not None else None
    if config.ensemble_mode == "single":
        params = net.init_params(train_cfg.rng_seed)
        mpath = f"{mdir}/metrics.jsonl" if mdir else None
        history = R.train(net, params, prep_train, prep_val, train_cfg,
                          mode=mode, metrics_path=mpath)
        members = [params]
        training_info = {
            "mode": "single",
            "stop_reason": history.stop_reason,
            "best_epoch": history.best_epoch,
            "best_val_loss": history.best_val_loss,
            "epochs_run": len(history.epochs),
        }
    elif config.ensemble_mode == "restarts":
        params, best = R.train_with_restarts(net, prep_train, prep_val,
                                             train_cfg, mode=mode,
                                             metrics_dir=mdir)
        members = [params]
        training_info = {
            "mode": "restarts",
            "restarts": train_cfg.restarts,
            "chosen_restart": best.restart,
            "stop_reason": best.history.stop_reason,
            "best_epoch": best.history.best_epoch,
            "best_val_loss": best.history.best_val_loss,
            "epochs_run": len(best.history.epochs),
        }
    elif config.ensemble_mode == "bag":
        members = R.train_bagged(net, prep_train, prep_val, train_cfg,
                                 size=config.ensemble_size, mode=mode)
        training_info = {"mode": "bag", "members": len(members)}
    else:
        members = R.train_ensemble(net, prep_train, prep_val, train_cfg,
                                   size=config.ensemble_size, mode=mode)
        training_info = {"mode": "ensemble", "members": len(members)}

    def split_accuracy(prepared):
        if len(members) == 1:
            return R.accuracy(net, members[0], prepared, mode)
        return R.ensemble_accuracy(net, members, prepared, mode)

    accuracies = {
        "train": split_accuracy(prep_train),
        "val": split_accuracy(prep_val),
        "test": split_accuracy(prep_test),
    }
    records = [
        _item_record(net, members, item, split, mode)
        for split, prepared in (("val", prep_val), ("test", prep_test))
        for item in prepared
    ]
    breakdown = question_type_breakdown(
        [r for r in records if r["split"] == "test"]
    )
    n_parameters = sum(t.data.size for t in members[0].tensors())
    report = Report(
        name=config.name,
        config=config.to_dict(),
        seed=config.seed,
        accuracies=accuracies,
        breakdown=breakdown,
        items=records,
        training=training_info,
        n_parameters=int(n_parameters),
        wall_clock_sec=time.perf_counter() - start,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    if out_dir is not None:
        report.save(out_dir)
        if len(members) == 1:
            save_checkpoint(out_dir / "model.ckpt", config.model, members[0])
        else:
            for i, member in enumerate(members):
                save_checkpoint(out_dir / f"model.{i:02d}.ckpt",
                                config.model, member)
    return report


# ---------------------------------------------------------------------------
# ablation sweeps


def ablation_sweep(base: ExperimentConfig, variants, seeds,
                   structures=None, out_path=None) -> dict:
    """Cross variants x structures x seeds; collect test accuracy per cell.

    ``structures`` maps a label to model-config overrides (for example
    different write stacks).  A failed run is recorded in the cell's
    ``errors`` list instead of aborting the sweep.
    """
    structures = dict(structures) if structures else {"base": {}}
    cells = []
    for variant in variants:
        for label, overrides in structures.items():
            accs, errors = [], []
            for seed in seeds:
                cfg = replace(
                    base,
                    seed=int(seed),
                    task=replace(base.task, seed=None),
                    model=replace(base.model, variant=variant, seed=None,
                                  **overrides),
                    train=replace(base.train, rng_seed=None),
                )
                try:
                    rep = run_experiment(cfg)
                    accs.append(rep.accuracies["test"])
                except StorymemError as exc:
                    errors.append(f"seed {seed}: {exc}")
            cell = {
                "variant": variant,
                "structure": label,
                "seeds": [int(s) for s in seeds],
                "accuracies": accs,
                "errors": errors,
                "mean": float(np.mean(accs)) if accs else None,
                "sd": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
            }
            cells.append(cell)
    result = {"name": base.name, "cells": cells}
    if out_path is not None:
        Path(out_path).write_text(
            json.dumps(result, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    return result


def sweep_table(result: dict) -> str:
    """Human-readable mean +/- sd table for an ablation sweep."""
    lines = [f"{'variant':<12} {'structure':<16} {'test acc':<18} runs"]
    for cell in result["cells"]:
        if cell["mean"] is None:
            acc = "all runs failed"
        else:
            acc = f"{cell['mean']:.4f} +/- {cell['sd']:.4f}"
        n_ok = len(cell["accuracies"])
        n_err = len(cell["errors"])
        runs = f"{n_ok} ok" + (f", {n_err} failed" if n_err else "")
        lines.append(f"{cell['variant']:<12} {cell['structure']:<16} {acc:<18} {runs}")
    return "\n".join(lines) + "\n"


def export_attention(net: MemNet, params, items, path, mode: str = "text"):
    """Dump full attention maps plus slot provenance for inspection."""
    layers = net.config.effective_conv_layers()
    rows = []
    for item in items:
        result = net.forward(params, item, mode)
        att = result.attention.data
        flat = int(np.argmax(att))
        slot, channel = divmod(flat, att.shape[1])
        interval = receptive_field_intervals(item.n_steps, layers)[slot]
        rows.append({
            "item_id": item.item_id,
            "attention": [[float(v) for v in row] for row in att],
            "attention_slot": slot,
            "attention_channel": channel,
            "attended_steps": [int(interval[0]), int(interval[1])],
            "gt_span": None if item.gt_span is None else list(item.gt_span),
            "predicted": result.y,
            "correct_index": item.correct_index,
        })
    Path(path).write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
    return rows


# ---------------------------------------------------------------------------
# gradient suite


@dataclass
class GradCaseResult:
    name: str
    runs: int
    max_rel_err: float


@dataclass
class GradSuiteResult:
    cases: list
    tolerance: float
    elapsed_sec: float

    @property
    def runs(self) -> int:
        return sum(c.runs for c in self.cases)

    @property
    def max_rel_err(self) -> float:
        return max(c.max_rel_err for c in self.cases)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def worst(self) -> GradCaseResult:
        return max(self.cases, key=lambda c: c.max_rel_err)

    def to_text(self) -> str:
        lines = []
        for c in sorted(self.cases, key=lambda c: c.name):
            status = "ok" if c.max_rel_err <= self.tolerance else "FAIL"
            lines.append(f"{status:<5} {c.name:<32} runs={c.runs} "
                         f"max_rel_err={c.max_rel_err:.3e}")
        lines.append(
            f"total: {self.runs} runs, max rel err {self.max_rel_err:.3e} "
            f"(tolerance {self.tolerance:.0e}), {self.elapsed_sec:.1f}s"
        )
        return "\n".join(lines) + "\n"


class _force_conv_tap_path:
    """Temporarily drop the dense-backward budget to 0 to hit the tap loop."""

    def __enter__(self):
        self._saved = T._CONV_DENSE_BACKWARD_LIMIT
        T._CONV_DENSE_BACKWARD_LIMIT = 0
        return self

    def __exit__(self, exc_type, exc, tb):
        T._CONV_DENSE_BACKWARD_LIMIT = self._saved
        return False


class _force_sketch_scatter_path:
    """Route count_sketch through the scatter-add branch instead of matmul."""

    def __enter__(self):
        self._saved = fusion._DENSE_SKETCH_LIMIT
        fusion._DENSE_SKETCH_LIMIT = 0
        return self

    def __exit__(self, exc_type, exc, tb):
        fusion._DENSE_SKETCH_LIMIT = self._saved
        return False


def _away_from_zero(arr, margin=0.3):
    return arr + np.where(arr >= 0, margin, -margin)


def _scalarize(y, w):
    return T.dot(T.reshape(y, (-1,)), T.constant(np.asarray(w)))


def _op_cases():
    """(name, build) pairs; build(rng) -> (f, point array, forced_tap?)."""

    def c_matmul_lhs(rng):
        b = rng.standard_normal((4, 2))
        w = rng.standard_normal(6)
        return lambda x: _scalarize(T.matmul(x, T.constant(b)), w), \
            rng.standard_normal((3, 4))

    def c_matmul_rhs(rng):
        a = rng.standard_normal((3, 4))
        w = rng.standard_normal(6)
        return lambda x: _scalarize(T.matmul(T.constant(a), x), w), \
            rng.standard_normal((4, 2))

    def c_affine_x(rng):
        wmat = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        w = rng.standard_normal(15)
        return lambda x: _scalarize(
            T.affine(x, T.constant(wmat), T.constant(b)), w), \
            rng.standard_normal((5, 4))

    def c_affine_w(rng):
        xmat = rng.standard_normal((5, 4))
        b = rng.standard_normal(3)
        w = rng.standard_normal(15)
        return lambda t: _scalarize(
            T.affine(T.constant(xmat), t, T.constant(b)), w), \
            rng.standard_normal((4, 3))

    def c_affine_b(rng):
        xmat = rng.standard_normal((5, 4))
        wmat = rng.standard_normal((4, 3))
        w = rng.standard_normal(15)
        return lambda t: _scalarize(
            T.affine(T.constant(xmat), T.constant(wmat), t), w), \
            rng.standard_normal(3)

    def c_matvec_mat(rng):
        v = rng.standard_normal(4)
        w = rng.standard_normal(3)
        return lambda a: _scalarize(T.matvec(a, T.constant(v)), w), \
            rng.standard_normal((3, 4))

    def c_matvec_vec(rng):
        a = rng.standard_normal((3, 4))
        w = rng.standard_normal(3)
        return lambda v: _scalarize(T.matvec(T.constant(a), v), w), \
            rng.standard_normal(4)

    def c_dot(rng):
        b = rng.standard_normal(6)
        return lambda x: T.dot(x, T.constant(b)), rng.standard_normal(6)

    def _conv_case(point_of, stride, fshape, xshape):
        def make(rng):
            fc = rng.standard_normal(fshape) * 0.5
            xc = rng.standard_normal(xshape)
            bc = rng.standard_normal(fshape[3]) * 0.1
            h_out = T.same_output_length(xshape[0], stride[0])
            w_out = T.same_output_length(xshape[1], stride[1])
            w = rng.standard_normal(h_out * w_out * fshape[3])
            if point_of == "x":
                return lambda x: _scalarize(T.conv2d_same(
                    x, T.constant(fc), T.constant(bc), stride), w), xc
            if point_of == "filt":
                return lambda f: _scalarize(T.conv2d_same(
                    T.constant(xc), f, T.constant(bc), stride), w), fc
            return lambda b: _scalarize(T.conv2d_same(
                T.constant(xc), T.constant(fc), b, stride), w), bc
        return make

    def c_relu(rng):
        w = rng.standard_normal(12)
        return lambda x: _scalarize(T.relu(x), w), \
            _away_from_zero(rng.standard_normal((4, 3)))

    def c_softmax_joint(rng):
        w = rng.standard_normal(12)
        return lambda x: _scalarize(T.softmax(x, axis=None), w), \
            rng.standard_normal((4, 3))

    def c_softmax_axis(rng):
        w = rng.standard_normal(12)
        return lambda x: _scalarize(T.softmax(x, axis=0), w), \
            rng.standard_normal((4, 3))

    def c_add_scalar(rng):
        a = rng.standard_normal((3, 3))
        w = rng.standard_normal(9)
        return lambda s: _scalarize(T.add(T.constant(a), s), w), \
            np.asarray(rng.standard_normal())

    def c_mul(rng):
        b = rng.standard_normal((3, 4))
        w = rng.standard_normal(12)
        return lambda x: _scalarize(T.mul(x, T.constant(b)), w), \
            rng.standard_normal((3, 4))

    def c_sub(rng):
        b = rng.standard_normal((3, 4))
        w = rng.standard_normal(12)
        return lambda x: _scalarize(T.sub(T.constant(b), x), w), \
            rng.standard_normal((3, 4))

    def c_scale(rng):
        w = rng.standard_normal(8)
        return lambda x: _scalarize(T.scale(x, -1.7), w), \
            rng.standard_normal((2, 4))

    def c_sum_axis(rng):
        w = rng.standard_normal(4)
        return lambda x: _scalarize(T.sum_over_axis(x, 0), w), \
            rng.standard_normal((3, 4))

    def c_mean_axis(rng):
        w = rng.standard_normal(3)
        return lambda x: _scalarize(T.mean_over_axis(x, 1), w), \
            rng.standard_normal((3, 4))

    def c_reshape_transpose(rng):
        w = rng.standard_normal(24)
        return lambda x: _scalarize(
            T.transpose(T.reshape(x, (2, 3, 4)), (2, 0, 1)), w), \
            rng.standard_normal((6, 4))

    def c_take_rows(rng):
        idx = [0, 2, 2, 5, 1]
        w = rng.standard_normal(5 * 3)
        return lambda x: _scalarize(T.take_rows(x, idx), w), \
            rng.standard_normal((6, 3))

    def c_pick(rng):
        return lambda x: T.pick(x, 3), rng.standard_normal(6)

    def c_log(rng):
        w = rng.standard_normal(5)
        return lambda x: _scalarize(T.log(x), w), \
            np.abs(rng.standard_normal(5)) + 0.5

    def c_sigmoid(rng):
        w = rng.standard_normal(6)
        return lambda x: _scalarize(T.sigmoid(x), w), \
            rng.standard_normal(6) * 3

    def c_stack_rows(rng):
        c1 = T.constant(rng.standard_normal(4))
        w = rng.standard_normal(8)
        return lambda x: _scalarize(T.stack_rows([x, c1]), w), \
            rng.standard_normal(4)

    def c_mode1_dot_t3(rng):
        v = rng.standard_normal(4)
        w = rng.standard_normal(6)
        return lambda t: _scalarize(T.mode1_dot(t, T.constant(v)), w), \
            rng.standard_normal((3, 4, 2))

    def c_mode1_dot_v(rng):
        t3 = rng.standard_normal((3, 4, 2))
        w = rng.standard_normal(6)
        return lambda v: _scalarize(T.mode1_dot(T.constant(t3), v), w), \
            rng.standard_normal(4)

    def c_slot_sum_t3(rng):
        wt = rng.standard_normal((3, 2))
        w = rng.standard_normal(4)
        return lambda t: _scalarize(
            T.weighted_slot_sum(t, T.constant(wt)), w), \
            rng.standard_normal((3, 4, 2))

    def c_slot_sum_w(rng):
        t3 = rng.standard_normal((3, 4, 2))
        w = rng.standard_normal(4)
        return lambda wt: _scalarize(
            T.weighted_slot_sum(T.constant(t3), wt), w), \
            rng.standard_normal((3, 2))

    def c_count_sketch(rng):
        params = CountSketchParams.generate(10, 7, 931, int(rng.integers(1 << 30)))
        w = rng.standard_normal(7)
        return lambda x: _scalarize(fusion.count_sketch(x, params), w), \
            rng.standard_normal(10)

    def c_count_sketch_batched(rng):
        params = CountSketchParams.generate(6, 9, 936, int(rng.integers(1 << 30)))
        w = rng.standard_normal(3 * 9)
        return lambda x: _scalarize(fusion.count_sketch(x, params), w), \
            rng.standard_normal((3, 6))

    def c_circ_conv_a(rng):
        b = rng.standard_normal(8)
        w = rng.standard_normal(8)
        return lambda a: _scalarize(
            fusion.circular_convolve(a, T.constant(b)), w), \
            rng.standard_normal(8)

    def c_circ_conv_shared_b(rng):
        a = rng.standard_normal((3, 8))
        w = rng.standard_normal(24)
        return lambda b: _scalarize(
            fusion.circular_convolve(T.constant(a), b), w), \
            rng.standard_normal(8)

    def c_cbp_x(rng):
        key = int(rng.integers(1 << 30))
        px = CountSketchParams.generate(6, 8, 932, key)
        py = CountSketchParams.generate(5, 8, 933, key)
        y = rng.standard_normal(5)
        w = rng.standard_normal(8)
        return lambda x: _scalarize(
            fusion.cbp(x, T.constant(y), px, py), w), rng.standard_normal(6)

    def c_cbp_y(rng):
        key = int(rng.integers(1 << 30))
        px = CountSketchParams.generate(6, 8, 934, key)
        py = CountSketchParams.generate(5, 8, 935, key)
        xb = rng.standard_normal((3, 6))
        w = rng.standard_normal(24)
        return lambda y: _scalarize(
            fusion.cbp(T.constant(xb), y, px, py), w), rng.standard_normal(5)

    def c_position_encode(rng):
        pe = PositionEncoding(5)
        w = rng.standard_normal(5)
        return lambda x: _scalarize(fusion.position_encode_t(x, pe), w), \
            rng.standard_normal((4, 5))

    def c_concat_cols(rng):
        b = T.constant(rng.standard_normal((3, 2)))
        w = rng.standard_normal(18)
        return lambda x: _scalarize(M._concat_cols(x, b), w), \
            rng.standard_normal((3, 4))

    cases = [
        ("matmul/lhs", c_matmul_lhs, None),
        ("matmul/rhs", c_matmul_rhs, None),
        ("affine/x", c_affine_x, None),
        ("affine/w", c_affine_w, None),
        ("affine/b", c_affine_b, None),
        ("matvec/matrix", c_matvec_mat, None),
        ("matvec/vector", c_matvec_vec, None),
        ("dot", c_dot, None),
        ("conv2d_same/x", _conv_case("x", (2, 1), (3, 3, 2, 3), (6, 5, 2)), None),
        ("conv2d_same/filter", _conv_case("filt", (2, 1), (3, 3, 2, 3), (6, 5, 2)), None),
        ("conv2d_same/bias", _conv_case("bias", (2, 1), (3, 3, 2, 3), (6, 5, 2)), None),
        ("conv2d_same/x_tap_path", _conv_case("x", (2, 1), (3, 3, 2, 3), (6, 5, 2)),
         _force_conv_tap_path),
        ("conv2d_same/x_wide_stride", _conv_case("x", (3, 2), (4, 3, 1, 2), (7, 6, 1)), None),
        ("conv2d_same/x_filter_overhang", _conv_case("x", (1, 1), (5, 3, 1, 2), (2, 3, 1)), None),
        ("relu", c_relu, None),
        ("softmax/joint", c_softmax_joint, None),
        ("softmax/axis0", c_softmax_axis, None),
        ("add/scalar_broadcast", c_add_scalar, None),
        ("mul", c_mul, None),
        ("sub", c_sub, None),
        ("scale", c_scale, None),
        ("sum_over_axis", c_sum_axis, None),
        ("mean_over_axis", c_mean_axis, None),
        ("reshape+transpose", c_reshape_transpose, None),
        ("take_rows", c_take_rows, None),
        ("pick", c_pick, None),
        ("log", c_log, None),
        ("sigmoid", c_sigmoid, None),
        ("stack_rows", c_stack_rows, None),
        ("mode1_dot/tensor", c_mode1_dot_t3, None),
        ("mode1_dot/vector", c_mode1_dot_v, None),
        ("weighted_slot_sum/tensor", c_slot_sum_t3, None),
        ("weighted_slot_sum/weights", c_slot_sum_w, None),
        ("count_sketch", c_count_sketch, None),
        ("count_sketch/scatter_path", c_count_sketch, _force_sketch_scatter_path),
        ("count_sketch/scatter_batched", c_count_sketch_batched,
         _force_sketch_scatter_path),
        ("circular_convolve/first", c_circ_conv_a, None),
        ("circular_convolve/shared_second", c_circ_conv_shared_b, None),
        ("cbp/first", c_cbp_x, None),
        ("cbp/second", c_cbp_y, None),
        ("position_encode", c_position_encode, None),
        ("concat_cols", c_concat_cols, None),
    ]
    return cases


_E2E_VARIANTS = (M.VARIANT_FULL, M.VARIANT_NO_RW, M.VARIANT_NO_READ,
                 M.VARIANT_NO_QUERY)


def _tiny_net(variant: str, seed: int, trainable: bool = False):
    vocab = Vocabulary([UNKNOWN_TOKEN] + [f"w{i:02d}" for i in range(12)])
    config = MemNetConfig(
        proj_dim=6, cbp_dim=8, word_dim=5,
        write_layers=((3, 2, 2),), read_layers=((2, 1, 2),),
        variant=variant, seed=seed,
    )
    table = EmbeddingTable(vocab, dim=5, trainable=trainable, seed=seed)
    return MemNet(config, table, visual_dim=4), vocab


def _e2e_case_frozen(variant, rng, seed):
    net, _vocab = _tiny_net(variant, seed)
    n = 5
    item = PreparedItem(
        item_id="gradcheck", story_id="gradcheck",
        embedding=rng.standard_normal((n, 8)),
        question_vec=rng.standard_normal(5),
        answer_vecs=rng.standard_normal((5, 5)),
        correct_index=2, question_type="what", gt_span=None, n_steps=n,
    )
    params = net.init_params(seed)
    return net, params, item


def _e2e_case_trainable(rng, seed):
    net, vocab = _tiny_net(M.VARIANT_FULL, seed, trainable=True)
    words = [t for t in vocab.tokens if t != UNKNOWN_TOKEN]

    def sent(k):
        return tuple(words[int(i)] for i in rng.integers(0, len(words), size=k))

    steps = [StoryStep(sent(3)) for _ in range(4)]
    story = StorySource("gradcheck", steps, modality="text", word_dim=5)
    item = QAItem("gradcheck-q0", "gradcheck", question=sent(3),
                  answers=tuple(sent(1) for _ in range(5)), correct_index=1)
    prepared = net.prepare({"gradcheck": story}, [item])[0]
    params = net.init_params(seed)
    return net, params, prepared


def run_gradient_suite(seed: int = 0, tolerance: float = 1e-4,
                       seeds_per_case: int = 2, step: float = 1e-5) -> GradSuiteResult:
    """Finite-difference checks for every op plus end-to-end model losses.

    Every case is repeated at ``seeds_per_case`` random points; the worst
    relative error per case is reported.  End-to-end cases perturb every
    parameter coordinate of a small model for each ablation variant.
    """
    started = time.perf_counter()
    results = []

    def _e2e_err(net, params, item):
        # A random point can land within one finite-difference step of a
        # ReLU kink, where the central difference straddles the corner and
        # misreports a correct gradient.  Shrinking the step moves the
        # window off the kink; a genuinely wrong gradient stays wrong, so
        # taking the better of the two steps only forgives kink artifacts.
        errs = grad_check_params(
            lambda: net.item_loss(params, item)[0], params.named(), step=step)
        worst_k = max(errs.values())
        if worst_k > tolerance:
            retry = grad_check_params(
                lambda: net.item_loss(params, item)[0], params.named(),
                step=step / 10.0)
            worst_k = min(worst_k, max(retry.values()))
        return worst_k

    for ci, (name, build, forced_path) in enumerate(_op_cases()):
        worst = 0.0
        for k in range(seeds_per_case):
            rng = rng_for(STREAM_GRADCHECK, seed, ci, k)
            f, point = build(rng)
            with (forced_path() if forced_path else nullcontext()):
                err = grad_check(f, Tensor(point), step=step)
                if err > tolerance:
                    err = min(err, grad_check(f, Tensor(point), step=step / 10.0))
            worst = max(worst, err)
        results.append(GradCaseResult(name, seeds_per_case, worst))

    for vi, variant in enumerate(_E2E_VARIANTS):
        worst = 0.0
        for k in range(seeds_per_case):
            rng = rng_for(STREAM_GRADCHECK, seed, 1000 + vi, k)
            net, params, item = _e2e_case_frozen(variant, rng, seed + k)
            worst = max(worst, _e2e_err(net, params, item))
        results.append(GradCaseResult(f"end_to_end/{variant}",
                                      seeds_per_case, worst))

    worst = 0.0
    for k in range(seeds_per_case):
        rng = rng_for(STREAM_GRADCHECK, seed, 2000, k)
        net, params, item = _e2e_case_trainable(rng, seed + k)
        worst = max(worst, _e2e_err(net, params, item))
    results.append(GradCaseResult("end_to_end/full_trainable_table",
                                  seeds_per_case, worst))

    return GradSuiteResult(cases=results, tolerance=tolerance,
                           elapsed_sec=time.perf_counter() - started)
