"""Optimisation loop: Glorot init, cross-entropy, Adagrad, early stopping.

Also the meta-strategies that wrap single runs: random restarts (keep the
best validation loss), bootstrap bagging, and fixed-data ensembles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import (ConfigError, NonFiniteError, ParameterError,
                     TrainingDiverged)
from .rng import STREAM_BOOTSTRAP, STREAM_SHUFFLE, rng_for
from .tensor import Tape

DEFAULT_BAG_SIZE = 30
DEFAULT_ENSEMBLE_SIZE = 20


def xavier_init(shape, rng, dtype=np.float64):
    """Glorot-uniform sample ``U(-a, a)`` with ``a = sqrt(6/(fan_in+fan_out))``.

    Vectors use their length for both fans.  Rank-4 conv filters
    (height, width, c_in, c_out) count the receptive field into each fan.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ParameterError(f"bad init shape {shape}")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in = receptive * shape[2]
        fan_out = receptive * shape[3]
    else:
        raise ParameterError(f"unsupported init rank {len(shape)}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def cross_entropy(z: Tensor, target) -> Tensor:
    """Negative log confidence of the correct choice.

    ``target`` is either an int index or a one-hot vector.
    """
    if isinstance(target, (int, np.integer)):
        index = int(target)
    else:
        onehot = np.asarray(target)
        if onehot.ndim != 1 or onehot.shape[0] != z.shape[0]:
            raise ParameterError(
                f"one-hot target shape {onehot.shape} != ({z.shape[0]},)"
            )
        hits = np.flatnonzero(onehot)
        if len(hits) != 1 or not np.isclose(onehot[hits[0]], 1.0):
            raise ParameterError("target vector is not one-hot")
        index = int(hits[0])
    if index < 0 or index >= z.shape[0]:
        raise ParameterError(f"target index {index} out of range for {z.shape[0]}")
    return T.scale(T.log(T.pick(z, index)), -1.0)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    adagrad_initial_accumulator: float = 0.1
    batch_size: int = 32
    max_epochs: int = 200
    early_stop_patience: int = 10
    restarts: int = 12
    rng_seed: int | None = None

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.adagrad_initial_accumulator <= 0:
            raise ConfigError("adagrad accumulator must start positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max epochs must be >= 1")
        if self.early_stop_patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.restarts < 1:
            raise ConfigError("need at least one restart")

    def resolved(self, fallback_seed: int) -> "TrainConfig":
        if self.rng_seed is None:
            return replace(self, rng_seed=int(fallback_seed))
        return self

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "adagrad_initial_accumulator": self.adagrad_initial_accumulator,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "early_stop_patience": self.early_stop_patience,
            "restarts": self.restarts,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)


class AdagradState:
    """Per-parameter squared-gradient accumulators.

    The accumulator starts at a small positive constant instead of using
    an epsilon in the denominator, so the very first step is already
    well defined: ``theta -= lr * g / sqrt(G)`` with ``G = G0 + g^2``.
    """

    def __init__(self, params, config: TrainConfig):
        self.config = config
        self.params = list(params)
        self.accum = [
            np.full_like(p.data, config.adagrad_initial_accumulator)
            for p in self.params
        ]

    def step(self):
        lr = self.config.learning_rate
        for p, acc in zip(self.params, self.accum):
            g = p.grad
            if g is None:
                continue
            acc += g * g
            p.data -= lr * g / np.sqrt(acc)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stop_reason: str = ""

    def append(self, record: EpochRecord):
        self.epochs.append(record)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({
                "epoch": r.epoch,
                "train_loss": r.train_loss,
                "val_loss": r.val_loss,
                "val_acc": r.val_acc,
            }, sort_keys=True)
            for r in self.epochs
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def evaluate(net, params, items, mode: str = "text"):
    """(mean loss, accuracy) over labelled items, outside any tape."""
    if not items:
        raise ParameterError("cannot evaluate an empty item list")
    total = 0.0
    hits = 0
    for item in items:
        loss, result = net.item_loss(params, item, mode)
        total += float(loss.data)
        if result.y == item.correct_index:
            hits += 1
    return total / len(items), hits / len(items)


def accuracy(net, params, items, mode: str = "text") -> float:
    if not items:
        raise ParameterError("cannot score an empty item list")
    hits = sum(
        1 for item in items
        if net.predict(params, item, mode).predicted == item.correct_index
    )
    return hits / len(items)


def train(net, params, train_items, val_items, config: TrainConfig,
          mode: str = "text", metrics_path=None) -> TrainHistory:
    """Minibatch Adagrad with early stopping on validation loss.

    Improvement must be strict; after more than ``early_stop_patience``
    consecutive non-improving epochs the loop stops and the parameters
    are rolled back to the best epoch's snapshot.
    """
    config.validate()
    if config.rng_seed is None:
        raise ConfigError("training config needs a concrete rng_seed")
    if not train_items:
        raise ParameterError("no training items")
    if not val_items:
        raise ParameterError("no validation items")
    shuffle_rng = rng_for(STREAM_SHUFFLE, config.rng_seed)
    optimizer = AdagradState(params.tensors(), config)
    history = TrainHistory()
    best_values = params.copy_values()
    bad_epochs = 0
    metrics_fh = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(config.max_epochs):
            order = shuffle_rng.permutation(len(train_items))
            epoch_loss = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = [train_items[i] for i in order[start:start + config.batch_size]]
                params.zero_grads()
                try:
                    with Tape() as tape:
                        loss, _results = net.batch_loss(params, batch, mode)
                        tape.backward(loss)
                except NonFiniteError as exc:
                    # a log/softmax blowing up mid-forward is the same failure
                    # as a non-finite loss; keep the (epoch, batch) diagnostic
                    raise TrainingDiverged(epoch, start // config.batch_size) from exc
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(epoch, start // config.batch_size)
                epoch_loss += value * len(batch)
                optimizer.step()
            train_loss = epoch_loss / len(train_items)
            val_loss, val_acc = evaluate(net, params, val_items, mode)
            record = EpochRecord(epoch, train_loss, val_loss, val_acc)
            history.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps({
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "val_loss": val_loss,
                    "val_acc": val_acc,
                }, sort_keys=True) + "\n")
                metrics_fh.flush()
            if val_loss < history.best_val_loss:
                history.best_val_loss = val_loss
                history.best_epoch = epoch
                best_values = params.copy_values()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs > config.early_stop_patience:
                    history.stop_reason = "early_stop"
                    break
        else:
            history.stop_reason = "max_epochs"
    finally:
        if metrics_fh:
            metrics_fh.close()
    params.load_values(best_values)
    return history


@dataclass
class RestartResult:
    restart: int
    history: TrainHistory
    values: dict


def train_with_restarts(net, train_items, val_items, config: TrainConfig,
                        mode: str = "text", metrics_dir=None):
    """Run ``config.restarts`` independent fits; keep the best val loss.

    Restart r uses init seed ``rng_seed + r`` and its own shuffle stream,
    so runs differ in both weights and batch order.  Ties keep the lowest
    restart index.
    """
    config.validate()
    if config.rng_seed is None:
        raise ConfigError("training config needs a concrete rng_seed")
    best = None
    for r in range(config.restarts):
        params = net.init_params(config.rng_seed + r)
        run_cfg = replace(config, rng_seed=config.rng_seed + r)
        metrics_path = None
        if metrics_dir is not None:
            metrics_path = f"{metrics_dir}/metrics_restart{r}.jsonl"
        history = train(net, params, train_items, val_items, run_cfg,
                        mode=mode, metrics_path=metrics_path)
        candidate = RestartResult(r, history, params.copy_values())
        if best is None or history.best_val_loss < best.history.best_val_loss:
            best = candidate
    params = net.init_params(config.rng_seed + best.restart)
    params.load_values(best.values)
    return params, best


def train_bagged(net, train_items, val_items, config: TrainConfig,
                 size: int = DEFAULT_BAG_SIZE, mode: str = "text"):
    """Bootstrap bagging: each member sees a with-replacement resample."""
    config.validate()
    if config.rng_seed is None:
        raise ConfigError("training config needs a concrete rng_seed")
    if size < 1:
        raise ParameterError("bag size must be >= 1")
    members = []
    for b in range(size):
        rng = rng_for(STREAM_BOOTSTRAP, config.rng_seed, b)
        picks = rng.integers(0, len(train_items), size=len(train_items))
        sample = [train_items[i] for i in picks]
        params = net.init_params(config.rng_seed, restart=b)
        run_cfg = replace(config, rng_seed=config.rng_seed + b)
        train(net, params, sample, val_items, run_cfg, mode=mode)
        members.append(params)
    return members


def train_ensemble(net, train_items, val_items, config: TrainConfig,
                   size: int = DEFAULT_ENSEMBLE_SIZE, mode: str = "text"):
    """Fixed-data ensemble: members differ only in init and batch order."""
    config.validate()
    if config.rng_seed is None:
        raise ConfigError("training config needs a concrete rng_seed")
    if size < 1:
        raise ParameterError("ensemble size must be >= 1")
    members = []
    for e in range(size):
        params = net.init_params(config.rng_seed, restart=e)
        run_cfg = replace(config, rng_seed=config.rng_seed + e)
        train(net, params, train_items, val_items, run_cfg, mode=mode)
        members.append(params)
    return members


def ensemble_predict(net, members, item, mode: str = "text"):
    """Average the members' confidence vectors; argmax of the mean."""
    if not members:
        raise ParameterError("ensemble has no members")
    z = None
    for params in members:
        result = net.forward(params, item, mode)
        z = result.z.data.copy() if z is None else z + result.z.data
    z /= len(members)
    return int(np.argmax(z)), z


def ensemble_accuracy(net, members, items, mode: str = "text") -> float:
    if not items:
        raise ParameterError("cannot score an empty item list")
    hits = sum(
        1 for item in items
        if ensemble_predict(net, members, item, mode)[0] == item.correct_index
    )
    return hits / len(items)
