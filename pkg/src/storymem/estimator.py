"""Scikit-learn style facade over the memory network.

``StoryMemQA`` hides the config/params/tape plumbing behind fit/predict
for users who just want a five-way story QA classifier.  X is either a
:class:`~storymem.data.Dataset`, a ``(stories, items)`` pair, or a list
of ``(StorySource, QAItem)`` tuples; y is optional and overrides the
items' own ``correct_index`` labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Dataset, QAItem, StorySource, Vocabulary
from .errors import ConfigError, ParameterError
from .fusion import EmbeddingTable
from .model import MemNet, MemNetConfig
from .rng import STREAM_HOLDOUT, rng_for
from .training import TrainConfig, accuracy, train, train_with_restarts


def _coerce(X, y=None):
    """Normalise supported input forms to (stories dict, items list)."""
    if isinstance(X, Dataset):
        stories, items = dict(X.stories), list(X.items)
    elif isinstance(X, tuple) and len(X) == 2 and isinstance(X[0], dict):
        stories, items = dict(X[0]), list(X[1])
    else:
        stories, items = {}, []
        for pair in X:
            story, item = pair
            if not isinstance(story, StorySource) or not isinstance(item, QAItem):
                raise ParameterError(
                    "expected (StorySource, QAItem) pairs, a (stories, items) "
                    "tuple, or a Dataset"
                )
            stories[story.story_id] = story
            items.append(item)
    if not items:
        raise ParameterError("no QA items given")
    for item in items:
        if item.story_id not in stories:
            raise ParameterError(
                f"item {item.item_id!r} references missing story {item.story_id!r}"
            )
    if y is not None:
        labels = np.asarray(y, dtype=np.int64)
        if labels.shape != (len(items),):
            raise ParameterError(
                f"y has shape {labels.shape}, expected ({len(items)},)"
            )
        relabelled = []
        for item, label in zip(items, labels):
            relabelled.append(QAItem(
                item_id=item.item_id,
                story_id=item.story_id,
                question=item.question,
                answers=item.answers,
                correct_index=int(label),
                gt_span=item.gt_span,
            ))
        items = relabelled
    return stories, items


def _collect_tokens(stories, items):
    for story in stories.values():
        for step in story.steps:
            yield from step.sentence
    for item in items:
        yield from item.question
        for answer in item.answers:
            yield from answer


class StoryMemQA(BaseEstimator):
    """Five-way multiple-choice story QA with a convolutional memory.

    The defaults fit desk-scale data (hundreds of short stories) in
    minutes on a CPU.  ``restarts > 1`` trains that many independent
    initialisations and keeps the best validation loss.
    """

    def __init__(self, proj_dim=32, cbp_dim=128, word_dim=300,
                 write_layers=((8, 4, 3),), read_layers=((3, 1, 3),),
                 variant="full", attention_norm="joint", modality="text",
                 table_mode="hash", learning_rate=0.001,
                 initial_accumulator=0.1, batch_size=32, max_epochs=200,
                 patience=10, restarts=1, validation_fraction=0.15,
                 seed=0, precision=64):
        self.proj_dim = proj_dim
        self.cbp_dim = cbp_dim
        self.word_dim = word_dim
        self.write_layers = write_layers
        self.read_layers = read_layers
        self.variant = variant
        self.attention_norm = attention_norm
        self.modality = modality
        self.table_mode = table_mode
        self.learning_rate = learning_rate
        self.initial_accumulator = initial_accumulator
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.restarts = restarts
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.precision = precision

    # -- config assembly ---------------------------------------------------

    def _model_config(self) -> MemNetConfig:
        cfg = MemNetConfig(
            proj_dim=self.proj_dim,
            cbp_dim=self.cbp_dim,
            word_dim=self.word_dim,
            write_layers=tuple(tuple(t) for t in self.write_layers),
            read_layers=tuple(tuple(t) for t in self.read_layers),
            variant=self.variant,
            attention_norm=self.attention_norm,
            seed=int(self.seed),
        )
        cfg.validate()
        return cfg

    def _train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            adagrad_initial_accumulator=self.initial_accumulator,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            early_stop_patience=self.patience,
            restarts=self.restarts,
            rng_seed=int(self.seed),
        )
        cfg.validate()
        return cfg

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None):
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in (0, 1)")
        if self.table_mode not in ("hash", "trainable"):
            raise ConfigError(f"unknown table mode {self.table_mode!r}")
        if self.modality not in ("text", "multimodal"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        stories, items = _coerce(X, y)
        for item in items:
            if item.correct_index is None:
                raise ParameterError(
                    f"item {item.item_id!r} has no label; pass y or set "
                    "correct_index"
                )
        if len(items) < 2:
            raise ParameterError("need at least 2 labelled items to hold out "
                                 "a validation split")
        if isinstance(X, Dataset):
            vocab = X.vocab
        else:
            vocab = Vocabulary.from_token_stream(_collect_tokens(stories, items))

        model_cfg = self._model_config()
        train_cfg = self._train_config()
        dtype = np.float32 if self.precision == 32 else np.float64
        table = EmbeddingTable(vocab, dim=model_cfg.word_dim,
                               trainable=(self.table_mode == "trainable"),
                               seed=model_cfg.seed, dtype=dtype)
        first_story = next(iter(stories.values()))
        net = MemNet(model_cfg, table, visual_dim=first_story.visual_dim or 1,
                     dtype=dtype)
        prepared = net.prepare(stories, items, self.modality)

        order = rng_for(STREAM_HOLDOUT, int(self.seed)).permutation(len(prepared))
        n_val = max(1, int(round(self.validation_fraction * len(prepared))))
        n_val = min(n_val, len(prepared) - 1)
        val_items = [prepared[i] for i in order[:n_val]]
        train_items = [prepared[i] for i in order[n_val:]]

        if train_cfg.restarts > 1:
            params, best = train_with_restarts(net, train_items, val_items,
                                               train_cfg, mode=self.modality)
            history = best.history
        else:
            params = net.init_params(train_cfg.rng_seed)
            history = train(net, params, train_items, val_items, train_cfg,
                            mode=self.modality)
        self.vocab_ = vocab
        self.table_ = table
        self.net_ = net
        self.params_ = params
        self.history_ = history
        self.n_train_items_ = len(train_items)
        self.n_val_items_ = len(val_items)
        self.classes_ = np.arange(5)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(
                "this StoryMemQA instance is not fitted yet; call fit first"
            )

    def _prepare(self, X):
        stories, items = _coerce(X)
        return self.net_.prepare(stories, items, self.modality)

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        prepared = self._prepare(X)
        return np.array([
            self.net_.predict(self.params_, item, self.modality).predicted
            for item in prepared
        ], dtype=np.int64)

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        prepared = self._prepare(X)
        return np.stack([
            self.net_.forward(self.params_, item, self.modality).z.data
            for item in prepared
        ])

    def score(self, X, y=None) -> float:
        self._check_fitted()
        stories, items = _coerce(X, y)
        for item in items:
            if item.correct_index is None:
                raise ParameterError("cannot score unlabelled items")
        prepared = self.net_.prepare(stories, items, self.modality)
        return accuracy(self.net_, self.params_, prepared, self.modality)
