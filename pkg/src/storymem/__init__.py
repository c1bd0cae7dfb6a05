"""Convolutional read/write memory networks for story question answering.

The package is numpy end to end: a small tape-based autodiff core
(:mod:`storymem.tensor`), compact bilinear pooling and sentence fusion
(:mod:`storymem.fusion`), the memory model itself (:mod:`storymem.model`),
an Adagrad training loop (:mod:`storymem.training`), data formats and
synthetic tasks (:mod:`storymem.data`), and an experiment harness with a
CLI (:mod:`storymem.harness`, ``storymem``).  ``StoryMemQA`` wraps it
all in a scikit-learn style estimator.
"""

from .data import (
    Dataset,
    QAItem,
    StorySource,
    StoryStep,
    SyntheticTaskConfig,
    Vocabulary,
    generate_synthetic,
    load_qa,
    load_story_features,
    load_vocab,
    save_qa,
    save_story_features,
    save_vocab,
)
from .errors import (
    ConfigError,
    DataFormatError,
    EmptySentenceError,
    GradCheckError,
    NonFiniteError,
    ParameterError,
    ShapeError,
    StorymemError,
    TrainingDiverged,
    UsageError,
)
from .estimator import StoryMemQA
from .fusion import (
    CountSketchParams,
    EmbeddingTable,
    PositionEncoding,
    cbp,
    circular_convolve,
    count_sketch,
    embed_sentence,
    position_encode,
)
from .harness import (
    ExperimentConfig,
    Report,
    ablation_sweep,
    receptive_field_intervals,
    run_experiment,
    run_gradient_suite,
)
from .model import (
    MemNet,
    MemNetConfig,
    MemNetParams,
    load_checkpoint,
    load_params,
    save_checkpoint,
)
from .tensor import Tape, Tensor, grad_check, grad_check_params
from .training import TrainConfig, train, train_with_restarts

__version__ = "0.1.0"

__all__ = [
    "CountSketchParams",
    "ConfigError",
    "DataFormatError",
    "Dataset",
    "EmbeddingTable",
    "EmptySentenceError",
    "ExperimentConfig",
    "GradCheckError",
    "MemNet",
    "MemNetConfig",
    "MemNetParams",
    "NonFiniteError",
    "ParameterError",
    "PositionEncoding",
    "QAItem",
    "Report",
    "ShapeError",
    "StoryMemQA",
    "StorySource",
    "StoryStep",
    "StorymemError",
    "SyntheticTaskConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "UsageError",
    "Vocabulary",
    "ablation_sweep",
    "cbp",
    "circular_convolve",
    "count_sketch",
    "embed_sentence",
    "generate_synthetic",
    "grad_check",
    "grad_check_params",
    "load_checkpoint",
    "load_params",
    "load_qa",
    "load_story_features",
    "load_vocab",
    "position_encode",
    "receptive_field_intervals",
    "run_experiment",
    "run_gradient_suite",
    "save_checkpoint",
    "save_qa",
    "save_story_features",
    "save_vocab",
    "train",
    "train_with_restarts",
]
