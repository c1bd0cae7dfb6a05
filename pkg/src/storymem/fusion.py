"""Multimodal fusion: count sketches, compact bilinear pooling, and
position-weighted sentence embeddings.

Compact bilinear pooling (CBP) approximates the outer product of two
vectors by count-sketching both to a common dimension and circularly
convolving the sketches via FFT.  The sketch maps are frozen random
draws; gradients flow through them (transpose scatter / gather), never
into them.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import Vocabulary
from .errors import ConfigError, EmptySentenceError, ParameterError, ShapeError
from .rng import STREAM_SKETCH, STREAM_TABLE, STREAM_TEXT_PROJ, rng_for

# Dense scatter matrices are cached only while input*output stays modest.
_DENSE_SKETCH_LIMIT = 1 << 22


class CountSketchParams:
    """Frozen random count-sketch maps h: [p] -> [D] and s: [p] -> {-1, +1}."""

    __slots__ = ("input_dim", "output_dim", "index_map", "sign_map", "seed",
                 "_dense")

    def __init__(self, input_dim, output_dim, index_map, sign_map, seed=None):
        index_map = np.asarray(index_map, dtype=np.int64)
        sign_map = np.asarray(sign_map, dtype=np.float64)
        if input_dim < 1 or output_dim < 1:
            raise ParameterError("sketch dims must be positive")
        if index_map.shape != (input_dim,) or sign_map.shape != (input_dim,):
            raise ShapeError("sketch maps must have length input_dim")
        if index_map.size and (index_map.min() < 0 or index_map.max() >= output_dim):
            raise ParameterError("sketch index map out of range")
        if not np.all(np.isin(sign_map, (-1.0, 1.0))):
            raise ParameterError("sketch sign map must be +/-1")
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.index_map = index_map
        self.sign_map = sign_map
        self.seed = seed
        self._dense = {}

    @classmethod
    def generate(cls, input_dim, output_dim, *seed_key):
        """Maps fully determined by (input_dim, output_dim, seed_key)."""
        rng = rng_for(STREAM_SKETCH, *seed_key)
        h = rng.integers(0, output_dim, size=input_dim)
        s = rng.integers(0, 2, size=input_dim) * 2.0 - 1.0
        return cls(input_dim, output_dim, h, s, seed=tuple(seed_key))

    @classmethod
    def identity(cls, dim):
        """h(i) = i with all-positive signs; useful as a test fixture."""
        return cls(dim, dim, np.arange(dim), np.ones(dim))

    def dense_matrix(self, dtype):
        key = np.dtype(dtype).name
        mat = self._dense.get(key)
        if mat is None:
            mat = np.zeros((self.input_dim, self.output_dim), dtype=dtype)
            mat[np.arange(self.input_dim), self.index_map] = self.sign_map
            self._dense[key] = mat
        return mat


def count_sketch(x: T.Tensor, params: CountSketchParams) -> T.Tensor:
    """Sketch the last axis of x from input_dim down/up to output_dim."""
    if x.ndim not in (1, 2) or x.shape[-1] != params.input_dim:
        raise ShapeError(
            f"count_sketch expects (..., {params.input_dim}), got {x.shape}"
        )
    xd = x.data
    h, s = params.index_map, params.sign_map
    if params.input_dim * params.output_dim <= _DENSE_SKETCH_LIMIT:
        out = xd @ params.dense_matrix(xd.dtype)
    else:
        out = np.zeros(xd.shape[:-1] + (params.output_dim,), dtype=xd.dtype)
        signed = xd * s
        if xd.ndim == 1:
            np.add.at(out, h, signed)
        else:
            rows = np.arange(xd.shape[0])[:, None]
            np.add.at(out, (rows, h[None, :]), signed)

    def backward(g):
        return ((g[..., h] * s).astype(g.dtype),)

    return T._op("count_sketch", out, (x,), backward)


def circular_convolve(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Circular convolution along the last axis, computed in Fourier space.

    ``a`` may carry one leading batch axis; ``b`` is either a single
    vector (broadcast over the batch) or matches ``a`` row for row.
    """
    D = a.shape[-1]
    if b.shape[-1] != D:
        raise ShapeError(f"circular_convolve length mismatch: {a.shape}, {b.shape}")
    if b.ndim != 1 and b.shape != a.shape:
        raise ShapeError("second operand must be 1-D or match the first")
    fa = np.fft.rfft(a.data, axis=-1)
    fb = np.fft.rfft(b.data, axis=-1)
    out = np.fft.irfft(fa * fb, n=D, axis=-1).astype(a.data.dtype)
    batched_b = b.ndim > 1

    def backward(g):
        fg = np.fft.rfft(g, axis=-1)
        ga = gb = None
        if a.requires_grad:
            ga = np.fft.irfft(fg * np.conj(fb), n=D, axis=-1).astype(g.dtype)
        if b.requires_grad:
            prod = fg * np.conj(fa)
            if not batched_b and prod.ndim > 1:
                prod = prod.sum(axis=0)
            gb = np.fft.irfft(prod, n=D, axis=-1).astype(g.dtype)
        return ga, gb

    return T._op("circular_convolve", out, (a, b), backward)


def cbp(x: T.Tensor, y: T.Tensor, params_x: CountSketchParams,
        params_y: CountSketchParams) -> T.Tensor:
    """Compact bilinear pooling of x and y to the shared sketch dimension.

    Linear in each argument with the other held fixed.  ``x`` may be a
    batch of rows; ``y`` is a single vector or a matching batch.
    """
    if params_x.output_dim != params_y.output_dim:
        raise ShapeError(
            f"sketch output dims differ: {params_x.output_dim} vs {params_y.output_dim}"
        )
    return circular_convolve(count_sketch(x, params_x), count_sketch(y, params_y))


# ---------------------------------------------------------------------------
# position-weighted sentence encoding


class PositionEncoding:
    """Per-position weight matrices l[j, k] = (1 - j/J) - (k/d)(1 - 2j/J).

    Indices are 1-based in the formula; a sentence of J tokens with
    d-dimensional word vectors is encoded as sum_j l[j] * w[j].  Weight
    matrices are cached per observed sentence length.
    """

    def __init__(self, dim: int, max_length: int | None = None):
        if dim < 1:
            raise ParameterError("embedding dim must be positive")
        self.dim = dim
        self.max_length = max_length
        self._cache = {}

    def weights(self, length: int) -> np.ndarray:
        if length < 1:
            raise EmptySentenceError("position weights need at least one token")
        if self.max_length is not None and length > self.max_length:
            raise ParameterError(
                f"sentence length {length} exceeds maximum {self.max_length}"
            )
        mat = self._cache.get(length)
        if mat is None:
            j = np.arange(1, length + 1, dtype=np.float64)[:, None] / length
            k = np.arange(1, self.dim + 1, dtype=np.float64)[None, :] / self.dim
            mat = (1.0 - j) - k * (1.0 - 2.0 * j)
            self._cache[length] = mat
        return mat


def position_encode(word_rows: np.ndarray, pe: PositionEncoding) -> np.ndarray:
    """Order-aware sum over rows of a (J, d) matrix of word vectors."""
    word_rows = np.asarray(word_rows)
    if word_rows.ndim != 2 or word_rows.shape[1] != pe.dim:
        raise ShapeError(f"expected (J, {pe.dim}) word rows, got {word_rows.shape}")
    if word_rows.shape[0] == 0:
        raise EmptySentenceError("cannot encode an empty sentence")
    w = pe.weights(word_rows.shape[0])
    return (w * word_rows).sum(axis=0)


def position_encode_t(word_rows: T.Tensor, pe: PositionEncoding) -> T.Tensor:
    """Differentiable twin of :func:`position_encode` for trainable tables."""
    if word_rows.ndim != 2 or word_rows.shape[1] != pe.dim:
        raise ShapeError(f"expected (J, {pe.dim}) word rows, got {word_rows.shape}")
    if word_rows.shape[0] == 0:
        raise EmptySentenceError("cannot encode an empty sentence")
    w = T.constant(pe.weights(word_rows.shape[0]), dtype=word_rows.dtype)
    return T.sum_over_axis(T.mul(word_rows, w), axis=0)


# ---------------------------------------------------------------------------
# word embedding table


class EmbeddingTable:
    """Token-id -> vector table.

    Default rows are frozen draws keyed by (seed, token id), so the same
    token always re-derives the same vector regardless of vocabulary
    size.  With ``trainable=True`` the table is one Glorot-initialised
    parameter matrix updated by the optimizer.
    """

    def __init__(self, vocab: Vocabulary, dim: int = 300, trainable: bool = False,
                 seed: int = 0, dtype=np.float64):
        if dim < 1:
            raise ParameterError("embedding dim must be positive")
        self.vocab = vocab
        self.dim = int(dim)
        self.trainable = bool(trainable)
        self.seed = int(seed)
        if trainable:
            bound = np.sqrt(6.0 / (len(vocab) + dim))
            rows = rng_for(STREAM_TABLE, seed).uniform(-bound, bound,
                                                       size=(len(vocab), dim))
        else:
            rows = np.empty((len(vocab), dim))
            for i in range(len(vocab)):
                rng = rng_for(STREAM_TABLE, seed, i)
                rows[i] = rng.standard_normal(dim) / np.sqrt(dim)
        self.matrix = T.Tensor(rows.astype(dtype), requires_grad=trainable)

    def ids(self, tokens) -> np.ndarray:
        return self.vocab.ids(tokens)

    def rows(self, tokens) -> np.ndarray:
        return self.matrix.data[self.ids(tokens)]


def embed_sentence(tokens, table: EmbeddingTable, pe: PositionEncoding) -> np.ndarray:
    """Position-weighted sentence vector; unknown tokens hit row 0."""
    tokens = tuple(tokens)
    if not tokens:
        raise EmptySentenceError("cannot embed an empty sentence")
    return position_encode(table.rows(tokens), pe)


def embed_sentence_t(tokens, table: EmbeddingTable, pe: PositionEncoding) -> T.Tensor:
    tokens = tuple(tokens)
    if not tokens:
        raise EmptySentenceError("cannot embed an empty sentence")
    rows = T.take_rows(table.matrix, table.ids(tokens))
    return position_encode_t(rows, pe)


# ---------------------------------------------------------------------------
# visual pooling and the story embedding matrix


def embed_subshot(frames) -> np.ndarray:
    """Mean over frames; spatial feature maps are also mean-pooled to a vector."""
    frames = list(frames)
    if not frames:
        raise ShapeError("subshot with no frames")
    arrays = [np.asarray(f, dtype=np.float64) for f in frames]
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise ShapeError(f"inconsistent frame shapes {shape} vs {a.shape}")
    pooled = np.mean(arrays, axis=0)
    if pooled.ndim == 3:
        pooled = pooled.mean(axis=(0, 1))
    elif pooled.ndim != 1:
        raise ShapeError(f"frames must be vectors or 3-d maps, got rank {pooled.ndim}")
    return pooled


def text_projection_matrix(word_dim: int, target_dim: int, seed: int) -> np.ndarray:
    """Frozen random projection used when the CBP dim is below the word dim."""
    rng = rng_for(STREAM_TEXT_PROJ, seed)
    return rng.standard_normal((word_dim, target_dim)) / np.sqrt(word_dim)


def lift_text_vector(vec: np.ndarray, target_dim: int,
                     projection: np.ndarray | None) -> np.ndarray:
    """Zero-pad a sentence vector up to target_dim, or project it down."""
    d = vec.shape[-1]
    if d == target_dim:
        return vec
    if d < target_dim:
        out = np.zeros(vec.shape[:-1] + (target_dim,), dtype=vec.dtype)
        out[..., :d] = vec
        return out
    if projection is None:
        raise ConfigError(
            f"text dim {d} exceeds target {target_dim}; a projection is required"
        )
    return vec @ projection.astype(vec.dtype)


class MovieEmbedding:
    """Story embedding matrix: one fused row per story step."""

    __slots__ = ("matrix", "mode")

    def __init__(self, matrix: np.ndarray, mode: str):
        self.matrix = matrix
        self.mode = mode

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def build_movie_embedding(story, table: EmbeddingTable, pe: PositionEncoding,
                          cbp_dim: int, mode: str,
                          sketch_visual: CountSketchParams | None = None,
                          sketch_text: CountSketchParams | None = None,
                          text_projection: np.ndarray | None = None,
                          dtype=np.float64) -> MovieEmbedding:
    """Fuse each story step into one cbp_dim row.

    In text mode the sentence vector is zero-padded (or projected) to
    cbp_dim; in multimodal mode the visual vector and sentence vector are
    compact-bilinear pooled.
    """
    sentences = np.stack(
        [embed_sentence(step.sentence, table, pe) for step in story.steps]
    ).astype(dtype)
    if mode == "text":
        rows = lift_text_vector(sentences, cbp_dim, text_projection)
        return MovieEmbedding(np.ascontiguousarray(rows, dtype=dtype), mode)
    if mode != "multimodal":
        raise ConfigError(f"unknown embedding mode {mode!r}")
    if story.modality != "multimodal":
        raise ConfigError(
            f"story {story.story_id!r} has no visual features for multimodal mode"
        )
    if sketch_visual is None or sketch_text is None:
        raise ConfigError("multimodal mode needs both sketch parameter sets")
    if sketch_visual.output_dim != cbp_dim or sketch_text.output_dim != cbp_dim:
        raise ConfigError("sketch output dims must equal cbp_dim")
    visuals = np.stack([
        embed_subshot([step.visual]) for step in story.steps
    ]).astype(dtype)
    fused = cbp(T.constant(visuals, dtype=dtype), T.constant(sentences, dtype=dtype),
                sketch_visual, sketch_text)
    return MovieEmbedding(fused.data, mode)
