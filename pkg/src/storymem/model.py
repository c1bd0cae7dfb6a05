"""Convolutional read/write memory network for multiple-choice story QA.

Pipeline: story steps are fused into an embedding matrix, projected and
convolved into memory slots (write), bound to the question by compact
bilinear pooling (query-dependent memory), convolved again (read),
attended with the question vector, and the attended readout is blended
with the question to score five candidate answers.

Ablation variants:

* ``full``       - the whole pipeline
* ``no_rw``      - no write/read convolutions (flat projected memory)
* ``no_read``    - write convolutions only
* ``no_query``   - skip the question binding of memory
* ``no_video``   - full pipeline on text-only story embeddings
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import fusion
from . import tensor as T
from .data import StorySource
from .errors import ConfigError, DataFormatError, ShapeError
from .fusion import CountSketchParams, EmbeddingTable, PositionEncoding
from .rng import STREAM_INIT, rng_for
from .tensor import Tensor, same_output_length

VARIANT_FULL = "full"
VARIANT_NO_RW = "no_rw"
VARIANT_NO_READ = "no_read"
VARIANT_NO_QUERY = "no_query"
VARIANT_NO_VIDEO = "no_video"
VARIANTS = (VARIANT_FULL, VARIANT_NO_RW, VARIANT_NO_READ,
            VARIANT_NO_QUERY, VARIANT_NO_VIDEO)

ATTENTION_JOINT = "joint"
ATTENTION_PER_CHANNEL = "per_channel"

CHECKPOINT_MAGIC = b"SMEMCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class MemNetConfig:
    """Structural description of one model.

    ``write_layers`` / ``read_layers`` are (filter_height, stride,
    out_channels) tuples; filters always span the full feature width d
    with horizontal stride 1 under SAME padding, so the width survives
    each layer.  ``seed`` pins the frozen randomness (sketch maps, hash
    embeddings, text projection).
    """

    proj_dim: int = 300
    cbp_dim: int = 4096
    word_dim: int = 300
    write_layers: tuple = ((40, 30, 3),)
    read_layers: tuple = ((3, 1, 3),)
    variant: str = VARIANT_FULL
    attention_norm: str = ATTENTION_JOINT
    alpha_init: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.write_layers = tuple(tuple(int(v) for v in t) for t in self.write_layers)
        self.read_layers = tuple(tuple(int(v) for v in t) for t in self.read_layers)

    def validate(self):
        if self.proj_dim < 1 or self.cbp_dim < 1 or self.word_dim < 1:
            raise ConfigError("dims must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.attention_norm not in (ATTENTION_JOINT, ATTENTION_PER_CHANNEL):
            raise ConfigError(f"unknown attention norm {self.attention_norm!r}")
        for kind, layers in (("write", self.write_layers), ("read", self.read_layers)):
            if not layers and kind == "write":
                raise ConfigError("at least one write layer is required")
            for t in layers:
                if len(t) != 3:
                    raise ConfigError(f"{kind} layer {t} must be (filter, stride, channels)")
                f, s, c = t
                if f < 1 or s < 1 or c < 1:
                    raise ConfigError(f"{kind} layer {t} has non-positive entries")

    def resolved(self, fallback_seed: int) -> "MemNetConfig":
        if self.seed is None:
            return replace(self, seed=int(fallback_seed))
        return self

    # -- derived structure -------------------------------------------------

    @property
    def uses_write_convs(self) -> bool:
        return self.variant != VARIANT_NO_RW

    @property
    def uses_read_convs(self) -> bool:
        return self.variant not in (VARIANT_NO_RW, VARIANT_NO_READ)

    @property
    def uses_query_binding(self) -> bool:
        return self.variant != VARIANT_NO_QUERY

    @property
    def write_channels(self) -> int:
        return self.write_layers[-1][2] if self.uses_write_convs else 1

    @property
    def read_channels(self) -> int:
        return self.read_layers[-1][2] if self.uses_read_convs else self.write_channels

    def memory_slots(self, n: int) -> int:
        if not self.uses_write_convs:
            return n
        for _f, s, _c in self.write_layers:
            n = same_output_length(n, s)
        return n

    def read_slots(self, n: int) -> int:
        m = self.memory_slots(n)
        if self.uses_read_convs:
            for _f, s, _c in self.read_layers:
                m = same_output_length(m, s)
        return m

    def effective_conv_layers(self) -> list:
        """(filter, stride) pairs of the conv layers this variant applies."""
        layers = []
        if self.uses_write_convs:
            layers += [(f, s) for f, s, _c in self.write_layers]
        if self.uses_read_convs:
            layers += [(f, s) for f, s, _c in self.read_layers]
        return layers

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "proj_dim": self.proj_dim,
            "cbp_dim": self.cbp_dim,
            "word_dim": self.word_dim,
            "write_layers": [list(t) for t in self.write_layers],
            "read_layers": [list(t) for t in self.read_layers],
            "variant": self.variant,
            "attention_norm": self.attention_norm,
            "alpha_init": self.alpha_init,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemNetConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    def digest(self) -> bytes:
        canon = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(canon).digest()


@dataclass
class MemNetParams:
    """Trainable tensors, addressable by stable names for checkpoints."""

    story_proj_w: Tensor
    story_proj_b: Tensor
    query_proj_w: Tensor
    query_proj_b: Tensor
    blend_raw: Tensor
    write_filters: list = field(default_factory=list)
    write_biases: list = field(default_factory=list)
    read_filters: list = field(default_factory=list)
    read_biases: list = field(default_factory=list)
    word_rows: Tensor | None = None

    def named(self) -> dict:
        out = {
            "story_proj_w": self.story_proj_w,
            "story_proj_b": self.story_proj_b,
        }
        for i, (f, b) in enumerate(zip(self.write_filters, self.write_biases)):
            out[f"write.{i}.filter"] = f
            out[f"write.{i}.bias"] = b
        for i, (f, b) in enumerate(zip(self.read_filters, self.read_biases)):
            out[f"read.{i}.filter"] = f
            out[f"read.{i}.bias"] = b
        out["query_proj_w"] = self.query_proj_w
        out["query_proj_b"] = self.query_proj_b
        out["blend_raw"] = self.blend_raw
        if self.word_rows is not None:
            out["word_rows"] = self.word_rows
        return out

    def tensors(self) -> list:
        return list(self.named().values())

    def zero_grads(self):
        for t in self.tensors():
            t.zero_grad()

    def copy_values(self) -> dict:
        return {name: t.data.copy() for name, t in self.named().items()}

    def load_values(self, values: dict):
        named = self.named()
        if set(values) != set(named):
            missing = set(named) - set(values)
            extra = set(values) - set(named)
            raise DataFormatError(
                f"parameter names mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, arr in values.items():
            t = named[name]
            if t.data.shape != arr.shape:
                raise ShapeError(
                    f"parameter {name!r} shape {arr.shape} != expected {t.data.shape}"
                )
            t.data[...] = arr


def init_params(config: MemNetConfig, init_seed: int, restart: int = 0,
                table: EmbeddingTable | None = None, dtype=np.float64) -> MemNetParams:
    """Glorot-uniform weights, zero biases, blend logit at its configured init."""
    from .training import xavier_init  # local import; training depends on tensor only

    config.validate()
    rng = rng_for(STREAM_INIT, init_seed, restart)
    d = config.proj_dim

    def leaf(arr):
        return Tensor(arr.astype(dtype), requires_grad=True)

    params = MemNetParams(
        story_proj_w=leaf(xavier_init((config.cbp_dim, d), rng)),
        story_proj_b=leaf(np.zeros(d)),
        query_proj_w=leaf(xavier_init((config.word_dim, d), rng)),
        query_proj_b=leaf(np.zeros(d)),
        blend_raw=leaf(np.asarray(float(config.alpha_init))),
    )
    if config.uses_write_convs:
        c_in = 1
        for f, _s, c_out in config.write_layers:
            params.write_filters.append(leaf(xavier_init((f, d, c_in, c_out), rng)))
            params.write_biases.append(leaf(np.zeros(c_out)))
            c_in = c_out
    if config.uses_read_convs:
        c_in = config.write_channels
        for f, _s, c_out in config.read_layers:
            params.read_filters.append(leaf(xavier_init((f, d, c_in, c_out), rng)))
            params.read_biases.append(leaf(np.zeros(c_out)))
            c_in = c_out
    if table is not None and table.trainable:
        params.word_rows = table.matrix
    return params


# ---------------------------------------------------------------------------
# pipeline stages


def write_memory(embedding: Tensor, params: MemNetParams,
                 config: MemNetConfig) -> Tensor:
    """Project story rows to width d and convolve them into memory slots."""
    if embedding.ndim != 2 or embedding.shape[1] != config.cbp_dim:
        raise ShapeError(
            f"story embedding must be (n, {config.cbp_dim}), got {embedding.shape}"
        )
    n = embedding.shape[0]
    if n < 1:
        raise ShapeError("story embedding has no rows")
    proj = T.affine(embedding, params.story_proj_w, params.story_proj_b)
    mem = T.reshape(proj, (n, config.proj_dim, 1))
    if not config.uses_write_convs:
        return mem
    for (f, s, _c), filt, bias in zip(config.write_layers, params.write_filters,
                                      params.write_biases):
        mem = T.relu(T.conv2d_same(mem, filt, bias, (s, 1)))
    return mem


def embed_question(question_vec: Tensor, params: MemNetParams,
                   config: MemNetConfig) -> Tensor:
    """Project a position-encoded sentence vector into the d-dim query space."""
    if question_vec.ndim != 1 or question_vec.shape[0] != config.word_dim:
        raise ShapeError(
            f"question vector must be ({config.word_dim},), got {question_vec.shape}"
        )
    row = T.reshape(question_vec, (1, config.word_dim))
    u = T.affine(row, params.query_proj_w, params.query_proj_b)
    return T.reshape(u, (config.proj_dim,))


def query_dependent_memory(memory: Tensor, u: Tensor,
                           sketch_memory: CountSketchParams,
                           sketch_query: CountSketchParams,
                           config: MemNetConfig) -> Tensor:
    """Bind every memory slot/channel to the question via CBP."""
    if not config.uses_query_binding:
        return memory
    m, d, c = memory.shape
    if d != config.proj_dim:
        raise ShapeError(f"memory width {d} != proj dim {config.proj_dim}")
    if sketch_memory.input_dim != d or sketch_query.input_dim != d \
            or sketch_memory.output_dim != d or sketch_query.output_dim != d:
        raise ConfigError("query-binding sketches must map d -> d")
    rows = T.reshape(T.transpose(memory, (0, 2, 1)), (m * c, d))
    bound = fusion.cbp(rows, u, sketch_memory, sketch_query)
    return T.transpose(T.reshape(bound, (m, c, d)), (0, 2, 1))


def read_memory(query_memory: Tensor, params: MemNetParams,
                config: MemNetConfig) -> Tensor:
    """Convolve the question-bound memory into the final read slots."""
    mem = query_memory
    if not config.uses_read_convs:
        return mem
    for (f, s, _c), filt, bias in zip(config.read_layers, params.read_filters,
                                      params.read_biases):
        mem = T.relu(T.conv2d_same(mem, filt, bias, (s, 1)))
    return mem


def attend(read_mem: Tensor, u: Tensor, config: MemNetConfig) -> Tensor:
    """Attention weights over (slot, channel) cells.

    Joint mode normalises over all cells (weights sum to 1); per-channel
    mode normalises each channel's column separately.
    """
    scores = T.mode1_dot(read_mem, u)
    if config.attention_norm == ATTENTION_JOINT:
        return T.softmax(scores, axis=None)
    return T.softmax(scores, axis=0)


def output_vector(read_mem: Tensor, attention: Tensor,
                  config: MemNetConfig) -> Tensor:
    """Attention-weighted mix of read-memory columns (convex either way)."""
    out = T.weighted_slot_sum(read_mem, attention)
    if config.attention_norm == ATTENTION_PER_CHANNEL:
        out = T.scale(out, 1.0 / read_mem.shape[2])
    return out


def score_answers(o: Tensor, u: Tensor, answer_vecs: Tensor,
                  params: MemNetParams, config: MemNetConfig):
    """Blend readout with the question and softmax against answer embeddings.

    Answers share the question projection.  Returns (z, g, y): confidence
    distribution, embedded answers, and the argmax index (ties break low).
    """
    if answer_vecs.ndim != 2 or answer_vecs.shape[1] != config.word_dim:
        raise ShapeError(
            f"answers must be (k, {config.word_dim}), got {answer_vecs.shape}"
        )
    g = T.affine(answer_vecs, params.query_proj_w, params.query_proj_b)
    alpha = T.sigmoid(params.blend_raw)
    one = T.constant(1.0, dtype=o.dtype)
    blend = T.add(T.mul(alpha, o), T.mul(T.sub(one, alpha), u))
    logits = T.matvec(g, blend)
    z = T.softmax(logits, axis=None)
    y = int(np.argmax(z.data))
    return z, g, y


# ---------------------------------------------------------------------------
# prepared items and the orchestrating model


@dataclass
class PreparedItem:
    """Numeric view of one QA item (frozen-table fast path)."""

    item_id: str
    story_id: str
    embedding: np.ndarray
    question_vec: np.ndarray
    answer_vecs: np.ndarray
    correct_index: int | None
    question_type: str
    gt_span: tuple | None
    n_steps: int
    question_tokens: tuple = ()
    answer_tokens: tuple = ()
    story: StorySource | None = None


@dataclass
class ForwardResult:
    z: Tensor
    y: int
    attention: Tensor
    memory: Tensor
    query_memory: Tensor
    read_memory: Tensor
    u: Tensor
    o: Tensor


@dataclass
class Prediction:
    item_id: str
    predicted: int
    confidence: np.ndarray
    attention: np.ndarray
    memory_slots: int
    read_slots: int


class MemNet:
    """Config + frozen randomness + the forward/loss pipeline.

    Parameters are passed explicitly to every call so that restarts and
    ensemble members can share one MemNet (same sketches, same table).
    """

    def __init__(self, config: MemNetConfig, table: EmbeddingTable,
                 visual_dim: int = 2048, dtype=np.float64):
        config.validate()
        if config.seed is None:
            raise ConfigError("model config needs a concrete seed (use resolved())")
        if table.dim != config.word_dim:
            raise ConfigError(
                f"embedding table dim {table.dim} != config word_dim {config.word_dim}"
            )
        self.config = config
        self.table = table
        self.dtype = np.dtype(dtype).type
        self.pe = PositionEncoding(config.word_dim)
        d = config.proj_dim
        self.sketch_memory = CountSketchParams.generate(d, d, config.seed, 1)
        self.sketch_query = CountSketchParams.generate(d, d, config.seed, 2)
        self.visual_dim = int(visual_dim)
        self.sketch_visual = CountSketchParams.generate(
            self.visual_dim, config.cbp_dim, config.seed, 3)
        self.sketch_text = CountSketchParams.generate(
            config.word_dim, config.cbp_dim, config.seed, 4)
        self.text_projection = None
        if config.cbp_dim < config.word_dim:
            self.text_projection = fusion.text_projection_matrix(
                config.word_dim, config.cbp_dim, config.seed)
        self._story_cache = {}

    def init_params(self, init_seed: int, restart: int = 0) -> MemNetParams:
        return init_params(self.config, init_seed, restart=restart,
                           table=self.table, dtype=self.dtype)

    # -- embedding-side preparation ---------------------------------------

    def encode_story(self, story: StorySource, mode: str) -> np.ndarray:
        if self.config.variant == VARIANT_NO_VIDEO:
            mode = "text"
        key = (story.story_id, mode)
        if not self.table.trainable and key in self._story_cache:
            return self._story_cache[key]
        emb = fusion.build_movie_embedding(
            story, self.table, self.pe, self.config.cbp_dim, mode,
            sketch_visual=self.sketch_visual, sketch_text=self.sketch_text,
            text_projection=self.text_projection, dtype=self.dtype,
        ).matrix
        if not self.table.trainable:
            self._story_cache[key] = emb
        return emb

    def prepare(self, stories: dict, items, mode: str = "text") -> list:
        """Precompute per-item numeric inputs (embeddings, PE vectors)."""
        prepared = []
        for item in items:
            story = stories[item.story_id]
            emb = self.encode_story(story, mode)
            qv = fusion.embed_sentence(item.question, self.table, self.pe)
            av = np.stack([
                fusion.embed_sentence(a, self.table, self.pe) for a in item.answers
            ])
            prepared.append(PreparedItem(
                item_id=item.item_id,
                story_id=item.story_id,
                embedding=emb,
                question_vec=qv.astype(self.dtype),
                answer_vecs=av.astype(self.dtype),
                correct_index=item.correct_index,
                question_type=item.question_type,
                gt_span=item.gt_span,
                n_steps=story.n,
                question_tokens=item.question,
                answer_tokens=item.answers,
                story=story,
            ))
        return prepared

    # -- forward / loss ----------------------------------------------------

    def _inputs_for(self, item: PreparedItem, mode: str):
        """Constant tensors in frozen mode; differentiable in trainable mode."""
        if not self.table.trainable:
            return (
                T.constant(item.embedding, dtype=self.dtype),
                T.constant(item.question_vec, dtype=self.dtype),
                T.constant(item.answer_vecs, dtype=self.dtype),
            )
        story = item.story
        if story is None:
            raise ShapeError("trainable-table forward needs the source story")
        sent = T.stack_rows([
            fusion.embed_sentence_t(step.sentence, self.table, self.pe)
            for step in story.steps
        ])
        use_mode = "text" if self.config.variant == VARIANT_NO_VIDEO else mode
        if use_mode == "multimodal":
            visuals = np.stack([fusion.embed_subshot([s.visual]) for s in story.steps])
            emb = fusion.cbp(T.constant(visuals.astype(self.dtype), dtype=self.dtype),
                             sent, self.sketch_visual, self.sketch_text)
        else:
            d_w, target = self.config.word_dim, self.config.cbp_dim
            if target > d_w:
                pad = T.constant(
                    np.zeros((story.n, target - d_w)), dtype=self.dtype)
                emb = _concat_cols(sent, pad)
            elif target == d_w:
                emb = sent
            else:
                proj = T.constant(self.text_projection, dtype=self.dtype)
                emb = T.matmul(sent, proj)
        qv = fusion.embed_sentence_t(item.question_tokens, self.table, self.pe)
        av = T.stack_rows([
            fusion.embed_sentence_t(a, self.table, self.pe)
            for a in item.answer_tokens
        ])
        return emb, qv, av

    def forward(self, params: MemNetParams, item: PreparedItem,
                mode: str = "text") -> ForwardResult:
        emb, qv, av = self._inputs_for(item, mode)
        cfg = self.config
        mem = write_memory(emb, params, cfg)
        u = embed_question(qv, params, cfg)
        qmem = query_dependent_memory(mem, u, self.sketch_memory,
                                      self.sketch_query, cfg)
        rmem = read_memory(qmem, params, cfg)
        attention = attend(rmem, u, cfg)
        o = output_vector(rmem, attention, cfg)
        z, _g, y = score_answers(o, u, av, params, cfg)
        return ForwardResult(z=z, y=y, attention=attention, memory=mem,
                             query_memory=qmem, read_memory=rmem, u=u, o=o)

    def item_loss(self, params: MemNetParams, item: PreparedItem,
                  mode: str = "text"):
        from .training import cross_entropy

        if item.correct_index is None:
            raise ShapeError(f"item {item.item_id!r} has no labelled answer")
        result = self.forward(params, item, mode)
        return cross_entropy(result.z, item.correct_index), result

    def batch_loss(self, params: MemNetParams, items, mode: str = "text"):
        if not items:
            raise ShapeError("empty batch")
        total = None
        results = []
        for item in items:
            loss, result = self.item_loss(params, item, mode)
            results.append(result)
            total = loss if total is None else T.add(total, loss)
        return T.scale(total, 1.0 / len(items)), results

    def predict(self, params: MemNetParams, item: PreparedItem,
                mode: str = "text") -> Prediction:
        result = self.forward(params, item, mode)
        return Prediction(
            item_id=item.item_id,
            predicted=result.y,
            confidence=result.z.data.copy(),
            attention=result.attention.data.copy(),
            memory_slots=result.memory.shape[0],
            read_slots=result.read_memory.shape[0],
        )


def _concat_cols(a: Tensor, b: Tensor) -> Tensor:
    out = np.concatenate([a.data, b.data], axis=1)
    wa = a.shape[1]

    def backward(g):
        ga = g[:, :wa] if a.requires_grad else None
        gb = g[:, wa:] if b.requires_grad else None
        return ga, gb

    return T._op("concat_cols", out, (a, b), backward)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: MemNetConfig, params: MemNetParams):
    """Versioned binary checkpoint: header digest guards config mismatches."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<H", CHECKPOINT_VERSION)
    out += config.digest()
    named = params.named()
    out += struct.pack("<I", len(named))
    for name, t in named.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        arr = np.asarray(t.data, dtype="<f8")
        out += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            out += struct.pack("<I", extent)
        out += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path, config: MemNetConfig) -> dict:
    """Read a checkpoint into {name: array}; validates the config digest."""
    blob = open(path, "rb").read()
    offset = 0

    def take(count, what):
        nonlocal offset
        if offset + count > len(blob):
            raise DataFormatError(f"{path}: truncated while reading {what}",
                                  offset=offset)
        chunk = blob[offset:offset + count]
        offset += count
        return chunk

    magic = take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic {magic!r}", offset=0)
    version = struct.unpack("<H", take(2, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    digest = take(32, "config digest")
    if digest != config.digest():
        raise ConfigError(
            f"{path}: checkpoint was written under a different model config"
        )
    count = struct.unpack("<I", take(4, "tensor count"))[0]
    values = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2, "name length"))[0]
        name = take(name_len, "tensor name").decode("utf-8")
        rank = struct.unpack("<B", take(1, "rank"))[0]
        shape = tuple(
            struct.unpack("<I", take(4, f"extent of {name}"))[0] for _ in range(rank)
        )
        size = int(np.prod(shape)) if shape else 1
        raw = take(8 * size, f"values of {name}")
        values[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if offset != len(blob):
        raise DataFormatError(f"{path}: trailing bytes", offset=offset)
    return values


def load_params(path, config: MemNetConfig, table: EmbeddingTable | None = None,
                dtype=np.float64) -> MemNetParams:
    """Rebuild a MemNetParams and fill it from a checkpoint file."""
    values = load_checkpoint(path, config)
    params = init_params(config, init_seed=0, table=table, dtype=dtype)
    params.load_values({k: v.astype(dtype) for k, v in values.items()})
    return params
