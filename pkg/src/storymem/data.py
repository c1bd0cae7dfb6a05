"""Story/QA data model, file formats, and synthetic task generators.

File formats (all little-endian where binary):

* story features: magic ``RWMN``, u16 version, u8 modality flag, u32 step
  count, u32 visual dim, u32 word dim, then per step a u32 token count,
  that many u32 token ids, and (multimodal only) visual-dim float32s.
* QA items: UTF-8 lines ``story_id<TAB>question<TAB>a1..a5<TAB>correct<TAB>
  span_start<TAB>span_end`` with ``-`` for absent spans.
* vocabulary: one token per line, line number = id, id 0 reserved for
  the unknown token.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, ParameterError
from .rng import STREAM_DATA, STREAM_VISUAL, rng_for

STORY_MAGIC = b"RWMN"
STORY_VERSION = 1
MODALITY_TEXT = "text"
MODALITY_MULTIMODAL = "multimodal"
_MODALITY_CODES = {MODALITY_TEXT: 0, MODALITY_MULTIMODAL: 1}
_MODALITY_NAMES = {v: k for k, v in _MODALITY_CODES.items()}

UNKNOWN_TOKEN = "<unk>"
QUESTION_TYPE_WORDS = ("who", "where", "when", "what", "why", "how")
ANSWER_COUNT = 5


def tokenize(text: str) -> tuple:
    return tuple(text.lower().split())


def question_type(tokens) -> str:
    """First word when it is an interrogative, else "other"."""
    if tokens and tokens[0].lower() in QUESTION_TYPE_WORDS:
        return tokens[0].lower()
    return "other"


class Vocabulary:
    """Bidirectional token <-> id map; id 0 is the unknown token."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if not tokens:
            raise DataFormatError("vocabulary is empty")
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise DataFormatError(f"duplicate vocabulary token {tok!r}", line=i + 1)
            index[tok] = i
        self.tokens = tokens
        self.index = index

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token) -> int:
        """Id for the token; unknown tokens map to the reserved id 0."""
        return self.index.get(token, 0)

    def ids(self, tokens) -> np.ndarray:
        return np.array([self.id_of(t) for t in tokens], dtype=np.int64)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    @classmethod
    def from_token_stream(cls, token_iter):
        """Deterministic vocabulary: unknown marker plus sorted unique tokens."""
        seen = sorted(set(token_iter) - {UNKNOWN_TOKEN})
        return cls([UNKNOWN_TOKEN] + seen)


def save_vocab(vocab: Vocabulary, path):
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataFormatError(f"vocabulary file {path} is empty")
    return Vocabulary(lines)


@dataclass
class StoryStep:
    sentence: tuple
    visual: np.ndarray | None = None

    def __post_init__(self):
        self.sentence = tuple(self.sentence)
        if len(self.sentence) == 0:
            raise DataFormatError("story step with an empty sentence")


@dataclass
class StorySource:
    """One story: ordered steps of (sentence, optional visual feature)."""

    story_id: str
    steps: list
    modality: str = MODALITY_TEXT
    word_dim: int = 300

    def __post_init__(self):
        if self.modality not in _MODALITY_CODES:
            raise DataFormatError(f"unknown modality {self.modality!r}")
        if not self.steps:
            raise DataFormatError(f"story {self.story_id!r} has no steps")
        for i, step in enumerate(self.steps):
            has_visual = step.visual is not None
            if has_visual != (self.modality == MODALITY_MULTIMODAL):
                raise DataFormatError(
                    f"story {self.story_id!r} step {i}: visual features "
                    f"inconsistent with modality {self.modality!r}"
                )

    @property
    def n(self) -> int:
        return len(self.steps)

    @property
    def visual_dim(self) -> int:
        if self.modality != MODALITY_MULTIMODAL:
            return 0
        return int(self.steps[0].visual.shape[-1])


@dataclass
class QAItem:
    """A five-way multiple-choice question tied to one story."""

    item_id: str
    story_id: str
    question: tuple
    answers: tuple
    correct_index: int | None = None
    gt_span: tuple | None = None
    question_type: str = field(init=False)

    def __post_init__(self):
        self.question = tuple(self.question)
        self.answers = tuple(tuple(a) for a in self.answers)
        if len(self.answers) != ANSWER_COUNT:
            raise DataFormatError(
                f"item {self.item_id!r}: expected {ANSWER_COUNT} answers, "
                f"got {len(self.answers)}"
            )
        if not self.question:
            raise DataFormatError(f"item {self.item_id!r}: empty question")
        if self.correct_index is not None and not 0 <= self.correct_index < ANSWER_COUNT:
            raise DataFormatError(
                f"item {self.item_id!r}: correct index {self.correct_index} out of range"
            )
        if self.gt_span is not None:
            start, end = self.gt_span
            if start < 0 or end < start:
                raise DataFormatError(
                    f"item {self.item_id!r}: bad evidence span {self.gt_span}"
                )
            self.gt_span = (int(start), int(end))
        self.question_type = question_type(self.question)


@dataclass
class Dataset:
    stories: dict
    items: list
    vocab: Vocabulary

    def __len__(self):
        return len(self.items)

    def story_for(self, item: QAItem) -> StorySource:
        return self.stories[item.story_id]


# ---------------------------------------------------------------------------
# binary story format


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def read(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.blob):
            raise DataFormatError(
                f"{self.path}: truncated while reading {what}", offset=self.offset
            )
        chunk = self.blob[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u8(self, what):
        return self.read(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.read(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.read(4, what))[0]


def save_story_features(story: StorySource, path, vocab: Vocabulary):
    """Write one story; the file name (stem) should be the story id."""
    out = bytearray()
    out += STORY_MAGIC
    out += struct.pack("<H", STORY_VERSION)
    out += struct.pack("<B", _MODALITY_CODES[story.modality])
    out += struct.pack("<I", story.n)
    out += struct.pack("<I", story.visual_dim)
    out += struct.pack("<I", story.word_dim)
    for step in story.steps:
        ids = vocab.ids(step.sentence)
        out += struct.pack("<I", len(ids))
        out += ids.astype("<u4").tobytes()
        if story.modality == MODALITY_MULTIMODAL:
            out += np.asarray(step.visual, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_story_features(path, vocab: Vocabulary) -> StorySource:
    """Read one story written by :func:`save_story_features`."""
    path = Path(path)
    rd = _Reader(path.read_bytes(), path)
    magic = rd.read(4, "magic")
    if magic != STORY_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}", offset=0)
    version = rd.u16("version")
    if version != STORY_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}", offset=4)
    modality_code = rd.u8("modality")
    if modality_code not in _MODALITY_NAMES:
        raise DataFormatError(f"{path}: unknown modality code {modality_code}", offset=6)
    modality = _MODALITY_NAMES[modality_code]
    n = rd.u32("step count")
    if n < 1:
        raise DataFormatError(f"{path}: story declares {n} steps", offset=7)
    visual_dim = rd.u32("visual dim")
    word_dim = rd.u32("word dim")
    steps = []
    for i in range(n):
        count = rd.u32(f"token count of step {i}")
        raw = rd.read(4 * count, f"tokens of step {i}")
        ids = np.frombuffer(raw, dtype="<u4")
        if ids.size and ids.max() >= len(vocab):
            raise DataFormatError(
                f"{path}: token id {int(ids.max())} outside vocabulary of "
                f"{len(vocab)} in step {i}",
                offset=rd.offset,
            )
        sentence = tuple(vocab.token_of(int(t)) for t in ids)
        visual = None
        if modality == MODALITY_MULTIMODAL:
            raw = rd.read(4 * visual_dim, f"visual features of step {i}")
            visual = np.frombuffer(raw, dtype="<f4").copy()
        steps.append(StoryStep(sentence, visual))
    if rd.offset != len(rd.blob):
        raise DataFormatError(
            f"{path}: {len(rd.blob) - rd.offset} trailing bytes", offset=rd.offset
        )
    return StorySource(path.stem, steps, modality=modality, word_dim=word_dim)


# ---------------------------------------------------------------------------
# QA text format


def _format_span(span):
    if span is None:
        return ("-", "-")
    return (str(span[0]), str(span[1]))


def save_qa(items, path):
    lines = []
    for item in items:
        for tok_seq in (item.question, *item.answers):
            for tok in tok_seq:
                if "\t" in tok or " " in tok or "\n" in tok:
                    raise DataFormatError(
                        f"item {item.item_id!r}: token {tok!r} contains whitespace"
                    )
        start, end = _format_span(item.gt_span)
        fields = [
            item.story_id,
            " ".join(item.question),
            *(" ".join(a) for a in item.answers),
            "-" if item.correct_index is None else str(item.correct_index),
            start,
            end,
        ]
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_qa(path) -> list:
    path = Path(path)
    items = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 10:
            raise DataFormatError(
                f"{path}: expected 10 tab-separated fields, got {len(fields)}",
                line=lineno,
            )
        story_id, question = fields[0], tokenize(fields[1])
        answers = tuple(tokenize(f) for f in fields[2:7])
        correct_raw, start_raw, end_raw = fields[7], fields[8], fields[9]
        try:
            correct = None if correct_raw == "-" else int(correct_raw)
        except ValueError:
            raise DataFormatError(
                f"{path}: bad correct index {correct_raw!r}", line=lineno
            ) from None
        if correct is not None and not 0 <= correct < ANSWER_COUNT:
            raise DataFormatError(
                f"{path}: correct index {correct} out of range", line=lineno
            )
        if (start_raw == "-") != (end_raw == "-"):
            raise DataFormatError(
                f"{path}: evidence span must give both ends or neither", line=lineno
            )
        span = None
        if start_raw != "-":
            try:
                span = (int(start_raw), int(end_raw))
            except ValueError:
                raise DataFormatError(
                    f"{path}: bad span '{start_raw} {end_raw}'", line=lineno
                ) from None
            if span[0] < 0 or span[1] < span[0]:
                raise DataFormatError(
                    f"{path}: bad span {span}", line=lineno
                )
        try:
            items.append(
                QAItem(
                    item_id=f"{path.stem}-{lineno:05d}",
                    story_id=story_id,
                    question=question,
                    answers=answers,
                    correct_index=correct,
                    gt_span=span,
                )
            )
        except DataFormatError as exc:
            raise DataFormatError(f"{path}: {exc}", line=lineno) from None
    return items


# ---------------------------------------------------------------------------
# bootstrap resampling


def bootstrap_sample(items, rng) -> list:
    """Same-size sample with replacement (about 63% unique items)."""
    items = list(items)
    if not items:
        raise ParameterError("bootstrap of an empty item list")
    idx = rng.integers(0, len(items), size=len(items))
    return [items[i] for i in idx]


# ---------------------------------------------------------------------------
# synthetic tasks


TASK_NEEDLE = "needle"
TASK_CHUNK = "chunk"
TASK_QUERY_SENSITIVE = "query_sensitive"
_TASKS = (TASK_NEEDLE, TASK_CHUNK, TASK_QUERY_SENSITIVE)

# Size of the attribute slice that query_sensitive answer candidates are
# drawn from; the slice after it feeds the filler steps.
QUERY_CANDIDATE_POOL = 12

# Function words shared by every generated vocabulary.  Keep the order
# stable: vocab ids feed the deterministic hash embeddings.
_FUNCTION_WORDS = (
    UNKNOWN_TOKEN,
    "what", "who", "where", "when", "why", "how",
    "is", "was", "did", "at", "the",
    "order", "parade", "go", "arrived", "slept",
)


@dataclass
class SyntheticTaskConfig:
    task: str = TASK_NEEDLE
    n_min: int = 8
    n_max: int = 16
    vocab_size: int = 200
    chunk_width: int = 4
    feature_dim: int = 64
    train_count: int = 1000
    val_count: int = 200
    test_count: int = 200
    seed: int | None = None

    def validate(self):
        if self.task not in _TASKS:
            raise ConfigError(f"unknown synthetic task {self.task!r}")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError(f"bad step-count range [{self.n_min}, {self.n_max}]")
        if self.chunk_width < 2:
            raise ConfigError("chunk width must be at least 2")
        if self.task == TASK_CHUNK and self.n_min < self.chunk_width:
            raise ConfigError("chunk task needs n_min >= chunk_width")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if min(self.train_count, self.val_count, self.test_count) < 1:
            raise ConfigError("every split needs at least one item")
        layout = _vocab_layout(self.vocab_size, self.n_max, self.chunk_width)
        if layout is None:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for task parameters"
            )
        if (self.task == TASK_QUERY_SENSITIVE
                and layout[2] < QUERY_CANDIDATE_POOL + 2):
            # candidates use a fixed foreground slice of the attributes and
            # the filler steps need at least two background attributes
            raise ConfigError(
                f"vocab_size {self.vocab_size} leaves too few attribute tokens "
                f"for two-fact stories with a {QUERY_CANDIDATE_POOL}-candidate pool"
            )

    def resolved(self, fallback_seed: int) -> "SyntheticTaskConfig":
        if self.seed is None:
            return replace(self, seed=int(fallback_seed))
        return self


def _vocab_layout(vocab_size, n_max, chunk_width):
    """Split the vocabulary budget into entity / agent / attribute tokens.

    Attributes must outnumber the longest story by enough to draw four
    wrong answers that are absent from it.
    """
    remaining = vocab_size - len(_FUNCTION_WORDS)
    n_entities = max(n_max + 2, (remaining * 5) // 10)
    n_agents = max(chunk_width + 3, (remaining * 2) // 10)
    n_attributes = remaining - n_entities - n_agents
    if remaining < 12 or n_attributes < max(8, n_max + 4):
        return None
    return n_entities, n_agents, n_attributes


def build_task_vocabulary(cfg: SyntheticTaskConfig) -> Vocabulary:
    layout = _vocab_layout(cfg.vocab_size, cfg.n_max, cfg.chunk_width)
    n_entities, n_agents, n_attributes = layout
    tokens = list(_FUNCTION_WORDS)
    tokens += [f"e{i:03d}" for i in range(n_entities)]
    tokens += [f"a{i:03d}" for i in range(n_agents)]
    tokens += [f"c{i:03d}" for i in range(n_attributes)]
    return Vocabulary(tokens)


def _token_groups(vocab: Vocabulary):
    entities = [t for t in vocab.tokens if t.startswith("e")]
    agents = [t for t in vocab.tokens if t.startswith("a")]
    attributes = [t for t in vocab.tokens if t.startswith("c")]
    return entities, agents, attributes


def entity_feature(token: str, vocab: Vocabulary, dim: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-visual feature for an entity token."""
    token_id = vocab.id_of(token)
    rng = rng_for(STREAM_VISUAL, seed, token_id)
    return (rng.standard_normal(dim) / np.sqrt(dim)).astype(np.float32)


def _place_answers(rng, correct, distractors):
    answers = [tuple(correct)] + [tuple(d) for d in distractors]
    order = rng.permutation(len(answers))
    placed = [answers[i] for i in order]
    return tuple(placed), int(np.flatnonzero(order == 0)[0])


def _sample_distinct(rng, pool, count, exclude=()):
    avail = [p for p in pool if p not in exclude]
    idx = rng.choice(len(avail), size=count, replace=False)
    return [avail[i] for i in idx]


def _gen_needle(rng, cfg, vocab, story_id):
    entities, _agents, attributes = _token_groups(vocab)
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    ents = _sample_distinct(rng, entities, n + 1)
    needle = int(rng.integers(n))
    attr = attributes[int(rng.integers(len(attributes)))]
    # Exactly one step carries an attribute; the rest are entity filler, so
    # the answer is recoverable from what the story mentions at all while the
    # evidence span stays a single step.
    steps = []
    for i in range(n):
        if i == needle:
            sentence = (ents[i], "is", attr)
        else:
            sentence = (ents[i], "at", ents[i + 1])
        steps.append(StoryStep(
            sentence,
            entity_feature(ents[i], vocab, cfg.feature_dim, cfg.seed),
        ))
    story = StorySource(story_id, steps, modality=MODALITY_MULTIMODAL)
    wrong = _sample_distinct(rng, attributes, 4, exclude={attr})
    answers, correct_idx = _place_answers(rng, (attr,), [(w,) for w in wrong])
    item = QAItem(
        item_id=f"{story_id}-q0",
        story_id=story_id,
        question=("what", "is", ents[needle]),
        answers=answers,
        correct_index=correct_idx,
        gt_span=(needle, needle),
    )
    return story, [item]


def _mutate_sequence(rng, seq, agents):
    """Replace one position with an agent not already in the sequence."""
    seq = list(seq)
    outsiders = [a for a in agents if a not in seq]
    if not outsiders:
        return None
    pos = int(rng.integers(len(seq)))
    seq[pos] = outsiders[int(rng.integers(len(outsiders)))]
    return tuple(seq)


def _gen_chunk(rng, cfg, vocab, story_id):
    entities, agents, _attributes = _token_groups(vocab)
    k = cfg.chunk_width
    n = int(rng.integers(max(cfg.n_min, k), cfg.n_max + 1))
    start = int(rng.integers(0, n - k + 1))
    parade = _sample_distinct(rng, agents, k)
    fillers = _sample_distinct(rng, entities, n)
    steps = []
    for i in range(n):
        if start <= i < start + k:
            tok = parade[i - start]
            steps.append(StoryStep((tok, "arrived"),
                                   entity_feature(tok, vocab, cfg.feature_dim, cfg.seed)))
        else:
            steps.append(StoryStep((fillers[i], "slept"),
                                   entity_feature(fillers[i], vocab, cfg.feature_dim,
                                                  cfg.seed)))
    story = StorySource(story_id, steps, modality=MODALITY_MULTIMODAL)
    correct = tuple(parade)
    wrong = []
    guard = 0
    while len(wrong) < 4 and guard < 200:
        guard += 1
        perm = tuple(parade[i] for i in rng.permutation(k))
        if perm != correct and perm not in wrong:
            wrong.append(perm)
            continue
        if guard > 50:
            mutated = _mutate_sequence(rng, correct, agents)
            if mutated and mutated != correct and mutated not in wrong:
                wrong.append(mutated)
    if len(wrong) < 4:
        raise ConfigError("could not build 4 distinct wrong orderings; "
                          "increase chunk_width or agent vocabulary")
    answers, correct_idx = _place_answers(rng, correct, wrong)
    item = QAItem(
        item_id=f"{story_id}-q0",
        story_id=story_id,
        question=("how", "did", "the", "parade", "go"),
        answers=answers,
        correct_index=correct_idx,
        gt_span=(start, start + k - 1),
    )
    return story, [item]


def _gen_query_sensitive(rng, cfg, vocab, story_id):
    entities, _agents, attributes = _token_groups(vocab)
    fg = attributes[:QUERY_CANDIDATE_POOL]
    bg = attributes[QUERY_CANDIDATE_POOL:]
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    ents = _sample_distinct(rng, entities, n)
    target = int(rng.integers(n))
    # Filler steps draw their facts from a reserved background slice of the
    # attribute pool while the queried step and every answer candidate use
    # the small foreground slice.  A projection can then learn to pass
    # candidate-bearing content and mute the filler; without the split the
    # queried facts drown among the filler facts.
    fact_pairs = [tuple(_sample_distinct(rng, bg, 2)) for _ in range(n)]
    fact_pairs[target] = tuple(_sample_distinct(rng, fg, 2))
    # Facts sit at opposite ends of the step so the position weighting gives
    # them opposite ramps across embedding dims; that is what makes "first
    # fact or second fact" recoverable from a pooled sentence vector.
    steps = [
        StoryStep(
            (fact_pairs[i][0], ents[i], fact_pairs[i][1]),
            entity_feature(ents[i], vocab, cfg.feature_dim, cfg.seed),
        )
        for i in range(n)
    ]
    story = StorySource(story_id, steps, modality=MODALITY_MULTIMODAL)
    first, second = fact_pairs[target]
    # Both questions list both of the queried step's facts, so presence in
    # memory narrows five candidates to two and only the type word can
    # settle which of the two is right.
    wrong = _sample_distinct(rng, fg, 3, exclude={first, second})
    candidates = [(first,), (second,)] + [(w,) for w in wrong]
    order = rng.permutation(len(candidates))
    placed = tuple(candidates[i] for i in order)
    where_idx = int(np.flatnonzero(order == 0)[0])
    when_idx = int(np.flatnonzero(order == 1)[0])
    items = [
        QAItem(
            item_id=f"{story_id}-q0",
            story_id=story_id,
            question=("where", "was", ents[target]),
            answers=placed,
            correct_index=where_idx,
            gt_span=(target, target),
        ),
        QAItem(
            item_id=f"{story_id}-q1",
            story_id=story_id,
            question=("when", "was", ents[target]),
            answers=placed,
            correct_index=when_idx,
            gt_span=(target, target),
        ),
    ]
    return story, items


_GENERATORS = {
    TASK_NEEDLE: _gen_needle,
    TASK_CHUNK: _gen_chunk,
    TASK_QUERY_SENSITIVE: _gen_query_sensitive,
}


def generate_synthetic(cfg: SyntheticTaskConfig):
    """Build (train, val, test) datasets with disjoint story ids."""
    cfg.validate()
    if cfg.seed is None:
        raise ConfigError("synthetic config needs a concrete seed (use resolved())")
    vocab = build_task_vocabulary(cfg)
    gen = _GENERATORS[cfg.task]
    rng = rng_for(STREAM_DATA, cfg.seed)
    datasets = []
    for split, count in (("train", cfg.train_count),
                         ("val", cfg.val_count),
                         ("test", cfg.test_count)):
        stories = {}
        items = []
        serial = 0
        while len(items) < count:
            story_id = f"{split}-{serial:05d}"
            serial += 1
            story, new_items = gen(rng, cfg, vocab, story_id)
            stories[story.story_id] = story
            items.extend(new_items)
        del items[count:]
        stories = {sid: s for sid, s in stories.items()
                   if any(it.story_id == sid for it in items)}
        datasets.append(Dataset(stories=stories, items=items, vocab=vocab))
    return tuple(datasets)


# ---------------------------------------------------------------------------
# task oracles (used by tests and sanity tooling)


def needle_answer_oracle(dataset: Dataset) -> float:
    """Accuracy of reading the attribute straight off the evidence step."""
    hits = 0
    for item in dataset.items:
        story = dataset.story_for(item)
        step = story.steps[item.gt_span[0]]
        predicted = (step.sentence[2],)
        hits += int(predicted == item.answers[item.correct_index])
    return hits / len(dataset.items)


def chunk_single_step_oracle(dataset: Dataset) -> float:
    """Best single-step guesser: filters candidates consistent with one step.

    For each item, every story step is scored by how far it narrows the
    candidate list (a candidate is consistent when it contains the agent
    the step shows); the best step's expected accuracy is recorded.
    """
    total = 0.0
    for item in dataset.items:
        story = dataset.story_for(item)
        best = 1.0 / len(item.answers)
        for step in story.steps:
            if step.sentence[1] != "arrived":
                continue
            agent = step.sentence[0]
            consistent = [a for a in item.answers if agent in a]
            if not consistent:
                continue
            expected = (1.0 / len(consistent)) * (
                1.0 if item.answers[item.correct_index] in consistent else 0.0
            )
            best = max(best, expected)
        total += best
    return total / len(dataset.items)
