"""Synthetic sequence tasks and TSV ingestion.

Five generators cover the task shapes the pipeline needs: single-sequence
binary, sequence-pair binary, multi-class and regression. Token ids 0 and 1
are reserved for padding and the end-of-sequence separator.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import EOS, NUM_SPECIAL, PAD, join_pair

KINDS = ("single-binary", "pair-binary", "multi-class", "regression")
METRICS = ("accuracy", "f1", "matthews", "spearman")
_KIND_METRICS = {
    "single-binary": ("accuracy", "f1", "matthews"),
    "pair-binary": ("accuracy", "f1", "matthews"),
    "multi-class": ("accuracy",),
    "regression": ("spearman",),
}


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


@dataclass(frozen=True)
class Example:
    tokens_a: tuple
    tokens_b: tuple | None = None
    target: float | int | None = None

    def tokens(self):
        if self.tokens_b is None:
            return list(self.tokens_a)
        return join_pair(self.tokens_a, self.tokens_b)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    metric: str
    generator: str
    params: dict = field(default_factory=dict)
    vocab_size: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown task kind {self.kind!r}")
        if self.metric not in _KIND_METRICS[self.kind]:
            raise DataError(f"metric {self.metric!r} does not fit task kind {self.kind!r}")

    @property
    def num_classes(self):
        if self.kind == "regression":
            return 0
        return int(self.params.get("num_classes", 2))

    @property
    def is_pair(self):
        return self.kind == "pair-binary" or bool(self.params.get("pair", False))


@dataclass
class SplitSet:
    train: list
    unlabeled: list
    test: list
    seeds: dict = field(default_factory=dict)


# ------------------------------------------------------------------ generators

MARKER_A, MARKER_B, MARKER_C = 2, 3, 4
TRIGRAM = (5, 6, 7)
FILLER_START = 8


def _fillers(rng, n, vocab, exclude=()):
    pool = np.setdiff1d(np.arange(FILLER_START, vocab), np.asarray(exclude, dtype=np.int64))
    return [int(t) for t in rng.choice(pool, size=n)]


def majority_label(tokens):
    """1 if marker A occurs more often than marker B."""
    tokens = list(tokens)
    return int(tokens.count(MARKER_A) > tokens.count(MARKER_B))


def _token_majority(rng, vocab, p):
    length = int(rng.integers(p.get("min_len", 8), p.get("max_len", 12) + 1))
    max_markers = min(p.get("max_markers", 5), length)
    while True:
        na, nb = rng.integers(0, max_markers + 1, size=2)
        if na != nb and na + nb <= length:
            break
    toks = [MARKER_A] * int(na) + [MARKER_B] * int(nb) + _fillers(rng, length - na - nb, vocab)
    rng.shuffle(toks)
    return Example(tuple(toks), None, majority_label(toks))


def contains_trigram(tokens, pattern=TRIGRAM):
    t = list(tokens)
    k = len(pattern)
    return int(any(tuple(t[i:i + k]) == tuple(pattern) for i in range(len(t) - k + 1)))


def _pattern_containment(rng, vocab, p):
    length = int(rng.integers(p.get("min_len", 8), p.get("max_len", 12) + 1))
    toks = _fillers(rng, length, vocab)
    if rng.random() < 0.5:
        pos = int(rng.integers(0, length - 2))
        toks[pos:pos + 3] = TRIGRAM
    else:
        # decoys: a proper subset of the pattern tokens, scattered
        keep = rng.choice(3, size=int(rng.integers(0, 3)), replace=False)
        slots = rng.choice(length, size=len(keep), replace=False)
        for s, k in zip(slots, keep):
            toks[int(s)] = TRIGRAM[int(k)]
    return Example(tuple(toks), None, contains_trigram(toks))


def jaccard(a, b):
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def _pair_from_pool(rng, pool, size_a, size_b, shared):
    picks = [int(t) for t in rng.choice(pool, size=size_a + size_b - shared, replace=False)]
    common = picks[:shared]
    a = common + picks[shared:size_a]
    b = common + picks[size_a:]
    rng.shuffle(a)
    rng.shuffle(b)
    return tuple(a), tuple(b)


def _pair_overlap(rng, vocab, p):
    pool = np.arange(FILLER_START, min(vocab, FILLER_START + p.get("pool", 12)))
    size = int(p.get("size", 5))
    threshold = p.get("threshold", 0.25)
    positive = rng.random() < 0.5
    shared = int(rng.integers(3, size + 1)) if positive else int(rng.integers(0, 2))
    a, b = _pair_from_pool(rng, pool, size, size, shared)
    return Example(a, b, int(jaccard(a, b) > threshold))


def _three_way_count(rng, vocab, p):
    length = int(rng.integers(p.get("min_len", 8), p.get("max_len", 12) + 1))
    markers = (MARKER_A, MARKER_B, MARKER_C)
    while True:
        counts = rng.integers(0, p.get("max_markers", 4) + 1, size=3)
        if counts.sum() <= length and (counts == counts.max()).sum() == 1:
            break
    toks = []
    for m, c in zip(markers, counts):
        toks += [m] * int(c)
    toks += _fillers(rng, length - int(counts.sum()), vocab)
    rng.shuffle(toks)
    return Example(tuple(toks), None, int(np.argmax(counts)))


def _overlap_score(rng, vocab, p):
    pool = np.arange(FILLER_START, min(vocab, FILLER_START + p.get("pool", 12)))
    size = int(p.get("size", 5))
    shared = int(rng.integers(0, size + 1))
    a, b = _pair_from_pool(rng, pool, size, size, shared)
    return Example(a, b, float(jaccard(a, b)))


GENERATORS = {
    "token-majority": _token_majority,
    "pattern-containment": _pattern_containment,
    "pair-overlap": _pair_overlap,
    "three-way-count": _three_way_count,
    "overlap-score": _overlap_score,
}

TASKS = {
    "token-majority": TaskSpec("token-majority", "single-binary", "accuracy", "token-majority"),
    "pattern-containment": TaskSpec("pattern-containment", "single-binary", "matthews",
                                    "pattern-containment"),
    "pair-overlap": TaskSpec("pair-overlap", "pair-binary", "f1", "pair-overlap"),
    "three-way-count": TaskSpec("three-way-count", "multi-class", "accuracy", "three-way-count",
                                {"num_classes": 3}),
    "overlap-score": TaskSpec("overlap-score", "regression", "spearman", "overlap-score",
                              {"pair": True}),
}

DEFAULT_SIZES = {"train": 1024, "unlabeled": 256, "test": 256}


def get_task(name) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise DataError(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


def generate_task(spec: TaskSpec, sizes=None, seed=0) -> SplitSet:
    """Disjoint train / unlabeled / test splits, deterministic per seed."""
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    if sizes["train"] <= 0 or sizes["test"] <= 0 or sizes["unlabeled"] < 0:
        raise DataError(f"train/test sizes must be positive and unlabeled >= 0, got {sizes}")
    try:
        gen = GENERATORS[spec.generator]
    except KeyError:
        raise DataError(f"unknown generator {spec.generator!r}") from None
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(spec.name.encode())]))
    total = sizes["train"] + sizes["unlabeled"] + sizes["test"]
    seen, examples = set(), []
    attempts = 0
    while len(examples) < total:
        attempts += 1
        if attempts > 50 * total:
            raise DataError(f"{spec.name}: could not draw {total} distinct examples")
        ex = gen(rng, spec.vocab_size, spec.params)
        key = (ex.tokens_a, ex.tokens_b)
        if key in seen:
            continue
        seen.add(key)
        examples.append(ex)
    n_tr, n_un = sizes["train"], sizes["unlabeled"]
    return SplitSet(
        train=examples[:n_tr],
        unlabeled=strip_labels(examples[n_tr:n_tr + n_un]),
        test=examples[n_tr + n_un:],
        seeds={"data": seed},
    )


def strip_labels(examples):
    return [replace(ex, target=None) for ex in examples]


# ------------------------------------------------------------------ TSV


@dataclass(frozen=True)
class TsvSchema:
    pair: bool = False
    target: str = "class"  # "class" or "real"

    @property
    def columns(self):
        return ["text_a", "text_b", "target"] if self.pair else ["text_a", "target"]


def hash_token(word, vocab_size):
    return NUM_SPECIAL + zlib.crc32(word.encode("utf-8")) % (vocab_size - NUM_SPECIAL)


def tokenize(text, vocab_size):
    return tuple(hash_token(w, vocab_size) for w in text.split())


def load_tsv(path, schema: TsvSchema = TsvSchema(), vocab_size=64) -> SplitSet:
    """Read a header + tab-separated file into the train split (other splits empty)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {schema.columns}") from None
        header = [h.strip() for h in header]
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        col = {c: header.index(c) for c in schema.columns}
        examples = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            raw_target = row[col["target"]].strip()
            try:
                target = int(raw_target) if schema.target == "class" else float(raw_target)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad target {raw_target!r}") from None
            a = tokenize(row[col["text_a"]], vocab_size)
            b = tokenize(row[col["text_b"]], vocab_size) if schema.pair else None
            if not a:
                raise DataError(f"{path}:{lineno}: empty text_a")
            examples.append(Example(a, b, target))
    return SplitSet(train=examples, unlabeled=[], test=[], seeds={})


def sequences(examples):
    return [ex.tokens() for ex in examples]


def targets(examples):
    return np.array([ex.target for ex in examples])


assert PAD == 0 and EOS == 1
