#!/usr/bin/env python3

import os
from dataclasses import dataclass, field

import numpy as np

from .common import ConfigError, ValidationError, DataError, atomic_write_text

PAD, CLS, SEP = 0, 1, 2
N_RESERVED = 3
ALPHABET_START = ord("a")

TASK_KINDS = ("planted_classify", "toy_acceptability", "toy_pair_regression")


@dataclass(frozen=True)
class Example:
    token_ids: tuple
    segment_ids: tuple
    label: object

    def __post_init__(self):
        if len(self.token_ids) != len(self.segment_ids):
            raise ValidationError(
                "token_ids and segment_ids differ in length ({} vs {})".format(
                    len(self.token_ids), len(self.segment_ids)
                )
            )


@dataclass
class Batch:
    token_ids: np.ndarray
    segment_ids: np.ndarray = None
    attention_mask: np.ndarray = None
    labels: np.ndarray = None
    features: np.ndarray = None

    def __len__(self):
        if self.features is not None:
            return len(self.features)
        return len(self.token_ids)


@dataclass
class TaskSpec:
    kind: str = "planted_classify"
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    vocab: int = 16
    min_len: int = 8
    max_seq_len: int = 32
    teacher_sparsity: float = 0.25
    teacher_hidden: int = 8
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError("task.kind must be one of {}, got '{}'".format(TASK_KINDS, self.kind))
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("task.n_train must be >= 1 and task.n_test >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("task.val_fraction must lie in [0, 1)")

    @property
    def is_regression(self):
        return self.kind == "toy_pair_regression"

    @property
    def n_classes(self):
        return 1 if self.is_regression else 2

    @property
    def eval_metric(self):
        return "mse" if self.is_regression else "accuracy"

    @classmethod
    def from_config(cls, section, **overrides):
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        known.update(overrides)
        return cls(**known)


@dataclass
class Dataset:
    spec: TaskSpec
    train: list
    val: list
    test: list
    metadata: dict = field(default_factory=dict)


## tokenization


def _to_bytes(text):
    if isinstance(text, bytes):
        return text
    return text.encode("utf8")


def tokenize_single(text, max_seq_len=32):
    """[CLS] followed by byte ids, truncated to max_seq_len."""
    ids = [CLS] + [b + N_RESERVED for b in _to_bytes(text)]
    ids = ids[:max_seq_len]
    return Example(tuple(ids), tuple([0] * len(ids)), None)


def tokenize_pair(text_a, text_b, max_seq_len=32):
    """CLS a SEP b SEP with segments 0 over CLS a SEP and 1 over b SEP."""
    a = [b + N_RESERVED for b in _to_bytes(text_a)]
    b = [c + N_RESERVED for c in _to_bytes(text_b)]
    if not a and not b:
        raise ValidationError("tokenize_pair needs at least one non-empty side")
    if max_seq_len < 3:
        raise ValidationError("max_seq_len must leave room for CLS and two SEP tokens")
    # longest-first truncation
    while len(a) + len(b) + 3 > max_seq_len:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    ids = [CLS] + a + [SEP] + b + [SEP]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return Example(tuple(ids), tuple(segments), None)


def detokenize(token_ids):
    return bytes(i - N_RESERVED for i in token_ids if i >= N_RESERVED)


def with_label(example, label):
    return Example(example.token_ids, example.segment_ids, label)


## planted generators


def _alphabet(spec):
    if spec.vocab < 1:
        raise ValidationError("task.vocab must be >= 1 (empty vocabulary)")
    if ALPHABET_START + spec.vocab > 256:
        raise ValidationError("task.vocab too large for the byte alphabet")
    return np.arange(spec.vocab)


def _letters(symbols):
    return bytes(int(s) + ALPHABET_START for s in symbols)


def _sample_lengths(rng, spec, n, upper):
    low = min(spec.min_len, upper)
    return rng.integers(low, upper + 1, size=n)


def _histogram(symbols, vocab):
    counts = np.bincount(np.asarray(symbols, dtype=np.int64), minlength=vocab)
    return counts / max(len(symbols), 1)


def teacher_score(metadata, symbols):
    x = _histogram(symbols, metadata["vocab"]) - metadata["center"]
    hidden = np.maximum(metadata["w1"] @ x, 0.0)
    return float(metadata["w2"] @ hidden)


def teacher_predict(metadata, example):
    """Ground-truth label of the planted task for an example."""
    symbols = [i - N_RESERVED - ALPHABET_START for i in example.token_ids if i >= N_RESERVED]
    kind = metadata["kind"]
    if kind == "planted_classify":
        return int(teacher_score(metadata, symbols) > metadata["threshold"])
    if kind == "toy_acceptability":
        forbidden = metadata["forbidden"]
        return int(not any(forbidden[a, b] for a, b in zip(symbols[:-1], symbols[1:])))
    raise DataError("no teacher predicate for task kind '{}'".format(kind))


def make_planted_task(spec):
    """Random letter sequences labeled by a fixed sparse ReLU teacher on token counts."""
    if not 0.0 < spec.teacher_sparsity <= 1.0:
        raise ValidationError("task.teacher_sparsity must lie in (0, 1]")
    alphabet = _alphabet(spec)
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_test
    lengths = _sample_lengths(rng, spec, n, spec.max_seq_len - 1)
    sequences = [rng.choice(alphabet, size=length) for length in lengths]

    w1 = rng.normal(0.0, 1.0, size=(spec.teacher_hidden, spec.vocab))
    keep = rng.random(w1.shape) < spec.teacher_sparsity
    keep[np.arange(spec.teacher_hidden), rng.integers(0, spec.vocab, spec.teacher_hidden)] = True
    w1 = w1 * keep
    w2 = rng.normal(0.0, 1.0, size=spec.teacher_hidden)
    metadata = dict(
        kind=spec.kind,
        vocab=spec.vocab,
        center=np.full(spec.vocab, 1.0 / spec.vocab),
        w1=w1,
        w2=w2,
        support=sorted(int(s) for s in np.nonzero(keep.any(axis=0))[0]),
    )
    scores = np.array([teacher_score(metadata, s) for s in sequences])
    metadata["threshold"] = float(np.median(scores[: spec.n_train]))
    labels = (scores > metadata["threshold"]).astype(int)
    examples = [
        with_label(tokenize_single(_letters(s), spec.max_seq_len), int(y))
        for s, y in zip(sequences, labels)
    ]
    return _split(spec, examples, metadata)


def make_acceptability_task(spec):
    """Letter sequences that are acceptable iff they avoid a planted set of bigrams."""
    alphabet = _alphabet(spec)
    if spec.vocab < 2:
        raise ValidationError("toy_acceptability needs task.vocab >= 2")
    rng = np.random.default_rng(spec.seed)
    n_forbidden = max(1, spec.vocab // 4)
    forbidden = np.zeros((spec.vocab, spec.vocab), dtype=bool)
    for a in alphabet:
        forbidden[a, rng.choice(alphabet, size=n_forbidden, replace=False)] = True
    # every symbol keeps at least one allowed successor
    for a in alphabet:
        if forbidden[a].all():
            forbidden[a, rng.integers(0, spec.vocab)] = False
    allowed = [np.nonzero(~forbidden[a])[0] for a in alphabet]
    banned = [np.nonzero(forbidden[a])[0] for a in alphabet]

    n = spec.n_train + spec.n_test
    lengths = _sample_lengths(rng, spec, n, spec.max_seq_len - 1)
    examples = []
    for length in lengths:
        length = max(int(length), 2)
        seq = [int(rng.integers(0, spec.vocab))]
        for _ in range(length - 1):
            seq.append(int(rng.choice(allowed[seq[-1]])))
        label = 1
        if rng.random() < 0.5:
            pos = int(rng.integers(0, length - 1))
            seq[pos + 1] = int(rng.choice(banned[seq[pos]]))
            label = 0
        examples.append(with_label(tokenize_single(_letters(seq), spec.max_seq_len), label))
    metadata = dict(kind=spec.kind, vocab=spec.vocab, forbidden=forbidden)
    return _split(spec, examples, metadata)


def make_pair_regression_task(spec):
    """Sentence pairs scored 0-5 by the Jaccard overlap of their token sets."""
    alphabet = _alphabet(spec)
    rng = np.random.default_rng(spec.seed)
    half = (spec.max_seq_len - 3) // 2
    if half < 1:
        raise ValidationError("task.max_seq_len too small for sentence pairs")
    n = spec.n_train + spec.n_test
    lengths = _sample_lengths(rng, spec, n, half)
    examples = []
    for length in lengths:
        a = rng.choice(alphabet, size=int(length))
        b = a.copy()
        replace = rng.random(len(b)) < rng.random()
        b[replace] = rng.choice(alphabet, size=int(replace.sum()))
        sa, sb = set(a.tolist()), set(b.tolist())
        label = 5.0 * len(sa & sb) / len(sa | sb)
        ex = tokenize_pair(_letters(a), _letters(b), spec.max_seq_len)
        examples.append(with_label(ex, float(label)))
    metadata = dict(kind=spec.kind, vocab=spec.vocab)
    return _split(spec, examples, metadata)


def make_task(spec):
    makers = dict(
        planted_classify=make_planted_task,
        toy_acceptability=make_acceptability_task,
        toy_pair_regression=make_pair_regression_task,
    )
    return makers[spec.kind](spec)


def split_validation(examples, val_fraction, seed):
    n_val = int(round(len(examples) * val_fraction))
    order = np.random.default_rng(seed).permutation(len(examples))
    val_idx = set(order[:n_val].tolist())
    train = [ex for i, ex in enumerate(examples) if i not in val_idx]
    val = [ex for i, ex in enumerate(examples) if i in val_idx]
    return train, val


def _split(spec, examples, metadata):
    train_all, test = examples[: spec.n_train], examples[spec.n_train :]
    train, val = split_validation(train_all, spec.val_fraction, spec.seed + 1)
    return Dataset(spec, train, val, test, metadata)


## batching


def collate(examples):
    longest = max(len(ex.token_ids) for ex in examples)
    ids = np.full((len(examples), longest), PAD, dtype=np.int64)
    segments = np.zeros((len(examples), longest), dtype=np.int64)
    mask = np.zeros((len(examples), longest), dtype=bool)
    for row, ex in enumerate(examples):
        n = len(ex.token_ids)
        ids[row, :n] = ex.token_ids
        segments[row, :n] = ex.segment_ids
        mask[row, :n] = True
    labels = np.array([ex.label for ex in examples])
    return Batch(ids, segments, mask, labels)


def batches(examples, batch_size, shuffle_seed=None):
    """Deterministic batch stream; final partial batch included."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1, got {}".format(batch_size))
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield collate([examples[i] for i in order[start : start + batch_size]])


## line records


def _format_label(label):
    if isinstance(label, (float, np.floating)):
        return repr(float(label))
    return str(int(label))


def export_examples(examples, path):
    lines = []
    for ex in examples:
        lines.append(
            "{}\t{}\t{}".format(
                " ".join(str(i) for i in ex.token_ids),
                " ".join(str(s) for s in ex.segment_ids),
                _format_label(ex.label),
            )
        )
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def import_examples(path):
    examples = []
    with open(path) as f:
        for num, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError("{}:{}: expected 3 tab-separated fields".format(path, num))
            ids = tuple(int(i) for i in parts[0].split())
            segments = tuple(int(s) for s in parts[1].split())
            raw = parts[2]
            label = float(raw) if any(c in raw for c in ".eEn") else int(raw)
            examples.append(Example(ids, segments, label))
    return examples


def export_dataset(dataset, folder):
    os.makedirs(folder, exist_ok=True)
    for split in ("train", "val", "test"):
        export_examples(getattr(dataset, split), os.path.join(folder, split + ".tsv"))
