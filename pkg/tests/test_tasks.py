from collections import Counter

import numpy as np
import pytest

from deepcuts.common import ConfigError, ValidationError
from deepcuts.tasks import (
    CLS,
    N_RESERVED,
    SEP,
    TaskSpec,
    batches,
    detokenize,
    export_dataset,
    import_examples,
    make_task,
    teacher_predict,
    tokenize_pair,
    tokenize_single,
)


def test_tokenize_single_empty():
    ex = tokenize_single("")
    assert ex.token_ids == (CLS,)
    assert ex.segment_ids == (0,)


def test_tokenize_pair_layout():
    ex = tokenize_pair("a", "b")
    assert ex.token_ids == (1, ord("a") + 3, 2, ord("b") + 3, 2)
    assert ex.segment_ids == (0, 0, 0, 1, 1)


def test_tokenize_pair_truncation_keeps_specials():
    ex = tokenize_pair("abcdefgh", "xy", max_seq_len=8)
    assert len(ex.token_ids) == 8
    assert ex.token_ids[0] == CLS and ex.token_ids[-1] == SEP
    assert ex.token_ids.count(SEP) == 2


def test_tokenize_pair_both_empty():
    with pytest.raises(ValidationError):
        tokenize_pair("", "")


def test_detokenize_round_trip():
    assert detokenize(tokenize_single("hello").token_ids) == b"hello"


def test_planted_determinism():
    spec = TaskSpec(n_train=200, n_test=50, seed=3)
    a, b = make_task(spec), make_task(spec)
    assert a.train == b.train and a.val == b.val and a.test == b.test
    assert np.array_equal(a.metadata["w1"], b.metadata["w1"])


def test_planted_balance_and_teacher():
    data = make_task(TaskSpec(seed=0))
    labels = [ex.label for ex in data.train + data.val]
    assert 0.45 <= np.mean(labels) <= 0.55
    for ex in data.train + data.val + data.test:
        assert teacher_predict(data.metadata, ex) == ex.label


def test_planted_validation():
    with pytest.raises(ValidationError):
        make_task(TaskSpec(vocab=0))
    with pytest.raises(ValidationError):
        make_task(TaskSpec(teacher_sparsity=0.0))
    with pytest.raises(ConfigError):
        TaskSpec(kind="sst2")


def test_validation_split_size():
    data = make_task(TaskSpec(n_train=100, n_test=10, seed=1))
    assert len(data.val) == 10
    assert len(data.train) == 90
    assert len(data.test) == 10


def test_acceptability_teacher():
    data = make_task(TaskSpec(kind="toy_acceptability", n_train=200, n_test=50, seed=2))
    for ex in data.train + data.test:
        assert teacher_predict(data.metadata, ex) == ex.label


def test_pair_regression_labels_and_segments():
    data = make_task(TaskSpec(kind="toy_pair_regression", n_train=200, n_test=50, seed=2))
    for ex in data.train + data.val + data.test:
        assert 0.0 <= ex.label <= 5.0
        first_sep = ex.token_ids.index(SEP)
        assert all(s == 0 for s in ex.segment_ids[: first_sep + 1])
        assert len(ex.token_ids) <= data.spec.max_seq_len
    assert data.spec.eval_metric == "mse"


def test_batch_sizes():
    data = make_task(TaskSpec(n_train=20, n_test=0, val_fraction=0.5, seed=1))
    sizes = [len(b) for b in batches(data.train, 4)]
    assert sizes == [4, 4, 2]


def test_batches_are_seeded_partitions():
    data = make_task(TaskSpec(n_train=50, n_test=0, seed=1))
    one = list(batches(data.train, 7, shuffle_seed=11))
    two = list(batches(data.train, 7, shuffle_seed=11))
    for a, b in zip(one, two):
        assert np.array_equal(a.token_ids, b.token_ids)
    seen = Counter()
    for batch in one:
        for row, mask in zip(batch.token_ids, batch.attention_mask):
            seen[tuple(row[mask].tolist())] += 1
    assert seen == Counter(ex.token_ids for ex in data.train)


def test_padding_to_longest():
    data = make_task(TaskSpec(n_train=30, n_test=0, seed=4, min_len=2))
    for batch in batches(data.train, 8):
        longest = batch.attention_mask.sum(axis=1).max()
        assert batch.token_ids.shape[1] == longest
        assert np.all(batch.token_ids[~batch.attention_mask] == 0)


def test_zero_batch_size():
    with pytest.raises(ValidationError):
        list(batches([], 0))


def test_export_import(tmp_path):
    data = make_task(TaskSpec(kind="toy_pair_regression", n_train=20, n_test=5, seed=9))
    export_dataset(data, str(tmp_path))
    assert import_examples(str(tmp_path / "train.tsv")) == data.train
    assert import_examples(str(tmp_path / "test.tsv")) == data.test


def test_reserved_offset():
    ex = tokenize_single("A")
    assert ex.token_ids[1] == ord("A") + N_RESERVED
