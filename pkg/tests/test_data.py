import numpy as np
import pytest

from jachess import data as D
from jachess.model import EOS


@pytest.mark.parametrize("name", sorted(D.TASKS))
def test_splits_are_deterministic_and_disjoint(name):
    spec = D.get_task(name)
    sizes = {"train": 60, "unlabeled": 20, "test": 20}
    a = D.generate_task(spec, sizes, seed=4)
    b = D.generate_task(spec, sizes, seed=4)
    assert a.train == b.train and a.test == b.test and a.unlabeled == b.unlabeled
    keys = [{(e.tokens_a, e.tokens_b) for e in split} for split in (a.train, a.unlabeled, a.test)]
    assert not (keys[0] & keys[1]) and not (keys[0] & keys[2]) and not (keys[1] & keys[2])
    assert all(e.target is None for e in a.unlabeled)
    assert all(e.target is not None for e in a.train + a.test)
    assert (a.train[0].tokens_b is not None) == spec.is_pair
    assert all(max(e.tokens()) < spec.vocab_size for e in a.train)


def test_different_seeds_differ():
    spec = D.get_task("token-majority")
    assert D.generate_task(spec, seed=0).train != D.generate_task(spec, seed=1).train


def test_majority_label_definition():
    toks = [D.MARKER_A] * 10 + [D.MARKER_B] * 2
    assert D.majority_label(toks) == 1
    assert D.majority_label([D.MARKER_B, D.MARKER_B, D.MARKER_A]) == 0


def test_token_majority_labels_match_definition_and_balance():
    s = D.generate_task(D.get_task("token-majority"), {"train": 10000, "unlabeled": 1, "test": 1})
    assert all(D.majority_label(e.tokens_a) == e.target for e in s.train)
    assert abs(np.mean([e.target for e in s.train]) - 0.5) < 0.02


def test_pattern_containment_labels():
    s = D.generate_task(D.get_task("pattern-containment"), {"train": 400, "unlabeled": 1, "test": 1})
    assert all(D.contains_trigram(e.tokens_a) == e.target for e in s.train)
    assert 0.4 < np.mean([e.target for e in s.train]) < 0.6


def test_pair_tasks_use_jaccard():
    s = D.generate_task(D.get_task("pair-overlap"), {"train": 300, "unlabeled": 1, "test": 1})
    assert all(int(D.jaccard(e.tokens_a, e.tokens_b) > 0.25) == e.target for e in s.train)
    r = D.generate_task(D.get_task("overlap-score"), {"train": 300, "unlabeled": 1, "test": 1})
    assert all(e.target == D.jaccard(e.tokens_a, e.tokens_b) for e in r.train)
    assert EOS in r.train[0].tokens()


def test_identical_pair_scores_one():
    assert D.jaccard((8, 9, 10), (10, 9, 8)) == 1.0


def test_three_way_count_label_is_argmax():
    s = D.generate_task(D.get_task("three-way-count"), {"train": 300, "unlabeled": 1, "test": 1})
    markers = (D.MARKER_A, D.MARKER_B, D.MARKER_C)
    for e in s.train:
        counts = [e.tokens_a.count(m) for m in markers]
        assert e.target == int(np.argmax(counts))
    assert set(e.target for e in s.train) == {0, 1, 2}


def test_bad_sizes_and_generators():
    with pytest.raises(D.DataError, match="sizes"):
        D.generate_task(D.get_task("token-majority"), {"train": 0})
    bogus = D.TaskSpec("x", "single-binary", "accuracy", "no-such-generator")
    with pytest.raises(D.DataError, match="generator"):
        D.generate_task(bogus)
    with pytest.raises(D.DataError, match="unknown task"):
        D.get_task("glue")


def test_metric_must_fit_kind():
    with pytest.raises(D.DataError, match="metric"):
        D.TaskSpec("x", "regression", "accuracy", "overlap-score")


def test_strip_labels():
    ex = [D.Example((4, 5), None, 1), D.Example((6,), (7,), 0.5)]
    once = D.strip_labels(ex)
    assert [e.tokens() for e in once] == [e.tokens() for e in ex]
    assert all(e.target is None for e in once)
    assert D.strip_labels(once) == once
    assert D.strip_labels([]) == []


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_tsv_single(tmp_path):
    p = write(tmp_path / "a.tsv", "text_a\ttarget\nthe cat\t1\na dog sat\t0\nbirds\t1\n")
    s = D.load_tsv(p)
    assert len(s.train) == 3 and s.train[1].target == 0
    assert len(s.train[1].tokens_a) == 3
    assert all(2 <= t < 64 for e in s.train for t in e.tokens_a)
    assert D.load_tsv(p).train == s.train


def test_load_tsv_pair_and_real(tmp_path):
    p = write(tmp_path / "b.tsv", "target\ttext_a\ttext_b\n0.5\tx y\ty z\n")
    s = D.load_tsv(p, D.TsvSchema(pair=True, target="real"))
    assert s.train[0].target == 0.5 and s.train[0].tokens_b is not None


def test_load_tsv_errors(tmp_path):
    with pytest.raises(D.SchemaError, match="target"):
        D.load_tsv(write(tmp_path / "c.tsv", "text_a\tlabel\nx\t1\n"))
    with pytest.raises(D.DataError, match=":3:"):
        D.load_tsv(write(tmp_path / "d.tsv", "text_a\ttarget\nx\t1\ny\n"))
    with pytest.raises(D.DataError, match=":2: bad target"):
        D.load_tsv(write(tmp_path / "e.tsv", "text_a\ttarget\nx\tyes\n"))
    with pytest.raises(D.SchemaError, match="empty"):
        D.load_tsv(write(tmp_path / "f.tsv", ""))
    with pytest.raises(D.DataError, match="no such file"):
        D.load_tsv(tmp_path / "missing.tsv")
