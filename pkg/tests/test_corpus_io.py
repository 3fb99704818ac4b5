import random

import pytest
from hypothesis import given, strategies as st

from turnemo.corpus_io import (
    ConversationRecord,
    FormatError,
    load_conversations,
    load_corpus,
    load_lexicon,
    write_conversations,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_labeled_line(tmp_path):
    p = write(tmp_path, "c.tsv", "id\tturn1\tturn2\tturn3\tlabel\n17\thi\thello\tI am so happy\thappy\n")
    assert load_conversations(p) == [ConversationRecord("17", ("hi", "hello", "I am so happy"), "happy")]


def test_empty_after_header(tmp_path):
    assert load_conversations(write(tmp_path, "c.tsv", "id\tturn1\tturn2\tturn3\tlabel\n")) == []


def test_wrong_column_count_names_line(tmp_path):
    p = write(tmp_path, "c.tsv", "id\tturn1\tturn2\tturn3\tlabel\n1\ta\tb\tc\tsad\n2\ta\tb\n")
    with pytest.raises(FormatError, match=":3:") as exc:
        load_conversations(p)
    assert exc.value.lineno == 3


def test_unknown_label_names_value(tmp_path):
    p = write(tmp_path, "c.tsv", "id\tturn1\tturn2\tturn3\tlabel\n1\ta\tb\tc\tfurious\n")
    with pytest.raises(FormatError, match="furious"):
        load_conversations(p)


def test_unlabeled_file(tmp_path):
    p = write(tmp_path, "c.tsv", "id\tturn1\tturn2\tturn3\n5\ta\t\tc 😂\n")
    assert load_conversations(p, has_labels=False) == [ConversationRecord("5", ("a", "", "c 😂"), None)]


def test_record_invariants():
    with pytest.raises(ValueError):
        ConversationRecord("1", ("a", "b"), None)
    with pytest.raises(ValueError):
        ConversationRecord("1", ("a", "b", "c"), "joy")


_text = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc", "Zl", "Zp")), max_size=20)


@given(st.lists(st.tuples(_text, _text, _text, st.sampled_from(["happy", "sad", "angry", "others"])), max_size=8))
def test_round_trip(tmp_path_factory, rows):
    recs = [ConversationRecord(str(i), (a, b, c), lab) for i, (a, b, c, lab) in enumerate(rows)]
    p = tmp_path_factory.mktemp("rt") / "c.tsv"
    write_conversations(p, recs)
    assert load_conversations(p) == recs


def test_write_rejects_tabs(tmp_path):
    with pytest.raises(ValueError):
        write_conversations(tmp_path / "x.tsv", [ConversationRecord("1", ("a\tb", "", ""), "sad")])


def test_lexicon_keeps_flagged_target_emotions(tmp_path):
    lex = load_lexicon(write(tmp_path, "l.txt", "happy\tjoy\t1\nhappy\tanger\t0\n"))
    assert lex.entries == {"happy": frozenset({"joy"})}


def test_lexicon_merges_emotions(tmp_path):
    lex = load_lexicon(write(tmp_path, "l.txt", "gloom\tsadness\t1\ngloom\tanger\t1\nGloom\tfear\t1\n"))
    assert lex.entries == {"gloom": frozenset({"sadness", "anger"})}


def test_lexicon_empty_and_bad_line(tmp_path):
    assert len(load_lexicon(write(tmp_path, "e.txt", ""))) == 0
    with pytest.raises(FormatError, match=":2:"):
        load_lexicon(write(tmp_path, "b.txt", "a\tjoy\t1\nbroken line\n"))


def test_lexicon_order_independent_and_idempotent(tmp_path):
    lines = ["a\tjoy\t1", "a\tanger\t1", "b\tsadness\t1", "b\tjoy\t0", "c\tpositive\t1", "d\tanger\t1"]
    ref = load_lexicon(write(tmp_path, "l0.txt", "\n".join(lines)))
    assert load_lexicon(tmp_path / "l0.txt") == ref
    rng = random.Random(0)
    for k in range(5):
        rng.shuffle(lines)
        assert load_lexicon(write(tmp_path, f"l{k + 1}.txt", "\n".join(lines))) == ref


def test_load_corpus(tmp_path):
    assert load_corpus(write(tmp_path, "a.txt", "one\ntwo\n")) == ["one", "two"]
    assert load_corpus(write(tmp_path, "b.txt", "one\n\n  \ntwo")) == ["one", "two"]
    assert load_corpus(write(tmp_path, "c.txt", "")) == []
    with pytest.raises(OSError):
        load_corpus(tmp_path / "missing.txt")
