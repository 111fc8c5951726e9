import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advnmt.textdata import (BOS, EOS, PAD, UNK, Vocab, build_vocab, detokenize, encode, frame, make_batch,
                             make_batches, read_parallel, synth_corpus, tokenize, write_parallel)


def test_build_vocab_frequency_order():
    v = build_vocab([["a", "a", "b"]], 10)
    assert v.id("a") == 4 and v.id("b") == 5


def test_cap_truncates_to_unk():
    toks = [f"w{i}" for i in range(10)]
    v = build_vocab([toks], 5)
    assert len(v) == 5
    assert sum(v.id(t) == UNK for t in toks) == 9


def test_ties_are_lexicographic_and_deterministic():
    corpus = [["z", "y", "x"], ["y", "x", "z"]]
    a, b = build_vocab(corpus, 10), build_vocab(list(reversed(corpus)), 10)
    assert a == b
    assert a.content_tokens() == ["x", "y", "z"]


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_vocab([], 10)


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab([["b", "a", "a"]], 10)
    v.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text() == "a\nb\n"
    assert Vocab.load(tmp_path / "v.txt") == v


def test_tokenize_examples():
    assert tokenize("ab cd", "whitespace") == ["ab", "cd"]
    assert tokenize("ab", "char") == ["a", "b"]
    assert tokenize("", "whitespace") == []
    seq = encode(build_vocab([["ab"]], 10), "ab zz")
    assert seq.ids == [4, UNK] and seq.surface == ["ab", "zz"]


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.text(alphabet="abcxyzé中", min_size=1, max_size=6), max_size=8))
def test_whitespace_round_trip(words):
    line = " ".join(words)
    assert detokenize(tokenize(line)) == line


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="abc中文", max_size=20))
def test_char_round_trip(line):
    assert detokenize(tokenize(line, "char"), "char") == line


def test_frame_invariants():
    src, mask = frame([[5, 6, 7], [8]])
    assert src.tolist() == [[BOS, 5, 6, 7, EOS], [BOS, 8, EOS, PAD, PAD]]
    assert mask.tolist() == [[True] * 5, [True] * 3 + [False] * 2]
    for row, m in zip(src, mask):
        assert list(row).count(EOS) == 1
        assert PAD not in row[m]


def test_make_batches_sizes_and_coverage():
    pairs = [([f"s{i}"], [f"t{i}"]) for i in range(100)]
    sv = build_vocab([s for s, _ in pairs], 200)
    tv = build_vocab([t for _, t in pairs], 200)
    batches = list(make_batches(pairs, 50, 3, sv, tv))
    assert [len(b) for b in batches] == [50, 50]
    assert sorted(i for b in batches for i in b.index) == list(range(100))
    again = list(make_batches(pairs, 50, 3, sv, tv))
    assert [b.index for b in batches] == [b.index for b in again]


def test_single_pair_batch_has_no_extra_padding():
    pairs = [(["a", "b"], ["x"])]
    b = make_batch(pairs, build_vocab([["a", "b"]], 10), build_vocab([["x"]], 10))
    assert b.src.shape == (1, 4) and b.tgt.shape == (1, 3)
    assert b.src_mask.all() and b.tgt_mask.all()
    assert b.src_lengths.tolist() == [2]


def test_synth_tasks():
    copy = synth_corpus("copy", 20, 10, (3, 5), 1)
    assert all(s == t for s, t in copy.pairs)
    rev = synth_corpus("reverse", 20, 10, (3, 5), 1)
    assert all(s[::-1] == t for s, t in rev.pairs)
    lex = synth_corpus("lexicon", 20, 10, (3, 5), 1)
    assert all([lex.lexicon[w] for w in s] == t for s, t in lex.pairs)
    assert len(set(lex.lexicon.values())) == len(lex.lexicon)
    assert all(len(line.split()) == len(s) for line, (s, _) in zip(lex.tag_lines(), lex.pairs))


def test_synth_deterministic_and_validated():
    a = synth_corpus("lexicon", 30, 50, (5, 15), 7)
    b = synth_corpus("lexicon", 30, 50, (5, 15), 7)
    assert a.pairs == b.pairs and a.lexicon == b.lexicon
    with pytest.raises(ValueError):
        synth_corpus("lexicon", 9, 10, (1, 2), 0)


def test_parallel_files_round_trip(tmp_path):
    pairs = synth_corpus("lexicon", 20, 30, (2, 6), 2).pairs
    write_parallel(tmp_path / "a.src", tmp_path / "a.tgt", pairs)
    assert read_parallel(tmp_path / "a.src", tmp_path / "a.tgt") == pairs
