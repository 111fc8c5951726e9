"""Vocabulary, tokenization, corpora, batching and synthetic parallel data."""
from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
N_RESERVED = len(RESERVED)

Pair = Tuple[List[str], List[str]]


class Vocab:
    """Token <-> id bijection with reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.itos[i] for i in ids]

    def content_tokens(self) -> List[str]:
        return self.itos[N_RESERVED:]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.content_tokens()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos


def build_vocab(corpus: Iterable[Sequence[str]], size_cap: int) -> Vocab:
    """Keep the most frequent tokens (ties lexicographic) up to ``size_cap`` ids."""
    counts: collections.Counter = collections.Counter()
    n = 0
    for seq in corpus:
        counts.update(seq)
        n += 1
    if n == 0:
        raise ValueError("build_vocab: empty corpus")
    if size_cap < N_RESERVED:
        raise ValueError(f"build_vocab: size_cap {size_cap} leaves no room for reserved tokens")
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([tok for tok, _ in ranked[: size_cap - N_RESERVED]])


@dataclass
class TokenSeq:
    ids: List[int]
    surface: List[str]

    def __post_init__(self):
        if len(self.ids) != len(self.surface):
            raise ValueError("TokenSeq: ids and surface must align")

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(line: str, mode: str = "whitespace") -> List[str]:
    if mode == "whitespace":
        return line.split()
    if mode == "char":
        return [c for c in line if not c.isspace()]
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def detokenize(tokens: Sequence[str], mode: str = "whitespace") -> str:
    if mode == "whitespace":
        return " ".join(tokens)
    if mode == "char":
        return "".join(tokens)
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def encode(vocab: Vocab, line: str, mode: str = "whitespace") -> TokenSeq:
    toks = tokenize(line, mode)
    return TokenSeq(vocab.encode(toks), toks)


@dataclass
class ParallelBatch:
    src: np.ndarray          # (N, S) framed, padded ids
    tgt: np.ndarray          # (N, T)
    src_mask: np.ndarray     # (N, S) bool, True on real tokens (BOS/EOS included)
    tgt_mask: np.ndarray
    src_tokens: List[List[str]] = field(default_factory=list)
    tgt_tokens: List[List[str]] = field(default_factory=list)
    index: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def src_lengths(self) -> np.ndarray:
        """Unframed token counts."""
        return self.src_mask.sum(axis=1) - 2


def frame(rows: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """BOS + ids + EOS, right-padded with PAD to a common length."""
    width = max(len(r) for r in rows) + 2
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, 0] = BOS
        out[i, 1:len(r) + 1] = r
        out[i, len(r) + 1] = EOS
    return out, out != PAD


def make_batch(pairs: Sequence[Pair], src_vocab: Vocab, tgt_vocab: Vocab,
               index: Optional[List[int]] = None) -> ParallelBatch:
    if not pairs:
        raise ValueError("make_batch: no pairs")
    src, sm = frame([src_vocab.encode(s) for s, _ in pairs])
    tgt, tm = frame([tgt_vocab.encode(t) for _, t in pairs])
    return ParallelBatch(src, tgt, sm, tm, [list(s) for s, _ in pairs], [list(t) for _, t in pairs],
                         list(index) if index is not None else list(range(len(pairs))))


def make_batches(pairs: Sequence[Pair], batch_size: int, seed: Optional[int],
                 src_vocab: Vocab, tgt_vocab: Vocab) -> Iterator[ParallelBatch]:
    """One epoch of batches; order shuffled by ``seed`` (``None`` keeps corpus order)."""
    if batch_size < 1:
        raise ValueError("make_batches: batch_size must be >= 1")
    order = np.arange(len(pairs))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        idx = [int(i) for i in order[start:start + batch_size]]
        yield make_batch([pairs[i] for i in idx], src_vocab, tgt_vocab, idx)


def sample_batch(pairs: Sequence[Pair], batch_size: int, rng: np.random.Generator,
                 src_vocab: Vocab, tgt_vocab: Vocab) -> ParallelBatch:
    idx = [int(i) for i in rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)]
    return make_batch([pairs[i] for i in idx], src_vocab, tgt_vocab, idx)


# -- corpus files ---------------------------------------------------------

def read_lines(path) -> List[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def write_lines(path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_parallel(src_path, tgt_path, mode: str = "whitespace") -> List[Pair]:
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise ValueError(f"parallel files differ in length: {len(src)} vs {len(tgt)}")
    return [(tokenize(s, mode), tokenize(t, mode)) for s, t in zip(src, tgt)]


def write_parallel(src_path, tgt_path, pairs: Sequence[Pair], mode: str = "whitespace") -> None:
    write_lines(src_path, (detokenize(s, mode) for s, _ in pairs))
    write_lines(tgt_path, (detokenize(t, mode) for _, t in pairs))


# -- synthetic corpora ----------------------------------------------------

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"
WORD_CLASSES = ("N", "V", "A", "M", "K")


def _pseudo_words(n: int, rng: np.random.Generator, taken: set) -> List[str]:
    words: List[str] = []
    while len(words) < n:
        syll = int(rng.integers(1, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syll))
        if rng.random() < 0.5:
            w += _CONSONANTS[rng.integers(len(_CONSONANTS))]
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass
class SynthCorpus:
    pairs: List[Pair]
    lexicon: Dict[str, str]
    tags: Dict[str, str]

    def tag_lines(self) -> List[str]:
        return [" ".join(self.tags[w] for w in src) for src, _ in self.pairs]


def synth_corpus(task: str, vocab_size: int, n_pairs: int, len_range: Tuple[int, int],
                 seed: int, zipf: float = 0.7) -> SynthCorpus:
    """Deterministic toy parallel corpus.

    ``copy``: target equals source. ``reverse``: target is the reversed source.
    ``lexicon``: each source word maps through a fixed random bijection onto a
    disjoint target word set, order preserved. Token frequencies follow a mild
    Zipf law; each source word also carries a random word-class tag.
    """
    if task not in ("copy", "reverse", "lexicon"):
        raise ValueError(f"unknown task {task!r}")
    if vocab_size < 10:
        raise ValueError("synth_corpus: vocab_size must be >= 10")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad len_range {len_range}")
    rng = np.random.default_rng(seed)
    taken: set = set()
    src_words = _pseudo_words(vocab_size, rng, taken)
    if task == "lexicon":
        tgt_words = [w.upper() for w in _pseudo_words(vocab_size, rng, taken)]
        lexicon = dict(zip(src_words, tgt_words))
    else:
        lexicon = {w: w for w in src_words}
    tags = {w: WORD_CLASSES[int(rng.integers(len(WORD_CLASSES)))] for w in src_words}
    probs = 1.0 / np.arange(1, vocab_size + 1) ** zipf
    probs /= probs.sum()
    pairs: List[Pair] = []
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        src = [src_words[i] for i in rng.choice(vocab_size, size=n, p=probs)]
        if task == "reverse":
            tgt = src[::-1]
        else:
            tgt = [lexicon[w] for w in src]
        pairs.append((src, list(tgt)))
    return SynthCorpus(pairs, lexicon, tags)


def split_corpus(pairs: Sequence[Pair], n_test: int) -> Tuple[List[Pair], List[Pair]]:
    return list(pairs[:-n_test]), list(pairs[-n_test:])
