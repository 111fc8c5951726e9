"""Corpus BLEU, character BLEU of source edits, and the degradation ratios.

BLEU follows the usual corpus recipe: clipped n-gram matches and hypothesis
n-gram totals are summed over the corpus, the closest reference length feeds
the brevity penalty, and the geometric mean of precisions is scaled to 100.
Text is lowercased first. A zero match count at order n > 1 is floored at
``1e-9`` so small corpora do not collapse to zero; orders with no hypothesis
n-grams at all are left out of the mean. No unigram overlap scores 0.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import List, Optional, Sequence

FLOOR = 1e-9


@dataclass(frozen=True)
class BleuConfig:
    max_order: int = 4
    floor: float = FLOOR
    lowercase: bool = True

    def __post_init__(self):
        if self.max_order < 1:
            raise ValueError("BleuConfig: max_order must be >= 1")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _prep(tokens: Sequence[str], lowercase: bool) -> List[str]:
    return [t.lower() for t in tokens] if lowercase else list(tokens)


def bleu_stats(hyps: Sequence[Sequence[str]], refs_lists: Sequence[Sequence[Sequence[str]]],
               cfg: BleuConfig = BleuConfig()):
    """Sufficient statistics: (matches[n], totals[n], hyp_len, ref_len)."""
    if len(hyps) != len(refs_lists):
        raise ValueError(f"bleu: {len(hyps)} hypotheses vs {len(refs_lists)} reference lists")
    matches = [0] * cfg.max_order
    totals = [0] * cfg.max_order
    hyp_len = ref_len = 0
    for hyp, refs in zip(hyps, refs_lists):
        if len(refs) == 0:
            raise ValueError("bleu: empty reference list")
        h = _prep(hyp, cfg.lowercase)
        rs = [_prep(r, cfg.lowercase) for r in refs]
        hyp_len += len(h)
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in rs)[1]
        for n in range(1, cfg.max_order + 1):
            hc = _ngrams(h, n)
            best: Counter = Counter()
            for r in rs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu_from_stats(matches, totals, hyp_len, ref_len, cfg: BleuConfig = BleuConfig()) -> float:
    """BLEU as a fraction in [0, 1]."""
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        if t == 0:
            break
        logs.append(math.log(max(m, cfg.floor) / t))
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(sum(logs) / len(logs))


def bleu(hyps: Sequence[Sequence[str]], refs_lists: Sequence[Sequence[Sequence[str]]],
         cfg: BleuConfig = BleuConfig()) -> float:
    """Corpus BLEU in [0, 100] over tokenized hypotheses and reference lists."""
    return 100.0 * bleu_from_stats(*bleu_stats(hyps, refs_lists, cfg), cfg)


def sentence_bleu(hyp: Sequence[str], refs: Sequence[Sequence[str]],
                  cfg: BleuConfig = BleuConfig()) -> float:
    return bleu([hyp], [refs], cfg)


def _chars(tokens_or_text) -> List[str]:
    text = tokens_or_text if isinstance(tokens_or_text, str) else " ".join(tokens_or_text)
    return list(text)


def chr_bleu(perturbed_srcs: Sequence, original_srcs: Sequence, cfg: BleuConfig = BleuConfig()) -> float:
    """Character-level BLEU in [0, 1] of perturbed sources against the originals.

    Items are strings or token lists (joined by single spaces); spaces count
    as characters.
    """
    if len(perturbed_srcs) != len(original_srcs):
        raise ValueError(f"chr_bleu: {len(perturbed_srcs)} vs {len(original_srcs)} sources")
    hyps = [_chars(p) for p in perturbed_srcs]
    refs = [[_chars(o)] for o in original_srcs]
    return bleu_from_stats(*bleu_stats(hyps, refs, cfg), cfg)


def relative_decrease(bleu_orig: float, bleu_pert: float, chr: float) -> Optional[float]:
    """RD = (BLEU(y) - BLEU(y')) / ((1 - chrBLEU) * BLEU(y)); ``None`` when undefined."""
    if chr >= 1.0 or bleu_orig <= 0.0:
        return None
    return (bleu_orig - bleu_pert) / ((1.0 - chr) * bleu_orig)


def relative_degradation(score_orig: float, score_pert: float) -> float:
    """(score(y) - score(y')) / score(y), and 0 when score(y) is 0."""
    if score_orig == 0:
        return 0.0
    return (score_orig - score_pert) / score_orig


def fmt_rd(rd: Optional[float]) -> str:
    return "n/a" if rd is None else f"{rd:.3f}"
