"""Comparison attacks: first-order gradient search and random character noise."""
from __future__ import annotations

import math
import string
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .candidates import CandidateTable
from .engine import Tensor
from .textdata import Vocab, frame

NOISE_OPS = ("substitute", "swap", "drop", "insert")


@dataclass
class GsConfig:
    ratio: float = 0.2
    recompute: bool = True     # refresh gradients after every accepted flip

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError(f"GsConfig: ratio must lie in (0, 1], got {self.ratio}")


@dataclass
class RsniConfig:
    ratio: float = 0.2
    ops: Tuple[str, ...] = NOISE_OPS

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError(f"RsniConfig: ratio must lie in (0, 1], got {self.ratio}")
        bad = [op for op in self.ops if op not in NOISE_OPS]
        if bad:
            raise ValueError(f"RsniConfig: unknown noise ops {bad}")


def n_positions(ratio: float, n: int) -> int:
    return min(n, math.ceil(ratio * n - 1e-9))


def surrogate_loss(victim, src_ids: Sequence[int], tgt_ids: Sequence[int]) -> Tuple[Tensor, Tensor]:
    """(sum_t log(1 - P(y_t | x, y_<t)), embedded source leaf) for unframed id lists."""
    if len(tgt_ids) == 0:
        raise ValueError("surrogate_grad: empty target")
    src, sm = frame([list(src_ids)])
    tgt, tm = frame([list(tgt_ids)])
    x = Tensor(victim.src_emb.weight.data[src], requires_grad=True)
    return victim.adversarial_loss(x, sm, tgt, tm), x


def surrogate_grad(victim, src_ids: Sequence[int], tgt_ids: Sequence[int]) -> np.ndarray:
    """Gradient of the surrogate loss w.r.t. each source position's embedding, (n, emb)."""
    loss, x = surrogate_loss(victim, src_ids, tgt_ids)
    loss.backward()
    victim.backward_passes += 1
    for p in victim.parameters():
        p.grad = None
    return x.grad[0, 1:len(src_ids) + 1].astype(np.float64)


def first_order_scores(emb: np.ndarray, token: int, candidates: Sequence[int], grad: np.ndarray) -> np.ndarray:
    """(emb[c] - emb[token]) . grad for every candidate c."""
    return (emb[list(candidates)].astype(np.float64) - emb[token].astype(np.float64)) @ grad


def gs_attack(victim, src_ids: Sequence[int], tgt_ids: Sequence[int], table: CandidateTable,
              cfg: GsConfig = GsConfig(), seed: int = 0) -> Tuple[List[int], List[bool]]:
    """Greedy first-order search over a random subset of positions.

    Positions are visited left to right; each takes the candidate with the
    highest first-order score. Returns (perturbed ids, per-position flags).
    """
    ids = [int(x) for x in src_ids]
    n = len(ids)
    decisions = [False] * n
    if n == 0:
        return ids, decisions
    rng = np.random.default_rng(seed)
    positions = sorted(int(p) for p in rng.choice(n, size=n_positions(cfg.ratio, n), replace=False))
    emb = victim.src_emb.weight.data
    grad = None
    stale = False
    for pos in positions:
        cands = table.get(ids[pos])
        if not cands:
            continue
        if grad is None or (cfg.recompute and stale):
            grad = surrogate_grad(victim, ids, tgt_ids)
            stale = False
        scores = first_order_scores(emb, ids[pos], cands, grad[pos])
        best = cands[int(np.argmax(scores))]
        if best != ids[pos]:
            ids[pos] = best
            decisions[pos] = True
            stale = True
    return ids, decisions


# -- random synthetic noise ----------------------------------------------------

def _noise(token: str, op: str, rng: np.random.Generator, vocab_tokens: Sequence[str]) -> str:
    letters = string.ascii_lowercase
    if op == "substitute":
        pool = [t for t in vocab_tokens if t != token]
        return pool[int(rng.integers(len(pool)))] if pool else token
    if op == "swap":
        if len(token) < 2:
            return token          # nothing to swap
        i = int(rng.integers(len(token) - 1))
        return token[:i] + token[i + 1] + token[i] + token[i + 2:]
    if op == "drop":
        if len(token) < 2:
            return token          # dropping would delete the token
        i = int(rng.integers(len(token)))
        return token[:i] + token[i + 1:]
    if op == "insert":
        i = int(rng.integers(len(token) + 1))
        return token[:i] + letters[int(rng.integers(len(letters)))] + token[i:]
    raise ValueError(f"unknown noise op {op!r}")


def rsni_attack(tokens: Sequence[str], cfg: RsniConfig = RsniConfig(), seed: int = 0,
                vocab: Optional[Vocab] = None) -> Tuple[List[str], List[bool]]:
    """Apply a uniformly chosen enabled noise op at ceil(ratio * n) random positions.

    Returns (noisy tokens, per-position flags of positions that changed).
    """
    out = list(tokens)
    n = len(out)
    flags = [False] * n
    if n == 0 or not cfg.ops:
        return out, flags
    rng = np.random.default_rng(seed)
    pool = vocab.content_tokens() if vocab is not None else sorted(set(tokens))
    for pos in sorted(int(p) for p in rng.choice(n, size=n_positions(cfg.ratio, n), replace=False)):
        op = cfg.ops[int(rng.integers(len(cfg.ops)))]
        new = _noise(out[pos], op, rng, pool)
        flags[pos] = new != out[pos]
        out[pos] = new
    return out, flags
