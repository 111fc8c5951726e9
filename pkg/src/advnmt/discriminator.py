"""Pair matcher: does a (possibly perturbed) source still translate to the target?

Both sides are encoded by their own bidirectional GRU, mean-pooled over real
tokens, concatenated and passed through a dropout feedforward layer and a
2-way softmax (index 1 = positive).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Protocol, Sequence

import numpy as np

from .engine import Adam, BiGRU, Dropout, Embedding, Linear, Module, Tensor, checkpoint, no_grad, ops
from .textdata import Pair, ParallelBatch, Vocab, frame, make_batch

NEGATIVE, POSITIVE = 0, 1


class Perturber(Protocol):
    """Anything that rewrites a batch's source ids (an agent, or a test double)."""

    def perturb(self, batch: ParallelBatch, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class DiscriminatorConfig:
    emb: int = 64
    hidden: int = 128          # per direction; pooled side vectors are 256 wide
    ff: int = 256
    dropout: float = 0.1
    lr: float = 1e-3


class Discriminator(Module):
    def __init__(self, src_vocab_size: int, tgt_vocab_size: int,
                 cfg: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0,
                 src_init: Optional[np.ndarray] = None, tgt_init: Optional[np.ndarray] = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.src_emb = Embedding(src_vocab_size, cfg.emb, rng, src_init)
        self.tgt_emb = Embedding(tgt_vocab_size, cfg.emb, rng, tgt_init)
        self.src_enc = BiGRU(cfg.emb, cfg.hidden, rng)
        self.tgt_enc = BiGRU(cfg.emb, cfg.hidden, rng)
        self.ff = Linear(4 * cfg.hidden, cfg.ff, rng)
        self.drop = Dropout(cfg.dropout)
        self.out = Linear(cfg.ff, 2, rng)

    @classmethod
    def from_victim(cls, victim, cfg: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0):
        cfg = DiscriminatorConfig(**{**asdict(cfg), "emb": victim.cfg.emb})
        return cls(len(victim.src_vocab), len(victim.tgt_vocab), cfg, seed,
                   victim.src_emb.weight.data, victim.tgt_emb.weight.data)

    def encode_side(self, emb: Embedding, enc: BiGRU, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        return ops.mean(enc(emb(ids), mask), axis=1, mask=mask)

    def encode_target(self, tgt: np.ndarray, tgt_mask: np.ndarray) -> Tensor:
        return self.encode_side(self.tgt_emb, self.tgt_enc, tgt, tgt_mask)

    def logits(self, src, src_mask, tgt, tgt_mask, rng: Optional[np.random.Generator] = None,
               tgt_pooled: Optional[Tensor] = None) -> Tensor:
        ps = self.encode_side(self.src_emb, self.src_enc, src, src_mask)
        pt = tgt_pooled if tgt_pooled is not None else self.encode_target(tgt, tgt_mask)
        h = self.drop(ops.tanh(self.ff(ops.concat([ps, pt], axis=-1))), rng)
        return self.out(h)

    def prob_positive(self, src, src_mask, tgt, tgt_mask, tgt_pooled: Optional[Tensor] = None) -> np.ndarray:
        """P(positive) per row, evaluated without dropout or graph recording."""
        was = self.training
        self.eval()
        with no_grad():
            p = ops.softmax(self.logits(src, src_mask, tgt, tgt_mask, tgt_pooled=tgt_pooled)).data[:, POSITIVE]
        self.train(was)
        return p

    def score_pair(self, src_ids: Sequence[int], tgt_ids: Sequence[int], src_vocab=None, tgt_vocab=None) -> float:
        """P(positive) for one unframed (source ids, target ids) pair."""
        s, sm = frame([list(src_ids)])
        t, tm = frame([list(tgt_ids)])
        return float(self.prob_positive(s, sm, t, tm)[0])

    def loss(self, src, src_mask, tgt, tgt_mask, labels: np.ndarray, rng) -> Tensor:
        logp = ops.log_softmax(self.logits(src, src_mask, tgt, tgt_mask, rng))
        return -ops.mean(ops.pick(logp, labels))

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict(), {"kind": "discriminator", "config": asdict(self.cfg),
                                                  "src_vocab_size": self.src_emb.weight.shape[0],
                                                  "tgt_vocab_size": self.tgt_emb.weight.shape[0]})

    @classmethod
    def load(cls, path) -> "Discriminator":
        meta, entries = checkpoint.load(path)
        if meta.get("kind") != "discriminator":
            raise checkpoint.CheckpointError(f"{path}: expected a discriminator checkpoint")
        d = cls(meta["src_vocab_size"], meta["tgt_vocab_size"], DiscriminatorConfig(**meta["config"]))
        d.load_state_dict(entries)
        return d


def _unframe(src: np.ndarray, mask: np.ndarray) -> List[List[int]]:
    lengths = mask.sum(axis=1) - 2
    return [[int(x) for x in row[1:n + 1]] for row, n in zip(src, lengths)]


def _arrays(src_rows, tgt_rows, labels):
    src, sm = frame(src_rows)
    tgt, tm = frame(tgt_rows)
    return src, sm, tgt, tm, np.asarray(labels, dtype=np.int64)


def draw_batches(pairs: Sequence[Pair], n_train: int, n_test_pairs: int, perturber: Perturber,
                 rng: np.random.Generator, src_vocab: Vocab, tgt_vocab: Vocab):
    """A training batch of ``n_train`` rows (a random half perturbed, label 0)
    and a paired test batch of ``n_test_pairs`` fresh pairs shown clean and
    perturbed. All perturbations come from a single perturber call."""
    idx = rng.choice(len(pairs), size=n_train + n_test_pairs, replace=False)
    train_idx, test_idx = idx[:n_train], idx[n_train:]
    neg = np.zeros(n_train, dtype=bool)
    neg[rng.choice(n_train, size=n_train // 2, replace=False)] = True
    to_perturb = [int(i) for i in train_idx[neg]] + [int(i) for i in test_idx]
    srcs = [src_vocab.encode(pairs[i][0]) for i in idx]
    tgts = [tgt_vocab.encode(pairs[i][1]) for i in idx]
    perturbed: List[List[int]] = []
    if to_perturb:
        b = make_batch([pairs[i] for i in to_perturb], src_vocab, tgt_vocab, to_perturb)
        perturbed = _unframe(perturber.perturb(b, rng), b.src_mask)
    k = int(neg.sum())
    train_src = list(srcs[:n_train])
    for j, row in zip(np.flatnonzero(neg), perturbed[:k]):
        train_src[j] = row
    train = _arrays(train_src, tgts[:n_train], np.where(neg, NEGATIVE, POSITIVE)) if n_train else None
    test = None
    if n_test_pairs:
        test = _arrays(srcs[n_train:] + perturbed[k:], tgts[n_train:] * 2,
                       [POSITIVE] * n_test_pairs + [NEGATIVE] * n_test_pairs)
    return train, test


def build_training_batch(pairs: Sequence[Pair], batch_size: int, perturber: Perturber,
                         rng: np.random.Generator, src_vocab: Vocab, tgt_vocab: Vocab):
    """Random half of a fresh batch gets agent-perturbed sources (label 0)."""
    return draw_batches(pairs, batch_size, 0, perturber, rng, src_vocab, tgt_vocab)[0]


def build_paired_batch(pairs: Sequence[Pair], batch_size: int, perturber: Perturber,
                       rng: np.random.Generator, src_vocab: Vocab, tgt_vocab: Vocab):
    """``batch_size // 2`` fresh pairs, each once clean (label 1) and once perturbed (label 0)."""
    return draw_batches(pairs, 0, max(batch_size // 2, 1), perturber, rng, src_vocab, tgt_vocab)[1]


def _accuracy(D: "Discriminator", batch) -> tuple:
    src, sm, tgt, tm, labels = batch
    pred = (D.prob_positive(src, sm, tgt, tm) >= 0.5).astype(int)
    return int((pred == labels).sum()), len(labels)


def test_accuracy(D: Discriminator, pairs: Sequence[Pair], perturber: Perturber, n_batches: int,
                  rng: np.random.Generator, src_vocab: Vocab, tgt_vocab: Vocab,
                  batch_size: int = 50) -> float:
    """Accuracy over freshly sampled balanced batches (clean vs perturbed copies)."""
    correct = total = 0
    for _ in range(n_batches):
        c, n = _accuracy(D, build_paired_batch(pairs, batch_size, perturber, rng, src_vocab, tgt_vocab))
        correct += c
        total += n
    return correct / max(total, 1)


# keep pytest from collecting the function above when imported into test modules
test_accuracy.__test__ = False


def train_round(D: Discriminator, opt: Adam, pairs: Sequence[Pair], perturber: Perturber,
                rng: np.random.Generator, src_vocab: Vocab, tgt_vocab: Vocab,
                step_d: int = 80, acc_bound: float = 0.85, batch_size: int = 50) -> dict:
    """Update D for at most ``step_d`` batches or until its test accuracy reaches ``acc_bound``."""
    if len(pairs) < batch_size + batch_size // 2:
        raise ValueError(f"train_round: corpus has {len(pairs)} pairs, fewer than one batch of {batch_size} "
                         f"plus {batch_size // 2} test pairs")
    params = opt.params
    acc = 0.0
    steps = 0
    losses = []
    D.train()
    for steps in range(1, step_d + 1):
        train, test = draw_batches(pairs, batch_size, batch_size // 2, perturber, rng, src_vocab, tgt_vocab)
        loss = D.loss(*train, rng)
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        c, n = _accuracy(D, test)
        acc = c / n
        if acc >= acc_bound:
            break
    D.eval()
    for p in params:
        p.grad = None
    return {"accuracy": acc, "steps": steps, "loss": float(np.mean(losses)) if losses else 0.0}


def make_optimizer(D: Discriminator) -> Adam:
    return Adam(D.parameters(), lr=D.cfg.lr)
