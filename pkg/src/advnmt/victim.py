"""Attention-based RNN encoder-decoder: the translation model under attack.

The attack side touches a victim only through :meth:`Victim.translate_batch`
and :meth:`Victim.export_embeddings` (plus gradients for the search baseline).
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .engine import Adam, BiGRU, Embedding, GRUCell, Linear, Module, Tensor, checkpoint, clip_grad_norm, no_grad, ops
from .textdata import BOS, EOS, PAD, UNK, Pair, ParallelBatch, Vocab, detokenize, frame, make_batches, tokenize

logger = logging.getLogger(__name__)


@dataclass
class VictimConfig:
    emb: int = 64
    enc_hidden: int = 64       # per direction
    dec_hidden: int = 128
    att: int = 128
    readout: int = 128
    tokenizer: str = "whitespace"


@dataclass
class Translation:
    ids: List[int]
    logprobs: List[float]
    attention: Optional[np.ndarray] = None   # (len(ids), src_len)
    tokens: List[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != len(self.logprobs):
            raise ValueError("Translation: ids and logprobs differ in length")


class Encoded:
    """Encoder outputs reused at every decoder step."""

    def __init__(self, H: Tensor, keys: Tensor, mask: np.ndarray, s0: Tensor):
        self.H, self.keys, self.mask, self.s0 = H, keys, mask, s0


class Victim(Module):
    def __init__(self, src_vocab: Vocab, tgt_vocab: Vocab, cfg: VictimConfig = VictimConfig(),
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        ctx = 2 * cfg.enc_hidden
        self.src_emb = Embedding(len(src_vocab), cfg.emb, rng)
        self.tgt_emb = Embedding(len(tgt_vocab), cfg.emb, rng)
        self.encoder = BiGRU(cfg.emb, cfg.enc_hidden, rng)
        self.init = Linear(ctx, cfg.dec_hidden, rng)
        self.att_k = Linear(ctx, cfg.att, rng, bias=False)
        self.att_q = Linear(cfg.dec_hidden, cfg.att, rng)
        self.att_v = Linear(cfg.att, 1, rng, bias=False)
        self.decoder = GRUCell(cfg.emb + ctx, cfg.dec_hidden, rng)
        self.readout = Linear(cfg.dec_hidden + ctx + cfg.emb, cfg.readout, rng)
        self.out = Linear(cfg.readout, len(tgt_vocab), rng)
        self.backward_passes = 0

    # -- core -------------------------------------------------------------
    def encode_embedded(self, x: Tensor, mask: np.ndarray) -> Encoded:
        H = self.encoder(x, mask)
        keys = self.att_k(H)
        s0 = ops.tanh(self.init(ops.mean(H, axis=1, mask=mask)))
        return Encoded(H, keys, mask, s0)

    def encode(self, src: np.ndarray, mask: np.ndarray) -> Encoded:
        return self.encode_embedded(self.src_emb(src), mask)

    def step(self, enc: Encoded, y_prev: np.ndarray, s: Tensor):
        """One decoder step: returns (readout features, new state, attention)."""
        B, S = enc.mask.shape
        q = ops.reshape(self.att_q(s), (B, 1, -1))
        scores = ops.reshape(self.att_v(ops.tanh(ops.add(enc.keys, q))), (B, S))
        alpha = ops.softmax(scores, axis=-1, mask=enc.mask)
        ctx = ops.reshape(ops.matmul(ops.reshape(alpha, (B, 1, S)), enc.H), (B, -1))
        e = self.tgt_emb(y_prev)
        s_new = self.decoder(ops.concat([e, ctx], axis=-1), s)
        r = ops.tanh(self.readout(ops.concat([s_new, ctx, e], axis=-1)))
        return r, s_new, alpha

    def target_logprobs(self, enc: Encoded, tgt: np.ndarray) -> Tensor:
        """Teacher-forced log-probabilities (B, T-1, V) of tgt[:, 1:]."""
        s = enc.s0
        feats = []
        for i in range(tgt.shape[1] - 1):
            r, s, _ = self.step(enc, tgt[:, i], s)
            feats.append(r)
        return ops.log_softmax(self.out(ops.stack(feats, axis=1)), axis=-1)

    def loss(self, batch: ParallelBatch) -> Tensor:
        """Mean per-token cross-entropy over unmasked target positions."""
        if len(batch) == 0:
            raise ValueError("loss: empty batch")
        enc = self.encode(batch.src, batch.src_mask)
        logp = self.target_logprobs(enc, batch.tgt)
        nll = ops.pick(logp, batch.tgt[:, 1:])
        return -ops.mean(nll, mask=batch.tgt_mask[:, 1:])

    def adversarial_loss(self, src_embedded: Tensor, src_mask: np.ndarray, tgt: np.ndarray,
                         tgt_mask: np.ndarray) -> Tensor:
        """Sum over target positions of log(1 - P(y_t | X', y_<t))."""
        enc = self.encode_embedded(src_embedded, src_mask)
        logp = ops.pick(self.target_logprobs(enc, tgt), tgt[:, 1:])
        p = ops.exp(logp)
        one_minus = ops.add(-p, Tensor(np.asarray(1.0 + 1e-12, dtype=p.dtype)))
        m = Tensor(tgt_mask[:, 1:].astype(p.dtype))
        return ops.sum(ops.mul(ops.log(one_minus), m))

    # -- decoding ---------------------------------------------------------
    def greedy_decode_ids(self, src: np.ndarray, mask: np.ndarray, max_len: Optional[int] = None,
                          keep_attention: bool = False) -> List[Translation]:
        B = src.shape[0]
        # each row gets its own cap so batching never changes a translation
        if max_len is None:
            caps = 2 * mask.sum(axis=1).astype(np.int64) + 5
        else:
            caps = np.full(B, int(max_len), dtype=np.int64)
        max_len = int(caps.max()) if B else 0
        with no_grad():
            enc = self.encode(src, mask)
            s = enc.s0
            y = np.full(B, BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            ids = [[] for _ in range(B)]
            lps = [[] for _ in range(B)]
            atts = [[] for _ in range(B)]
            for _ in range(max_len):
                r, s, alpha = self.step(enc, y, s)
                logp = ops.log_softmax(self.out(r), axis=-1).data
                y = logp.argmax(axis=-1)
                for b in np.flatnonzero(~done):
                    ids[b].append(int(y[b]))
                    lps[b].append(float(logp[b, y[b]]))
                    if keep_attention:
                        atts[b].append(alpha.data[b].copy())
                done |= y == EOS
                done |= np.array([len(r) for r in ids]) >= caps
                if done.all():
                    break
        out = []
        for b in range(B):
            content = ids[b][:-1] if ids[b] and ids[b][-1] == EOS else ids[b]
            att = np.array(atts[b]) if keep_attention else None
            out.append(Translation(ids[b], lps[b], att, self.tgt_vocab.decode(content)))
        return out

    def greedy_decode(self, src_ids: Sequence[int], max_len: Optional[int] = None) -> Translation:
        """Decode one unframed source id sequence."""
        src, mask = frame([list(src_ids)])
        return self.greedy_decode_ids(src, mask, max_len, keep_attention=True)[0]

    def translate_batch(self, srcs: Sequence, max_len: Optional[int] = None,
                        batch_size: int = 100) -> List[Translation]:
        """Translate raw surface sources (strings or token lists).

        Sources are re-tokenized with the victim's tokenizer and re-encoded
        through its own vocabulary, so unknown surfaces become UNK.
        """
        mode = self.cfg.tokenizer
        toks = [tokenize(s, mode) if isinstance(s, str) else tokenize(detokenize(s, mode), mode)
                for s in srcs]
        out: List[Translation] = []
        for start in range(0, len(toks), batch_size):
            chunk = [self.src_vocab.encode(t) for t in toks[start:start + batch_size]]
            src, mask = frame(chunk)
            out.extend(self.greedy_decode_ids(src, mask, max_len))
        return out

    def export_embeddings(self) -> np.ndarray:
        """Source embedding table (|V_src|, emb); row i embeds token id i."""
        return self.src_emb.weight.data.copy()

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        meta = {"kind": "victim", "config": asdict(self.cfg),
                "src_vocab": self.src_vocab.content_tokens(),
                "tgt_vocab": self.tgt_vocab.content_tokens()}
        checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "Victim":
        meta, entries = checkpoint.load(path)
        if meta.get("kind") != "victim":
            raise checkpoint.CheckpointError(f"{path}: expected a victim checkpoint, got {meta.get('kind')!r}")
        model = cls(Vocab(meta["src_vocab"]), Vocab(meta["tgt_vocab"]), VictimConfig(**meta["config"]))
        model.load_state_dict(entries)
        return model


def train_victim(model: Victim, pairs: Sequence[Pair], steps: int, batch_size: int = 50,
                 lr: float = 2e-3, seed: int = 0, clip: float = 5.0,
                 time_budget: Optional[float] = None, log_every: int = 100,
                 callback=None) -> List[float]:
    """Teacher-forced training with Adam. Returns the per-step loss history."""
    params = model.parameters()
    opt = Adam(params, lr=lr)
    history: List[float] = []
    model.train()
    epoch = 0
    start = time.time()
    while len(history) < steps:
        for batch in make_batches(pairs, batch_size, seed * 100003 + epoch, model.src_vocab, model.tgt_vocab):
            loss = model.loss(batch)
            loss.backward()
            clip_grad_norm(params, clip)
            opt.step()
            history.append(float(loss.data))
            if log_every and len(history) % log_every == 0:
                logger.info("victim step %d loss %.4f", len(history), np.mean(history[-log_every:]))
            if callback is not None:
                callback(len(history), history[-1])
            if len(history) >= steps:
                break
            if time_budget is not None and time.time() - start > time_budget:
                model.eval()
                return history
        epoch += 1
    model.eval()
    return history
