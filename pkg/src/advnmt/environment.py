"""Episodic attack environment wrapping a frozen victim and discriminator.

An episode walks the unframed positions 1..n of a batch of N sources. At each
step the agent's replacements are written at position t, the discriminator
scores every alive sample, samples judged negative die, and a shared scalar
reward is emitted: ``-1`` once everything is dead, otherwise the batch mean of
``a * r_s`` (dead rows count as 0), plus ``b * r_d`` at the final position.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .candidates import CandidateTable, surface_for_unk
from .metrics import BleuConfig, relative_degradation, sentence_bleu
from .textdata import UNK, ParallelBatch, Vocab

KEEP = -1
MODES = ("adversarial", "reinforced")


@dataclass
class EnvState:
    src: np.ndarray                 # (N, S) current framed ids
    t: int
    alive: np.ndarray               # (N,) bool
    originals: np.ndarray
    src_mask: np.ndarray
    tgt: np.ndarray
    tgt_mask: np.ndarray
    refs: List[List[List[str]]]
    surfaces: List[List[str]]       # current surface tokens (unframed)
    lengths: np.ndarray             # (N,) unframed lengths
    n: int                          # episode length = max length
    perturbed: np.ndarray           # (N, S) bool, positions changed so far
    orig_surfaces: List[List[str]] = field(default_factory=list)
    survival: List[np.ndarray] = field(default_factory=list)   # D probabilities per step
    done: bool = False
    terminal: bool = False

    @property
    def N(self) -> int:
        return self.src.shape[0]


@dataclass
class RewardSignal:
    reward: float
    terminal: bool
    survival: np.ndarray            # (N,) P(positive), 0 for rows already dead before the step
    degradation: Optional[np.ndarray] = None
    per_sample: Optional[np.ndarray] = None   # each row's own share: a * r_s (+ b * r_d at the end)


class Environment:
    def __init__(self, victim, discriminator, table: CandidateTable, a: float = 0.5, b: float = 10.0,
                 mode: str = "adversarial", score_on: str = "every-step",
                 unk_surface: str = "repeat-last-char", bleu_cfg: BleuConfig = BleuConfig(),
                 cache: bool = True):
        if score_on not in ("every-step", "on-perturb"):
            raise ValueError(f"unknown scoring schedule {score_on!r}")
        if mode not in MODES:
            raise ValueError(f"unknown reward mode {mode!r}")
        self.victim, self.D, self.table = victim, discriminator, table
        self.a, self.b = a, b
        self.mode = mode
        self.score_on = score_on
        self.unk_surface = unk_surface
        self.bleu_cfg = bleu_cfg
        # D is frozen during episodes, so unchanged rows keep their last score
        self.cache = cache
        self.state: Optional[EnvState] = None
        self._probs: Optional[np.ndarray] = None
        self._tgt_pooled = None

    @property
    def src_vocab(self) -> Vocab:
        return self.victim.src_vocab

    def set_reward_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown reward mode {mode!r}")
        if self.state is not None and not self.state.done:
            raise RuntimeError("set_reward_mode: cannot change mode in the middle of an episode")
        self.mode = mode

    # -- discriminator access ------------------------------------------
    def _score(self, rows: np.ndarray) -> np.ndarray:
        s = self.state
        if self._tgt_pooled is None:
            return self.D.prob_positive(s.src[rows], s.src_mask[rows], s.tgt[rows], s.tgt_mask[rows])
        from .engine import Tensor
        pooled = Tensor(self._tgt_pooled[rows])
        return self.D.prob_positive(s.src[rows], s.src_mask[rows], s.tgt[rows], s.tgt_mask[rows], tgt_pooled=pooled)

    def reset(self, batch: ParallelBatch) -> EnvState:
        if len(batch) == 0:
            raise ValueError("reset: empty batch")
        lengths = batch.src_lengths.astype(int)
        self.state = EnvState(
            src=batch.src.copy(), t=1, alive=np.ones(len(batch), dtype=bool), originals=batch.src.copy(),
            src_mask=batch.src_mask, tgt=batch.tgt, tgt_mask=batch.tgt_mask,
            refs=[[list(t)] for t in batch.tgt_tokens], surfaces=[list(s) for s in batch.src_tokens],
            orig_surfaces=[list(s) for s in batch.src_tokens],
            lengths=lengths, n=int(lengths.max()), perturbed=np.zeros(batch.src.shape, dtype=bool))
        self._tgt_pooled = None
        if hasattr(self.D, "encode_target"):
            from .engine import no_grad
            was = self.D.training
            self.D.eval()
            with no_grad():
                self._tgt_pooled = self.D.encode_target(batch.tgt, batch.tgt_mask).data
            self.D.train(was)
        self._probs = None
        return self.state

    # -- dynamics --------------------------------------------------------
    def _surface(self, i: int, pos: int, new_id: int) -> str:
        original = self.state.orig_surfaces[i][pos - 1]
        if new_id == UNK:
            return surface_for_unk(original, self.unk_surface, self.src_vocab)
        return self.src_vocab.itos[new_id]

    def step(self, actions: Sequence[int]) -> tuple:
        """Apply per-sample replacement ids (``KEEP`` for no change) at position t."""
        s = self.state
        if s is None:
            raise RuntimeError("step: call reset first")
        if s.done:
            raise RuntimeError("step: episode already finished")
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (s.N,):
            raise ValueError(f"step: expected {s.N} actions, got shape {actions.shape}")
        t = s.t
        changed = np.zeros(s.N, dtype=bool)
        for i in np.flatnonzero(s.alive & (actions != KEEP) & (t <= s.lengths)):
            new = int(actions[i])
            if new == UNK and self.mode == "reinforced":
                continue
            if new == s.src[i, t]:
                continue
            s.surfaces[i][t - 1] = self._surface(i, t, new)
            s.src[i, t] = new
            s.perturbed[i, t] = True
            changed[i] = True

        if self._probs is None:
            self._probs = np.zeros(s.N)
            rows = np.flatnonzero(s.alive)
        elif self.cache:
            rows = np.flatnonzero(s.alive & changed)
        else:
            rows = np.flatnonzero(s.alive)
        if len(rows):
            self._probs[rows] = self._score(rows)
        probs = np.where(s.alive, self._probs, 0.0)
        s.survival.append(probs.copy())
        judged = s.alive if self.score_on == "every-step" else s.alive & changed
        s.alive = s.alive & ~(judged & (probs < 0.5))
        # survival reward is P(positive) only when D calls the pair positive
        r_s = np.where(s.alive & (probs >= 0.5), probs, 0.0)

        final = t >= s.n
        s.t = t + 1
        if not s.alive.any():
            s.done = s.terminal = True
            return s, RewardSignal(-1.0, True, probs, per_sample=np.full(s.N, -1.0))
        per_sample = self.a * r_s
        degradation = None
        if final:
            degradation = self.episodic_degradation()
            per_sample = per_sample + self.b * degradation
            s.done = True
        reward = float(per_sample.sum() / s.N)
        return s, RewardSignal(reward, False, probs, degradation, per_sample)

    def episodic_degradation(self) -> np.ndarray:
        """Per-sample relative drop in sentence BLEU; 0 for dead or untouched rows."""
        s = self.state
        if s is None or s.t < s.n:
            raise RuntimeError("episodic_degradation: episode has not reached its last position")
        rd = np.zeros(s.N)
        rows = [int(i) for i in np.flatnonzero(s.alive) if s.perturbed[i].any()]
        if not rows:
            return rd
        outs = self.victim.translate_batch([s.orig_surfaces[i] for i in rows] + [s.surfaces[i] for i in rows])
        k = len(rows)
        for j, i in enumerate(rows):
            orig = sentence_bleu(outs[j].tokens, s.refs[i], self.bleu_cfg)
            pert = sentence_bleu(outs[k + j].tokens, s.refs[i], self.bleu_cfg)
            rd[i] = relative_degradation(orig, pert)
        if self.mode == "reinforced":
            rd = -rd
        return rd
