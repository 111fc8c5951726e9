"""Actor-critic perturbation policy and its asynchronous training loop.

The agent reads the current (partly perturbed) source batch with a shared
embedding + bidirectional GRU encoder. For position t it concatenates the
encoder state at t, the masked mean of all states and the embeddings of the
window (x[t-1], x[t], x[t+1]); an actor head maps that to {perturb, keep} and a
critic head to a scalar value.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .candidates import CandidateTable
from .discriminator import Discriminator, make_optimizer as make_d_optimizer, test_accuracy, train_round
from .engine import Adafactor, BiGRU, Embedding, Linear, Module, Tensor, checkpoint, clip_grad_norm, no_grad, ops
from .environment import KEEP, Environment
from .textdata import N_RESERVED, UNK, Pair, ParallelBatch, sample_batch

logger = logging.getLogger(__name__)

PERTURB, HOLD = 0, 1      # action indices of the actor's distribution
INFERENCE_RULES = ("conjunction", "critic")


@dataclass
class AgentConfig:
    emb: int = 64
    hidden: int = 64          # per direction
    ff: int = 256


class Agent(Module):
    def __init__(self, vocab_size: int, cfg: AgentConfig = AgentConfig(), seed: int = 0,
                 emb_init: Optional[np.ndarray] = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.emb = Embedding(vocab_size, cfg.emb, rng, emb_init)
        self.encoder = BiGRU(cfg.emb, cfg.hidden, rng)
        feat = 4 * cfg.hidden + 3 * cfg.emb
        self.actor_ff = Linear(feat, cfg.ff, rng)
        self.actor_out = Linear(cfg.ff, 2, rng)
        self.critic_ff = Linear(feat, cfg.ff, rng)
        self.critic_out = Linear(cfg.ff, 1, rng)

    @classmethod
    def from_victim(cls, victim, cfg: AgentConfig = AgentConfig(), seed: int = 0) -> "Agent":
        cfg = AgentConfig(**{**asdict(cfg), "emb": victim.cfg.emb})
        return cls(len(victim.src_vocab), cfg, seed, victim.export_embeddings())

    @property
    def vocab_size(self) -> int:
        return self.emb.weight.shape[0]

    def features(self, src: np.ndarray, mask: np.ndarray, t: int) -> Tensor:
        n = src.shape[1] - 2
        if not 1 <= t <= n:
            raise ValueError(f"policy_forward: position {t} outside 1..{n}")
        E = self.emb(src)
        H = self.encoder(E, mask)
        pooled = ops.mean(H, axis=1, mask=mask)
        return ops.concat([H[:, t], pooled, E[:, t - 1], E[:, t], E[:, t + 1]], axis=-1)

    def forward(self, src: np.ndarray, mask: np.ndarray, t: int) -> Tuple[Tensor, Tensor]:
        """Actor log-probabilities (N, 2) and critic values (N,)."""
        f = self.features(src, mask, t)
        logp = ops.log_softmax(self.actor_out(ops.tanh(self.actor_ff(f))), axis=-1)
        v = self.critic_out(ops.tanh(self.critic_ff(f)))
        return logp, ops.reshape(v, (src.shape[0],))

    def policy_forward(self, src: np.ndarray, mask: np.ndarray, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """(distribution over {perturb, keep}, V) as plain arrays."""
        with no_grad():
            logp, v = self.forward(src, mask, t)
        return np.exp(logp.data), v.data

    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = {"kind": "agent", "config": asdict(self.cfg), "vocab_size": self.vocab_size}
        meta.update(extra or {})
        checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "Agent":
        meta, entries = checkpoint.load(path)
        if meta.get("kind") != "agent":
            raise checkpoint.CheckpointError(f"{path}: expected an agent checkpoint")
        agent = cls(meta["vocab_size"], AgentConfig(**meta["config"]))
        agent.load_state_dict(entries)
        agent.meta = meta
        return agent


# -- action selection --------------------------------------------------------

def sample_action(dist: Sequence[float], mode: str, rng: Optional[np.random.Generator] = None,
                  candidates: Sequence[int] = ()) -> Tuple[int, Optional[int]]:
    """(decision, replacement) for one position.

    ``stochastic``: Bernoulli draw on P(perturb), then a uniform candidate.
    ``greedy``: perturb iff P(perturb) > P(keep), then the nearest candidate.
    Without candidates a perturb decision has no replacement.
    """
    if mode == "stochastic":
        if rng is None:
            raise ValueError("sample_action: stochastic mode needs an rng")
        decision = PERTURB if rng.random() < dist[PERTURB] else HOLD
        if decision == PERTURB and len(candidates):
            return decision, int(candidates[int(rng.integers(len(candidates)))])
    elif mode == "greedy":
        decision = PERTURB if dist[PERTURB] > dist[HOLD] else HOLD
        if decision == PERTURB and len(candidates):
            return decision, int(candidates[0])
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return decision, None


def sample_actions(probs: np.ndarray, tokens: np.ndarray, table: CandidateTable, active: np.ndarray,
                   rng: np.random.Generator, forbid_unk: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Stochastic decisions for a batch; inactive rows keep. Returns (decisions, replacement ids)."""
    N = len(tokens)
    draws = rng.random(N)
    decisions = np.where(active & (draws < probs[:, PERTURB]), PERTURB, HOLD)
    repl = np.full(N, KEEP, dtype=np.int64)
    for i in np.flatnonzero(decisions == PERTURB):
        cands = candidate_list(table, tokens[i], forbid_unk)
        repl[i] = cands[int(rng.integers(len(cands)))]
    return decisions, repl


def candidate_list(table: CandidateTable, token: int, forbid_unk: bool = False) -> List[int]:
    cands = table.get(token)
    if forbid_unk:
        cands = [c for c in cands if c != UNK]
    return cands


def has_candidates(table: CandidateTable, tokens: np.ndarray, forbid_unk: bool = False) -> np.ndarray:
    return np.array([len(candidate_list(table, tok, forbid_unk)) > 0 for tok in tokens], dtype=bool)


# -- advantages and losses -------------------------------------------------------

def advantages(rewards, values, bootstrap, gamma: float, mask=None) -> Tuple[np.ndarray, np.ndarray]:
    """Backward recursion A_t = r_t + g V_{t+1} - V_t + g A_{t+1} and returns R_t.

    ``rewards`` has shape (T,) or (T, N) (a shared per-step reward broadcasts
    over samples); ``values`` is (T,) or (T, N); ``bootstrap`` is the value
    after the last step (0 for terminal). Where ``mask`` is False the sample
    is out of the episode: its advantage and return are 0 and it passes a zero
    value and advantage back to the previous step.
    """
    values = np.asarray(values, dtype=np.float64)
    T = values.shape[0]
    if T == 0:
        raise ValueError("advantages: empty trace")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim < values.ndim:
        rewards = rewards.reshape(rewards.shape + (1,) * (values.ndim - rewards.ndim))
    rewards = np.broadcast_to(rewards, values.shape)
    mask = np.ones(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    A = np.zeros(values.shape)
    R = np.zeros(values.shape)
    next_v = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), values.shape[1:]).copy()
    next_r = next_v.copy()
    next_a = np.zeros(values.shape[1:])
    for t in range(T - 1, -1, -1):
        m = mask[t]
        R[t] = np.where(m, rewards[t] + gamma * next_r, 0.0)
        A[t] = np.where(m, rewards[t] + gamma * next_v - values[t] + gamma * next_a, 0.0)
        next_r, next_a = R[t], A[t]
        next_v = np.where(m, values[t], 0.0)
    return A, R


@dataclass
class StepRecord:
    logp: Tensor              # (N, 2) log-distribution
    value: Tensor             # (N,)
    decisions: np.ndarray     # (N,) action indices
    reward: object            # shared scalar, or (N,) per-sample rewards
    act_mask: np.ndarray      # rows that made a real decision
    value_mask: np.ndarray    # rows still in the episode at this step


@dataclass
class Trace:
    steps: List[StepRecord] = field(default_factory=list)
    bootstrap: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.steps)


def trace_targets(trace: Trace, gamma: float = 0.99) -> Tuple[np.ndarray, np.ndarray]:
    """(A, R) for a trace, both (T, N); constants with respect to the loss."""
    N = trace.steps[0].value.shape[0]
    vals = np.stack([s.value.data for s in trace.steps])
    vmask = np.stack([s.value_mask for s in trace.steps])
    boot = np.zeros(N) if trace.bootstrap is None else trace.bootstrap
    rewards = np.stack([np.broadcast_to(np.asarray(s.reward, dtype=np.float64), (N,)) for s in trace.steps])
    return advantages(rewards, vals, boot, gamma, vmask)


def accumulate_losses(trace: Trace, gamma: float = 0.99, alpha: float = 0.5, beta: float = 0.05,
                      targets: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """sum_t mean_i [alpha * 0.5 (R_t - V_t)^2 - log pi(a_t) A_t - beta * H_t] over unmasked entries.

    ``targets`` overrides the (A, R) pair computed from the trace.
    """
    if len(trace) == 0:
        raise ValueError("accumulate_losses: empty trace")
    N = trace.steps[0].value.shape[0]
    dtype = trace.steps[0].value.data.dtype
    vmask = np.stack([s.value_mask for s in trace.steps])
    amask = np.stack([s.act_mask for s in trace.steps]).astype(dtype)
    A, R = targets if targets is not None else trace_targets(trace, gamma)
    V = ops.stack([s.value for s in trace.steps], axis=0)                 # (T, N)
    LP = ops.stack([s.logp for s in trace.steps], axis=0)                 # (T, N, 2)
    chosen = ops.pick(LP, np.stack([s.decisions for s in trace.steps]))
    ent = -ops.sum(ops.mul(ops.exp(LP), LP), axis=-1)
    diff = ops.sub(V, Tensor(R.astype(dtype)))
    v_loss = ops.mul(ops.mul(diff, diff), Tensor((0.5 * alpha * vmask).astype(dtype)))
    pi = ops.mul(chosen, Tensor((A * amask).astype(dtype)))
    h = ops.mul(ent, Tensor((beta * amask).astype(dtype)))
    total = ops.sum(ops.sub(ops.sub(v_loss, pi), h))
    return ops.mul(total, Tensor(np.asarray(1.0 / N, dtype=dtype)))


# -- configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    gamma: float = 0.99
    alpha: float = 0.5
    beta: float = 0.05
    step_a: int = 120
    step_d: int = 80
    acc_bound: float = 0.85
    patience: int = 15
    conv_bound: float = 0.52
    t_max: int = 0              # 0: whole episode in one segment
    workers: int = 1
    seed: int = 0
    batch_size: int = 50
    a: float = 0.5
    b: float = 10.0
    lr: float = 1e-3
    warmup: int = 100
    grad_clip: float = 5.0
    test_batches: int = 4
    max_rounds: int = 100
    score_on: str = "every-step"
    reward_mode: str = "adversarial"
    unk_surface: str = "repeat-last-char"
    reward_credit: str = "batch"    # "sample": each row is credited with its own reward share

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        for name in ("step_a", "step_d", "patience", "workers", "batch_size", "test_batches", "max_rounds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.reward_credit not in ("batch", "sample"):
            raise ValueError(f"unknown reward_credit {self.reward_credit!r}")
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")


# -- rollouts ------------------------------------------------------------------

def _sync(local: Agent, params: Sequence[Tensor], opt) -> None:
    for lp, gp in zip(local.parameters(), params):
        with opt._locks[id(gp)]:
            lp.data[...] = gp.data


def run_episode(local: Agent, global_params: Sequence[Tensor], opt, env: Environment, batch: ParallelBatch,
                cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One episode split into segments of at most t_max steps; each segment
    syncs from the global parameters and pushes one gradient update."""
    state = env.reset(batch)
    forbid_unk = env.mode == "reinforced"
    seg_len = cfg.t_max or state.n
    total = 0.0
    perturbed = 0
    local_params = local.parameters()
    while not state.done:
        _sync(local, global_params, opt)
        trace = Trace()
        for _ in range(seg_len):
            t = state.t
            logp, v = local.forward(state.src, state.src_mask, t)
            tokens = state.src[:, t]
            act = state.alive & (t <= state.lengths) & has_candidates(env.table, tokens, forbid_unk)
            decisions, repl = sample_actions(np.exp(logp.data), tokens, env.table, act, rng, forbid_unk)
            vmask = state.alive.copy()
            state, sig = env.step(repl)
            r = sig.per_sample if cfg.reward_credit == "sample" else sig.reward
            trace.steps.append(StepRecord(logp, v, decisions, r, act, vmask))
            total += sig.reward
            if state.done:
                break
        if state.done:
            trace.bootstrap = np.zeros(state.N)
        else:
            with no_grad():
                _, nv = local.forward(state.src, state.src_mask, state.t)
            trace.bootstrap = np.where(state.alive, nv.data, 0.0)
        loss = accumulate_losses(trace, cfg.gamma, cfg.alpha, cfg.beta)
        loss.backward()
        grads = []
        for p in local_params:
            grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
        if cfg.grad_clip:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
            if norm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / norm) for g in grads]
        opt.step(grads)
        for p in local_params:
            p.grad = None
    perturbed = int(state.perturbed.any(axis=1).sum())
    return {"reward": total, "survivors": int(state.alive.sum()), "perturbed_rows": perturbed,
            "terminal": state.terminal}


class PolicyPerturber:
    """Rewrites a batch's sources with the agent (no gradients, no environment)."""

    def __init__(self, agent: Agent, table: CandidateTable, mode: str = "stochastic", forbid_unk: bool = False):
        self.agent, self.table, self.mode, self.forbid_unk = agent, table, mode, forbid_unk

    def perturb(self, batch: ParallelBatch, rng: np.random.Generator) -> np.ndarray:
        src = batch.src.copy()
        lengths = batch.src_lengths
        for t in range(1, src.shape[1] - 1):
            probs, _ = self.agent.policy_forward(src, batch.src_mask, t)
            tokens = src[:, t]
            act = (t <= lengths) & has_candidates(self.table, tokens, self.forbid_unk)
            _, repl = sample_actions(probs, tokens, self.table, act, rng, self.forbid_unk)
            hit = repl != KEEP
            src[hit, t] = repl[hit]
        return src


# -- training loop ---------------------------------------------------------------

def _check_vocab(agent: Agent, victim, D: Discriminator) -> None:
    n = len(victim.src_vocab)
    if agent.vocab_size != n:
        raise ValueError(f"train: agent vocabulary {agent.vocab_size} != victim source vocabulary {n}")
    if D.src_emb.weight.shape[0] != n or D.tgt_emb.weight.shape[0] != len(victim.tgt_vocab):
        raise ValueError("train: discriminator vocabulary does not match the victim")


@dataclass
class TrainResult:
    agent: Agent
    discriminator: Discriminator
    log: List[dict]
    stop_reason: str


def train(global_agent: Agent, victim, D: Discriminator, pairs: Sequence[Pair], table: CandidateTable,
          cfg: TrainConfig = TrainConfig(), log_path=None, time_budget: Optional[float] = None,
          include_wallclock: bool = True) -> TrainResult:
    """Alternate discriminator rounds and agent episodes until the
    discriminator's test accuracy stays under ``conv_bound`` for ``patience``
    consecutive rounds (or ``max_rounds`` / ``time_budget`` runs out)."""
    _check_vocab(global_agent, victim, D)
    sv, tv = victim.src_vocab, victim.tgt_vocab
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.workers + 1)
    d_rng = np.random.default_rng(seeds[0])
    worker_rngs = [np.random.default_rng(s) for s in seeds[1:]]
    params = global_agent.parameters()
    opt = Adafactor(params, lr=cfg.lr, warmup=cfg.warmup)
    d_opt = make_d_optimizer(D)
    perturber = PolicyPerturber(global_agent, table, forbid_unk=cfg.reward_mode == "reinforced")
    locals_ = []
    for _ in range(cfg.workers):
        local = Agent(global_agent.vocab_size, global_agent.cfg)
        local.copy_from(global_agent)
        env = Environment(victim, D, table, cfg.a, cfg.b, cfg.reward_mode, cfg.score_on, cfg.unk_surface)
        locals_.append((local, env))
    log: List[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    start = time.time()
    patience = 0
    episodes = 0
    stop_reason = "max_rounds"
    try:
        for rnd in range(1, cfg.max_rounds + 1):
            d_res = train_round(D, d_opt, pairs, perturber, d_rng, sv, tv, cfg.step_d, cfg.acc_bound, cfg.batch_size)
            acc = test_accuracy(D, pairs, perturber, cfg.test_batches, d_rng, sv, tv, cfg.batch_size)
            patience = patience + 1 if acc < cfg.conv_bound else 0
            record = {"round": rnd, "acc_d": acc, "d_steps": d_res["steps"], "d_train_acc": d_res["accuracy"],
                      "patience": patience}
            if patience >= cfg.patience:
                stop_reason = "patience"
            else:
                stats = _agent_phase(global_agent, params, opt, locals_, pairs, cfg, worker_rngs)
                episodes += len(stats)
                record.update({
                    "episodes": episodes,
                    "mean_reward": float(np.mean([s["reward"] for s in stats])),
                    "survival": float(np.mean([s["survivors"] for s in stats])) / cfg.batch_size,
                    "perturbed_rows": float(np.mean([s["perturbed_rows"] for s in stats])) / cfg.batch_size,
                })
            record.setdefault("episodes", episodes)
            if include_wallclock:
                record["wall_clock"] = round(time.time() - start, 3)
            log.append(record)
            logger.info("round %s", json.dumps(record))
            if fh:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
            if stop_reason == "patience":
                break
            if time_budget is not None and time.time() - start > time_budget:
                stop_reason = "time_budget"
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(global_agent, D, log, stop_reason)


def _agent_phase(global_agent, params, opt, locals_, pairs, cfg: TrainConfig, rngs) -> List[dict]:
    sv, tv = locals_[0][1].victim.src_vocab, locals_[0][1].victim.tgt_vocab
    if cfg.workers == 1:
        local, env = locals_[0]
        out = []
        for _ in range(cfg.step_a):
            batch = sample_batch(pairs, cfg.batch_size, rngs[0], sv, tv)
            out.append(run_episode(local, params, opt, env, batch, cfg, rngs[0]))
        return out
    results: List[List[dict]] = [[] for _ in range(cfg.workers)]
    quota = [cfg.step_a // cfg.workers + (1 if w < cfg.step_a % cfg.workers else 0) for w in range(cfg.workers)]

    def work(w: int) -> None:
        local, env = locals_[w]
        for _ in range(quota[w]):
            batch = sample_batch(pairs, cfg.batch_size, rngs[w], sv, tv)
            results[w].append(run_episode(local, params, opt, env, batch, cfg, rngs[w]))

    threads = [threading.Thread(target=work, args=(w,)) for w in range(cfg.workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    return [r for rs in results for r in rs]


# -- inference -------------------------------------------------------------------

def perturb_inference(agent: Agent, src: np.ndarray, mask: np.ndarray, table: CandidateTable,
                      rule: str = "conjunction", forbid_unk: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic left-to-right attack on framed ids.

    Position t takes the nearest candidate of its current token when the
    actor prefers perturbing and the critic value is positive (``conjunction``),
    or whenever the critic value is positive (``critic``).
    Returns (perturbed ids, (N, S) bool decisions).
    """
    if rule not in INFERENCE_RULES:
        raise ValueError(f"unknown inference rule {rule!r}")
    src = src.copy()
    lengths = mask.sum(axis=1) - 2
    decisions = np.zeros(src.shape, dtype=bool)
    for t in range(1, src.shape[1] - 1):
        probs, v = agent.policy_forward(src, mask, t)
        go = v > 0
        if rule == "conjunction":
            go &= probs[:, PERTURB] > probs[:, HOLD]
        go &= t <= lengths
        for i in np.flatnonzero(go):
            cands = candidate_list(table, src[i, t], forbid_unk)
            if cands:
                src[i, t] = cands[0]
                decisions[i, t] = True
    return src, decisions
