import numpy as np
import pytest

from advnmt.candidates import CandidateTable
from advnmt.environment import KEEP, Environment
from advnmt.metrics import relative_degradation, sentence_bleu
from advnmt.textdata import UNK, Vocab, make_batch


class Out:
    def __init__(self, tokens):
        self.tokens = tokens


class UpperVictim:
    """Stand-in victim that translates by upper-casing, with one fixed mistake."""

    def __init__(self, vocab):
        self.src_vocab = vocab
        self.calls = 0

    def translate_batch(self, srcs):
        self.calls += 1
        return [Out(["WRONG" if w == "bad" else w.upper() for w in s]) for s in srcs]


class ScriptedD:
    """Returns script[step][row]; rows are identified by their first target token."""

    def __init__(self, script, tgt_vocab):
        self.script = np.asarray(script, dtype=float)
        self.tv = tgt_vocab
        self.calls = 0
        self.rows_seen = []

    def prob_positive(self, src, sm, tgt, tm):
        rows = [int(self.tv.itos[t][1:]) for t in tgt[:, 1]]
        self.rows_seen.append(rows)
        out = self.script[self.calls, rows]
        self.calls += 1
        return out


WORDS = ["a", "b", "c", "d", "e", "bad"]


def setup(script, n_rows=3, length=3, cache=False, mode="adversarial", table=None, srcs=None):
    sv = Vocab(WORDS)
    tv = Vocab([f"R{i}" for i in range(n_rows)] + [w.upper() for w in WORDS])
    srcs = srcs or [WORDS[:length] for _ in range(n_rows)]
    pairs = [(s, [f"R{i}"] + [w.upper() for w in s]) for i, s in enumerate(srcs)]
    batch = make_batch(pairs, sv, tv)
    table = table or CandidateTable({sv.id(w): [sv.id("e")] for w in WORDS}, {}, 1.0, 1)
    env = Environment(UpperVictim(sv), ScriptedD(script, tv), table, cache=cache, mode=mode)
    return env, batch, sv


def test_reset_state():
    env, batch, _ = setup([[0.9] * 3] * 3)
    s = env.reset(batch)
    assert s.t == 1 and s.alive.all() and s.N == 3
    np.testing.assert_array_equal(s.src, s.originals)
    with pytest.raises(ValueError):
        env.reset(make_batch([], env.src_vocab, env.src_vocab))


def test_hand_trace_with_masking_and_final_bonus():
    script = [[0.9, 0.7, 0.4],     # row 2 dies at step 1
              [0.8, 0.6, 0.9],     # row 2's score no longer counts
              [0.5, 0.45, 0.9]]    # row 1 dies at the last step
    env, batch, sv = setup(script)
    env.reset(batch)
    _, r1 = env.step([KEEP] * 3)
    assert r1.reward == pytest.approx((0.45 + 0.35 + 0) / 3)
    assert not r1.terminal
    _, r2 = env.step([sv.id("e"), KEEP, sv.id("e")])
    assert r2.reward == pytest.approx((0.4 + 0.3) / 3)
    assert env.state.src[2, 2] == sv.id("b")        # dead rows are frozen
    assert env.state.src[0, 2] == sv.id("e")
    s, r3 = env.step([KEEP] * 3)
    assert s.done and not r3.terminal
    rd0 = relative_degradation(sentence_bleu(["A", "B", "C"], [["A", "B", "C"]]),
                               sentence_bleu(["A", "E", "C"], [["A", "B", "C"]]))
    np.testing.assert_allclose(r3.degradation, [rd0, 0, 0])
    assert r3.reward == pytest.approx((0.5 * 0.5 + 10 * rd0) / 3)
    assert env.D.rows_seen == [[0, 1, 2], [0, 1], [0, 1]]
    with pytest.raises(RuntimeError):
        env.step([KEEP] * 3)


def test_alive_pair_example():
    env, batch, _ = setup([[0.9, 0.7]] * 3, n_rows=2)
    env.reset(batch)
    _, r = env.step([KEEP, KEEP])
    assert r.reward == pytest.approx(0.40)


def test_all_dead_is_terminal_minus_one():
    env, batch, _ = setup([[0.1, 0.2, 0.3]] * 3)
    env.reset(batch)
    s, r = env.step([KEEP] * 3)
    assert r.reward == -1.0 and r.terminal and s.done
    with pytest.raises(RuntimeError):
        env.step([KEEP] * 3)


def test_no_perturbation_means_no_degradation():
    env, batch, _ = setup([[0.9] * 3] * 3)
    env.reset(batch)
    for _ in range(3):
        s, r = env.step([KEEP] * 3)
    np.testing.assert_array_equal(r.degradation, 0.0)
    np.testing.assert_array_equal(s.src, s.originals)
    assert env.victim.calls == 0
    assert r.reward == pytest.approx(0.45)


def test_cached_scores_only_requery_changed_rows():
    env, batch, sv = setup([[0.9, 0.8, 0.7]] * 3, cache=True)
    env.reset(batch)
    env.step([KEEP] * 3)
    env.step([KEEP, sv.id("e"), KEEP])
    _, r = env.step([KEEP] * 3)
    assert env.D.rows_seen == [[0, 1, 2], [1]]
    np.testing.assert_allclose(r.survival, [0.9, 0.8, 0.7])


def test_on_perturb_only_judges_changed_rows():
    env, batch, sv = setup([[0.9, 0.3, 0.3], [0.9, 0.3, 0.3], [0.9, 0.3, 0.3]])
    env.score_on = "on-perturb"
    env.reset(batch)
    s, _ = env.step([KEEP] * 3)
    assert s.alive.all()
    s, _ = env.step([KEEP, sv.id("e"), KEEP])
    np.testing.assert_array_equal(s.alive, [True, False, True])


def test_action_errors():
    env, batch, _ = setup([[0.9] * 3] * 3)
    with pytest.raises(RuntimeError):
        env.step([KEEP] * 3)
    env.reset(batch)
    with pytest.raises(ValueError):
        env.step([KEEP] * 2)
    with pytest.raises(RuntimeError):
        env.episodic_degradation()


def test_unk_replacement_uses_an_unknown_surface():
    env, batch, _ = setup([[0.9] * 3] * 3)
    env.reset(batch)
    env.step([UNK, KEEP, KEEP])
    surface = env.state.surfaces[0][0]
    assert surface != "a" and env.src_vocab.id(surface) == UNK


def test_reinforced_mode_rewards_improvement_and_forbids_unk():
    srcs = [["a", "bad", "c", "d"]]
    sv = Vocab(WORDS)
    table = CandidateTable({sv.id("bad"): [sv.id("b")]}, {}, 1.0, 1)
    env, batch, _ = setup([[0.9]] * 4, n_rows=1, table=table, srcs=srcs, mode="reinforced")
    batch.tgt_tokens[0][:] = ["R0", "A", "B", "C", "D"]
    env.reset(batch)
    env.step([UNK])
    assert env.state.src[0, 1] == sv.id("a")
    env.step([sv.id("b")])
    env.step([KEEP])
    _, r = env.step([KEEP])
    refs = [["R0", "A", "B", "C", "D"]]
    before = sentence_bleu(["A", "WRONG", "C", "D"], refs)
    after = sentence_bleu(["A", "B", "C", "D"], refs)
    assert after > before
    assert r.degradation[0] == pytest.approx(-(before - after) / before)
    assert r.degradation[0] > 0


def test_reward_mode_switching():
    env, batch, _ = setup([[0.9] * 3] * 3)
    env.set_reward_mode("reinforced")
    env.reset(batch)
    env.step([KEEP] * 3)
    with pytest.raises(RuntimeError):
        env.set_reward_mode("adversarial")
    with pytest.raises(ValueError):
        Environment(None, None, None, mode="other")


def test_relative_degradation_arithmetic():
    assert relative_degradation(50.0, 25.0) == pytest.approx(0.5)
    assert relative_degradation(0.0, 10.0) == 0.0
