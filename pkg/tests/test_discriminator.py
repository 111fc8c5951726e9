import numpy as np
import pytest

from advnmt.agent import Agent, AgentConfig, PolicyPerturber
from advnmt.candidates import build_table
from advnmt.discriminator import (NEGATIVE, POSITIVE, Discriminator, DiscriminatorConfig, build_paired_batch,
                                  build_training_batch, draw_batches, make_optimizer, test_accuracy as d_accuracy,
                                  train_round)
from advnmt.engine import ops
from advnmt.textdata import frame, make_batch

SMALL = DiscriminatorConfig(emb=16, hidden=32, ff=64, lr=3e-3)


class Identity:
    def perturb(self, batch, rng):
        return batch.src.copy()


class Scramble:
    """Replaces a fraction of each row's tokens with uniformly random content ids."""

    def __init__(self, vocab_size, frac=1.0):
        self.V, self.frac = vocab_size, frac

    def perturb(self, batch, rng):
        src = batch.src.copy()
        for i, n in enumerate(batch.src_lengths):
            k = max(1, int(round(self.frac * n)))
            pos = rng.choice(np.arange(1, n + 1), size=k, replace=False)
            src[i, pos] = rng.integers(4, self.V, size=k)
        return src


def make_d(lexicon_small, cfg=SMALL, seed=0):
    _, _, _, sv, tv = lexicon_small
    return Discriminator(len(sv), len(tv), cfg, seed=seed)


def test_output_is_a_simplex(lexicon_small):
    _, train, _, sv, tv = lexicon_small
    D = make_d(lexicon_small, DiscriminatorConfig())
    b = make_batch(train[:20], sv, tv)
    D.eval()
    p = ops.softmax(D.logits(b.src, b.src_mask, b.tgt, b.tgt_mask)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p >= 0)


def test_untrained_scores_near_half(lexicon_small):
    _, train, _, sv, tv = lexicon_small
    D = make_d(lexicon_small, DiscriminatorConfig())
    rng = np.random.default_rng(0)
    srcs = [train[int(i)] for i in rng.choice(len(train), 100, replace=False)]
    tgts = [train[int(i)] for i in rng.choice(len(train), 100, replace=False)]
    p = [D.score_pair(sv.encode(s), tv.encode(t)) for (s, _), (_, t) in zip(srcs, tgts)]
    assert 0.35 <= np.mean(p) <= 0.65


def test_batches_are_label_balanced(lexicon_small):
    _, train, _, sv, tv = lexicon_small
    rng = np.random.default_rng(4)
    for n in (2, 10, 50):
        tr = build_training_batch(train, n, Identity(), rng, sv, tv)
        assert (tr[4] == POSITIVE).sum() == n // 2
        te = build_paired_batch(train, n, Identity(), rng, sv, tv)
        assert (te[4] == POSITIVE).sum() == (te[4] == NEGATIVE).sum() == n // 2


def test_paired_batch_rows_match(lexicon_small):
    _, train, _, sv, tv = lexicon_small
    tr, te = draw_batches(train, 10, 8, Scramble(len(sv)), np.random.default_rng(1), sv, tv)
    src, sm, tgt, tm, labels = te
    np.testing.assert_array_equal(tgt[:8], tgt[8:])
    np.testing.assert_array_equal(sm[:8], sm[8:])
    assert not np.array_equal(src[:8], src[8:])


def test_identity_agent_stays_at_chance(lexicon_small):
    _, train, _, sv, tv = lexicon_small
    D = make_d(lexicon_small)
    res = train_round(D, make_optimizer(D), train, Identity(), np.random.default_rng(0), sv, tv, step_d=20)
    assert res["steps"] == 20
    assert abs(res["accuracy"] - 0.5) <= 0.1


def test_random_guessing_is_chance(lexicon_small):
    _, train, _, sv, tv = lexicon_small

    class Coin:
        def __init__(self):
            self.rng = np.random.default_rng(5)

        def prob_positive(self, src, sm, tgt, tm):
            return self.rng.random(len(src))

    acc = d_accuracy(Coin(), train, Scramble(len(sv)), 12, np.random.default_rng(2), sv, tv, batch_size=100)
    assert abs(acc - 0.5) <= 0.1


def test_small_corpus_rejected(lexicon_small):
    _, train, _, sv, tv = lexicon_small
    D = make_d(lexicon_small)
    with pytest.raises(ValueError):
        train_round(D, make_optimizer(D), train[:40], Identity(), np.random.default_rng(0), sv, tv)


def test_agent_untouched_and_deterministic(lexicon_small, tiny_victim):
    _, train, _, sv, tv = lexicon_small
    agent = Agent(len(sv), AgentConfig(emb=8, hidden=6, ff=10), seed=1)
    table = build_table(tiny_victim.export_embeddings(), k=3)
    before = {k: v.copy() for k, v in agent.state_dict().items()}
    results = []
    for _ in range(2):
        D = make_d(lexicon_small)
        rng = np.random.default_rng(7)
        res = train_round(D, make_optimizer(D), train, PolicyPerturber(agent, table), rng, sv, tv, step_d=3)
        acc = d_accuracy(D, train, PolicyPerturber(agent, table), 2, rng, sv, tv)
        results.append((res, acc, D.state_dict()["out.weight"].copy()))
    for k, v in agent.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    assert results[0][:2] == results[1][:2]
    assert results[0][2].tobytes() == results[1][2].tobytes()


@pytest.fixture(scope="module")
def scramble_trained(lexicon_small):
    _, train, _, sv, tv = lexicon_small
    D = make_d(lexicon_small)
    opt = make_optimizer(D)
    rng = np.random.default_rng(0)
    first = train_round(D, opt, train, Scramble(len(sv)), rng, sv, tv)
    train_round(D, opt, train, Scramble(len(sv)), rng, sv, tv, step_d=900, acc_bound=1.01)
    return D, first


def test_scrambled_negatives_reach_bound(scramble_trained):
    _, first = scramble_trained
    assert first["accuracy"] >= 0.85 and first["steps"] <= 80


def test_separable_negatives_high_accuracy(scramble_trained, lexicon_small):
    _, train, test, sv, tv = lexicon_small
    D, _ = scramble_trained
    acc = d_accuracy(D, test + train, Scramble(len(sv)), 10, np.random.default_rng(9), sv, tv)
    assert acc >= 0.95


def test_clean_beats_half_scrambled(scramble_trained, lexicon_small):
    _, _, test, sv, tv = lexicon_small
    D, _ = scramble_trained
    rng = np.random.default_rng(3)
    pert = Scramble(len(sv), frac=0.5)
    wins = total = 0
    while total < 200:
        pairs = [test[int(i)] for i in rng.choice(len(test), 50, replace=False)]
        b = make_batch(pairs, sv, tv)
        clean = D.prob_positive(b.src, b.src_mask, b.tgt, b.tgt_mask)
        noisy = D.prob_positive(pert.perturb(b, rng), b.src_mask, b.tgt, b.tgt_mask)
        wins += int((clean > noisy).sum())
        total += len(pairs)
    assert wins / total >= 0.9


def test_checkpoint_round_trip(scramble_trained, tmp_path, lexicon_small):
    _, train, _, sv, tv = lexicon_small
    D, _ = scramble_trained
    D.save(tmp_path / "d.ntc")
    D2 = Discriminator.load(tmp_path / "d.ntc")
    s, sm = frame([sv.encode(p[0]) for p in train[:5]])
    t, tm = frame([tv.encode(p[1]) for p in train[:5]])
    assert D.prob_positive(s, sm, t, tm).tobytes() == D2.prob_positive(s, sm, t, tm).tobytes()


def test_from_victim_copies_embeddings(tiny_victim):
    D = Discriminator.from_victim(tiny_victim)
    assert D.cfg.emb == tiny_victim.cfg.emb
    np.testing.assert_array_equal(D.src_emb.weight.data, tiny_victim.src_emb.weight.data)
    np.testing.assert_array_equal(D.tgt_emb.weight.data, tiny_victim.tgt_emb.weight.data)
    assert D.src_emb.weight.data is not tiny_victim.src_emb.weight.data
