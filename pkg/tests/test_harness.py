import math
import random

import numpy as np
import pytest

from advnmt.harness import (AttackReport, ReportRow, analyze_preferences, coerce, config_hash, evaluate,
                            export_tuning, parse_config, relative_bleu_decrease, resolve_seed, run_attack,
                            time_attack, write_manifest, write_tuning)
from advnmt.agent import Agent, AgentConfig, TrainConfig
from advnmt.baselines import GsConfig, RsniConfig
from advnmt.candidates import build_table
from advnmt.metrics import chr_bleu
from advnmt.textdata import read_parallel, split_corpus


def row(i, ref, pert_hyp, original=None, perturbed=None, decisions=None, survival=()):
    original = original or ref.lower().split()
    perturbed = perturbed or list(original)
    decisions = decisions if decisions is not None else [a != b for a, b in zip(original, perturbed)]
    return ReportRow(i, original, perturbed, decisions, [ref.split()], ref.split(), pert_hyp.split(),
                     100.0, 0.0, list(survival))


def three_rows():
    return [row(0, "A B C D", "A B C D"),
            row(1, "E F G H", "E F G X", perturbed=["e", "f", "g", "x"]),
            row(2, "I J K L", "I J K L")]


def test_three_row_report_by_hand():
    rows = three_rows()
    s = evaluate(rows)
    expected = 100 * math.exp(0.25 * (math.log(11 / 12) + math.log(8 / 9) + math.log(5 / 6) + math.log(2 / 3)))
    assert s["bleu_original"] == pytest.approx(100.0)
    assert s["bleu_perturbed"] == pytest.approx(expected, rel=1e-12)
    assert s["bleu_delta"] == pytest.approx(100.0 - expected)
    assert s["modification_rate"] == pytest.approx(1 / 12)
    chr_ = chr_bleu([r.perturbed for r in rows], [r.original for r in rows])
    assert s["chrbleu"] == pytest.approx(chr_)
    assert s["rd"] == pytest.approx((100 - expected) / ((1 - chr_) * 100))
    assert relative_bleu_decrease(s) == pytest.approx((100 - expected) / 100)


def test_aggregates_stable_under_permutation():
    rows = three_rows()
    base = evaluate(rows)
    for seed in range(5):
        shuffled = rows[:]
        random.Random(seed).shuffle(shuffled)
        other = evaluate(shuffled)
        for k, v in base.items():
            assert other[k] == pytest.approx(v, rel=1e-12) if v is not None else other[k] is None


def test_unperturbed_report_has_no_rd():
    rows = [row(0, "A B C", "A B C"), row(1, "D E", "D E")]
    s = evaluate(rows)
    assert s["rd"] is None and s["chrbleu"] == 1.0 and s["bleu_delta"] == 0.0


def test_evaluate_rejects_misalignment():
    with pytest.raises(ValueError):
        evaluate(three_rows(), refs=[[["A"]]])
    with pytest.raises(ValueError):
        evaluate([])
    with pytest.raises(ValueError):
        ReportRow(0, ["a"], ["a", "b"], [False], [["A"]], [], [])


def test_report_round_trip_and_tamper_detection(tmp_path):
    rows = three_rows()
    rows[0].survival = [0.9, 0.8]
    rows[1].survival = [0.9, 0.3]
    rep = AttackReport(rows, meta={"method": "agent"})
    assert rep.summary["d_pass_rate"] == pytest.approx(0.5)
    rep.write(tmp_path / "r.jsonl")
    back = AttackReport.read(tmp_path / "r.jsonl")
    assert back.meta == {"method": "agent"}
    assert back.summary == rep.summary
    assert [r.perturbed for r in back.rows] == [r.perturbed for r in rows]
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    lines[2] = lines[2].replace('"X"', '"H"')
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="disagrees"):
        AttackReport.read(tmp_path / "bad.jsonl")


def test_analyze_preferences_counts():
    rows = [row(0, "A B C", "", original=["a", "b", "c"], decisions=[True, False, True]),
            row(1, "D E", "", original=["d", "e"], decisions=[True, False])]
    rates = analyze_preferences(rows, ["N V N", "V N"])
    assert rates == {"N": 2 / 3, "V": 1 / 2, "overall": 3 / 5}
    none = analyze_preferences([row(0, "A B", "", decisions=[False, False])], ["M X"])
    assert none == {"M": 0.0, "X": 0.0, "overall": 0.0}
    only_m = analyze_preferences([row(0, "A B C", "", decisions=[True, False, True])], ["M X M"])
    assert only_m["M"] == 1.0 and only_m["X"] == 0.0
    with pytest.raises(ValueError, match="line 2"):
        analyze_preferences(rows, ["N V N", "V"])


def test_export_tuning_pairs(tmp_path):
    rows = three_rows()
    tgts = [["A", "B", "C", "D"], ["E", "F", "G", "H"], ["I", "J", "K", "L"]]
    pairs = export_tuning(rows, tgts)
    assert len(pairs) == 3
    assert [t for _, t in pairs] == tgts
    assert pairs[1][0] == ["e", "f", "g", "x"]
    write_tuning(rows, tgts, tmp_path / "t.src", tmp_path / "t.tgt")
    assert read_parallel(tmp_path / "t.src", tmp_path / "t.tgt") == pairs
    with pytest.raises(ValueError):
        export_tuning(rows, tgts[:2])


def test_config_parsing_and_coercion(monkeypatch):
    text = "# comment\ngamma = 0.9\nstep-a = 7  # inline\nscore_on = on-perturb\n\nunused = 1\n"
    values = parse_config(text)
    cfg = coerce(TrainConfig, values)
    assert cfg.gamma == 0.9 and cfg.step_a == 7 and cfg.score_on == "on-perturb"
    with pytest.raises(ValueError):
        coerce(TrainConfig, values, strict=True)
    with pytest.raises(ValueError):
        parse_config("no equals sign")
    assert coerce(GsConfig, {"recompute": "false"}).recompute is False
    assert coerce(RsniConfig, {"ops": "swap,drop"}).ops == ("swap", "drop")
    monkeypatch.setenv("ADVNMT_SEED", "17")
    assert resolve_seed(3) == 17
    monkeypatch.delenv("ADVNMT_SEED")
    assert resolve_seed(3) == 3
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


def test_manifest_contents(tmp_path):
    m = write_manifest(tmp_path / "m.json", "attack", 5, {"k": 1}, {"wall_clock": 1.0})
    assert m["seed"] == 5 and m["config_hash"] == config_hash({"k": 1})
    assert set(m["versions"]) == {"advnmt", "python", "numpy", "scipy"}


@pytest.fixture
def attack_setup(tiny_victim, lexicon_small):
    _, _, test, sv, tv = lexicon_small
    srcs = [s for s, _ in test[:12]]
    refs = [[t] for _, t in test[:12]]
    table = build_table(tiny_victim.export_embeddings(), k=3)
    agent = Agent.from_victim(tiny_victim, AgentConfig(emb=8, hidden=5, ff=7), seed=1)
    return srcs, refs, table, agent


@pytest.mark.parametrize("method", ["agent", "gs", "rsni"])
def test_run_attack_reports(tiny_victim, attack_setup, method):
    srcs, refs, table, agent = attack_setup
    rep = run_attack(method, tiny_victim, srcs, refs, agent=agent, table=table, seed=3)
    again = run_attack(method, tiny_victim, srcs, refs, agent=agent, table=table, seed=3)
    assert [r.perturbed for r in rep.rows] == [r.perturbed for r in again.rows]
    assert rep.summary == evaluate(rep.rows)
    for r, s in zip(rep.rows, srcs):
        assert r.original == s
        assert r.decisions == [a != b for a, b in zip(r.original, r.perturbed)]


def test_timing_reports_gradient_passes(tiny_victim, attack_setup):
    srcs, refs, table, agent = attack_setup
    tgts = [r[0] for r in refs]
    gs = time_attack("gs", tiny_victim, srcs, tgts, table=table, repeats=2, gs_cfg=GsConfig(ratio=0.2))
    ag = time_attack("agent", tiny_victim, srcs, tgts, agent=agent, table=table, repeats=2)
    assert gs["backward_passes"] > 0 and ag["backward_passes"] == 0
    assert len(gs["repeats"]) == 2 and gs["std_seconds"] >= 0
    with pytest.raises(ValueError):
        time_attack("other", tiny_victim, srcs, tgts)


def test_rsni_counts_pin_noise_per_row(tiny_victim, attack_setup):
    srcs, refs, _, _ = attack_setup
    counts = [i % 3 for i in range(len(srcs))]
    rep = run_attack("rsni", tiny_victim, srcs, refs, rsni_cfg=RsniConfig(ops=("substitute",)),
                     rsni_counts=counts, seed=1)
    assert [sum(r.decisions) for r in rep.rows] == [min(c, len(s)) for c, s in zip(counts, srcs)]
    with pytest.raises(ValueError):
        run_attack("rsni", tiny_victim, srcs, refs, rsni_counts=[1])
