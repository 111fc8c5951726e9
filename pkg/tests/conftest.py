import numpy as np
import pytest

from advnmt.textdata import Vocab, build_vocab, split_corpus, synth_corpus
from advnmt.victim import Victim, VictimConfig

TINY = VictimConfig(emb=8, enc_hidden=6, dec_hidden=10, att=7, readout=9)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def lexicon_small():
    sc = synth_corpus("lexicon", 20, 400, (3, 7), seed=3)
    train, test = split_corpus(sc.pairs, 50)
    sv = build_vocab([s for s, _ in train], 100)
    tv = build_vocab([t for _, t in train], 100)
    return sc, train, test, sv, tv


@pytest.fixture
def tiny_victim(lexicon_small):
    _, _, _, sv, tv = lexicon_small
    return Victim(sv, tv, TINY, seed=5)


# -- acceptance reporting ---------------------------------------------------------
# Tests marked ``@pytest.mark.criterion("7b")`` are grouped by id; the terminal
# summary prints one PASS/FAIL line per id with any recorded "detail" properties.

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    entry = _criteria.setdefault(str(marker.args[0]), {"ok": True, "details": []})
    entry["ok"] = entry["ok"] and report.passed
    if report.when == "call":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def _criterion_key(cid):
    digits = "".join(ch for ch in cid if ch.isdigit())
    return int(digits or 0), cid


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=_criterion_key):
        entry = _criteria[cid]
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if entry['ok'] else 'FAIL'}"
                                    + (f" ({detail})" if detail else ""))
